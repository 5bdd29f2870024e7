"""Conjugate models with closed-form evidence, used as oracles.

In both models every reference density considered is in the conjugate
family, so ``p_rho`` is too and the move kernel is an exact draw from it.
Repeated exact draws add nothing, so ``propagate`` makes one per call.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import stats
from scipy.special import betaln

from ..engine import BridgeTarget

_LOG_2PI = math.log(2.0 * math.pi)


def _norm_logpdf(x, mean, var):
    return -0.5 * (_LOG_2PI + math.log(var) + (x - mean) ** 2 / var)


def _beta_logpdf(t, a, b):
    return (a - 1.0) * math.log(t) + (b - 1.0) * math.log1p(-t) - float(betaln(a, b))


class GaussianMeanTarget(BridgeTarget):
    """``x_i ~ N(mu, noise_var)`` with prior ``mu ~ N(prior_mean, prior_var)``.

    The reference is ``N(ref_mean, ref_var)``; by default the prior.
    """

    param_names = ["mu"]

    def __init__(self, x, noise_var: float = 1.0, prior_mean: float = 0.0, prior_var: float = 1.0,
                 ref_mean: float | None = None, ref_var: float | None = None):
        self.x = np.asarray(x, dtype=float).ravel()
        self.noise_var = float(noise_var)
        self.prior_mean = float(prior_mean)
        self.prior_var = float(prior_var)
        self.ref_mean = self.prior_mean if ref_mean is None else float(ref_mean)
        self.ref_var = self.prior_var if ref_var is None else float(ref_var)
        prec = 1.0 / self.prior_var + self.x.size / self.noise_var
        mean = (self.prior_mean / self.prior_var + self.x.sum() / self.noise_var) / prec
        self._posterior = (float(mean), 1.0 / prec)

    def posterior(self) -> tuple[float, float]:
        return self._posterior

    def with_reference(self, mean: float, var: float) -> "GaussianMeanTarget":
        return GaussianMeanTarget(self.x, self.noise_var, self.prior_mean, self.prior_var, mean, var)

    def exact_posterior_target(self) -> "GaussianMeanTarget":
        return self.with_reference(*self.posterior())

    def log_evidence(self) -> float:
        n = self.x.size
        cov = self.noise_var * np.eye(n) + self.prior_var * np.ones((n, n))
        return float(stats.multivariate_normal(np.full(n, self.prior_mean), cov).logpdf(self.x))

    def log_prior(self, theta) -> float:
        return _norm_logpdf(theta[0], self.prior_mean, self.prior_var)

    def log_lik(self, theta) -> float:
        r = self.x - theta[0]
        return float(-0.5 * (self.x.size * (_LOG_2PI + math.log(self.noise_var)) + r @ r / self.noise_var))

    def log_approx(self, theta) -> float:
        return _norm_logpdf(theta[0], self.ref_mean, self.ref_var)

    def sample_approx(self, rng):
        return np.array([self.ref_mean + np.sqrt(self.ref_var) * rng.standard_normal()])

    def tempered_moments(self, rho: float) -> tuple[float, float]:
        pm, pv = self.posterior()
        prec = (1.0 - rho) / self.ref_var + rho / pv
        mean = ((1.0 - rho) * self.ref_mean / self.ref_var + rho * pm / pv) / prec
        return mean, 1.0 / prec

    def move(self, theta, rho, rng):
        mean, var = self.tempered_moments(rho)
        return np.array([mean + np.sqrt(var) * rng.standard_normal()])

    def propagate(self, theta, rho, rng, sweeps, index=-1):
        theta = self.move(theta, rho, rng)
        return theta, self.log_alpha(theta, index)


class BetaBinomialTarget(BridgeTarget):
    """``k`` successes in ``n`` Bernoulli trials, prior ``Beta(a, b)``.

    The likelihood is that of the observed sequence, without the binomial
    coefficient, so the evidence is ``B(a + k, b + n - k) / B(a, b)``.
    """

    param_names = ["p"]

    def __init__(self, n: int, k: int, a: float = 1.0, b: float = 1.0,
                 ref_a: float | None = None, ref_b: float | None = None):
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        self.n, self.k = int(n), int(k)
        self.a, self.b = float(a), float(b)
        self.ref_a = self.a if ref_a is None else float(ref_a)
        self.ref_b = self.b if ref_b is None else float(ref_b)

    def posterior(self) -> tuple[float, float]:
        return self.a + self.k, self.b + self.n - self.k

    def exact_posterior_target(self) -> "BetaBinomialTarget":
        return BetaBinomialTarget(self.n, self.k, self.a, self.b, *self.posterior())

    def log_evidence(self) -> float:
        return float(betaln(*self.posterior()) - betaln(self.a, self.b))

    def log_prior(self, theta) -> float:
        return _beta_logpdf(theta[0], self.a, self.b)

    def log_lik(self, theta) -> float:
        t = theta[0]
        return self.k * math.log(t) + (self.n - self.k) * math.log1p(-t)

    def log_approx(self, theta) -> float:
        return _beta_logpdf(theta[0], self.ref_a, self.ref_b)

    def sample_approx(self, rng):
        return np.array([_open_unit(rng.beta(self.ref_a, self.ref_b))])

    def move(self, theta, rho, rng):
        pa, pb = self.posterior()
        a = (1.0 - rho) * self.ref_a + rho * pa
        b = (1.0 - rho) * self.ref_b + rho * pb
        return np.array([_open_unit(rng.beta(a, b))])

    def propagate(self, theta, rho, rng, sweeps, index=-1):
        theta = self.move(theta, rho, rng)
        return theta, self.log_alpha(theta, index)


def _open_unit(t: float) -> float:
    return min(max(t, 1e-300), 1.0 - 1e-16)
