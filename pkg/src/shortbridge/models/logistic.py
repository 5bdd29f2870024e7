"""Bayesian logistic regression on the bridge."""
from __future__ import annotations

import numpy as np

from ..approximations.gaussian import GaussianApprox, prior_gaussian
from ..engine import BridgeTarget

MH_SCALES = (1.0, 0.1, 10.0)


def log_lik_logistic(theta, X, y) -> float:
    eta = X @ theta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def log_prior_logistic(theta, prior_var: float) -> float:
    theta = np.asarray(theta, dtype=float)
    return float(-0.5 * (theta.size * np.log(2.0 * np.pi * prior_var) + theta @ theta / prior_var))


def log_joint_logistic(theta, X, y, prior_var: float) -> float:
    """Log-likelihood plus the ``N(0, prior_var I)`` log-prior."""
    theta = np.asarray(theta, dtype=float)
    return log_lik_logistic(theta, np.atleast_2d(X), np.asarray(y, dtype=float)) + log_prior_logistic(theta, prior_var)


class LogisticTarget(BridgeTarget):
    """Posterior of a logistic regression bridged from a Gaussian reference.

    Parameters
    ----------
    X, y : design matrix and 0/1 responses
    prior_var : float
        Variance of the isotropic Gaussian prior.
    approx : GaussianApprox or None
        Reference density at ``rho = 0``; ``None`` uses the prior (classical bridge).
    proposal_cov : ndarray or None
        Random-walk covariance of the MH kernel, typically the ML
        asymptotic covariance.  Defaults to the reference covariance.
    """

    def __init__(self, X, y, prior_var: float = 100.0, approx: GaussianApprox | None = None,
                 proposal_cov=None, scales=MH_SCALES, names=None):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float).ravel()
        self.prior_var = float(prior_var)
        p = self.X.shape[1]
        self.approx = approx if approx is not None else prior_gaussian(p, prior_var)
        if self.approx.dim != p:
            raise ValueError("approximation dimension does not match the design")
        cov = self.approx.covariance if proposal_cov is None else np.asarray(proposal_cov, dtype=float)
        self.prop_chol = np.linalg.cholesky(cov)
        self.scales = np.sqrt(np.asarray(scales, dtype=float))
        self.param_names = list(names) if names is not None else [f"theta_{j + 1}" for j in range(p)]

    def log_prior(self, theta) -> float:
        return log_prior_logistic(theta, self.prior_var)

    def log_lik(self, theta) -> float:
        return log_lik_logistic(theta, self.X, self.y)

    def log_approx(self, theta) -> float:
        return self.approx.log_density(theta)

    def sample_approx(self, rng):
        return self.approx.sample(rng)

    def move(self, theta, rho, rng):
        return mh_kernel_logistic(theta, rho, self, rng)

    def _parts(self, theta):
        return self.log_lik(theta), self.log_prior(theta), self.log_approx(theta)

    def propagate(self, theta, rho, rng, sweeps, index=-1):
        parts = self._parts(theta)
        for _ in range(sweeps):
            theta, parts = _mh_step(theta, parts, rho, self, rng)
        ll, lp, lq = parts
        if not np.isfinite(lq) or np.isnan(ll) or ll == np.inf:
            return theta, self.log_alpha(theta, index)
        return theta, ll + lp - lq


def _mh_step(theta, parts, rho, target: LogisticTarget, rng):
    ll, lp, lq = parts
    c = target.scales[rng.integers(target.scales.size)]
    cand = theta + c * (target.prop_chol @ rng.standard_normal(theta.size))
    ll_c, lp_c, lq_c = target._parts(cand)
    cur = (1.0 - rho) * lq + rho * (ll + lp)
    new = (1.0 - rho) * lq_c + rho * (ll_c + lp_c)
    if np.log(rng.random()) < new - cur:
        return cand, (ll_c, lp_c, lq_c)
    return theta, parts


def mh_kernel_logistic(theta, rho: float, target: LogisticTarget, rng: np.random.Generator) -> np.ndarray:
    """One random-walk MH step on ``p_rho`` with a three-scale Gaussian mixture proposal.

    The proposal picks one of ``target.scales`` uniformly and adds a Gaussian
    step with that multiple of the proposal covariance.  It depends only on
    the displacement, so the acceptance ratio is the plain target ratio.
    """
    theta = np.asarray(theta, dtype=float)
    return _mh_step(theta, target._parts(theta), rho, target, rng)[0]
