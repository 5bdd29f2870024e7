"""Mean-field variational posterior for latent class analysis.

The factorized family is ``q(pi) q(gamma) q(Z)`` with

    q(pi)          = Dir(delta_1, ..., delta_g)
    q(gamma_kj)    = Beta(alpha_kj, beta_kj)
    q(Z_i = k)     = tau_ik

and coordinate ascent alternates the conjugate parameter updates with the
responsibilities, as in the BayesLCA scheme.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, digamma, gammaln, logsumexp

from .symmetrize import identity_perm

TAU_FLOOR = 1e-10


@dataclass(frozen=True)
class LcaHyper:
    """Dirichlet(d) prior on proportions, Beta(a, b) on item probabilities."""

    d: float = 2.0
    a: float = 2.0
    b: float = 2.0

    def __post_init__(self):
        if min(self.d, self.a, self.b) <= 0:
            raise ValueError("hyper-parameters must be positive")


def log_dirichlet_pdf(x, conc) -> float:
    x = np.asarray(x, dtype=float)
    conc = np.asarray(conc, dtype=float)
    return float(gammaln(conc.sum()) - gammaln(conc).sum() + np.sum((conc - 1.0) * np.log(x)))


def log_beta_pdf(x, a, b) -> np.ndarray:
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


def categorical_rows(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of unnormalized log-probabilities."""
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    cdf = np.cumsum(p, axis=1)
    u = rng.random(logits.shape[0]) * cdf[:, -1]
    z = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(z, logits.shape[1] - 1)


@dataclass
class LcaVbApprox:
    dirichlet_params: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    assign_probs: np.ndarray
    elbo: float = float("nan")
    elbo_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.dirichlet_params = np.asarray(self.dirichlet_params, dtype=float)
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        tau = np.atleast_2d(np.asarray(self.assign_probs, dtype=float))
        if min(self.dirichlet_params.min(), self.alpha.min(), self.beta.min()) <= 0:
            raise ValueError("variational parameters must be positive")
        tau = np.maximum(tau, TAU_FLOOR)
        self.assign_probs = tau / tau.sum(axis=1, keepdims=True)
        self.log_tau = np.log(self.assign_probs)

    @property
    def g(self) -> int:
        return self.dirichlet_params.size

    @property
    def q(self) -> int:
        return self.alpha.shape[1]

    @property
    def n(self) -> int:
        return self.assign_probs.shape[0]

    # -- permuted-factor densities (identity permutation = plain VB) -------

    def component_log_density(self, z, gamma, pi, perm) -> float:
        """Log-density of the factors relabelled by ``perm``.

        Component ``k`` of the state uses the variational factor ``perm[k]``.
        """
        perm = np.asarray(perm)
        out = log_dirichlet_pdf(pi, self.dirichlet_params[perm])
        out += float(np.sum(log_beta_pdf(gamma, self.alpha[perm], self.beta[perm])))
        out += float(np.sum(self.log_tau[np.arange(self.n), perm[np.asarray(z)]]))
        return out

    def component_log_densities(self, z, gamma, pi, perms: np.ndarray) -> np.ndarray:
        """``component_log_density`` for every row of ``perms`` at once."""
        z = np.asarray(z)
        g = self.g
        dp = self.dirichlet_params[perms]  # (P, g)
        out = gammaln(dp.sum(axis=1)) - gammaln(dp).sum(axis=1) + ((dp - 1.0) * np.log(pi)).sum(axis=1)
        a = self.alpha[perms]  # (P, g, q)
        b = self.beta[perms]
        lg, l1g = np.log(gamma), np.log1p(-gamma)
        out += ((a - 1.0) * lg + (b - 1.0) * l1g - betaln(a, b)).sum(axis=(1, 2))
        # L[k, c] = sum_{i: z_i = k} log tau_ic
        onehot = np.zeros((z.size, g))
        onehot[np.arange(z.size), z] = 1.0
        L = onehot.T @ self.log_tau
        out += L[np.arange(g), perms].sum(axis=1)
        return out

    def sample_component(self, rng: np.random.Generator, perm):
        perm = np.asarray(perm)
        pi = rng.dirichlet(self.dirichlet_params[perm])
        gamma = rng.beta(self.alpha[perm], self.beta[perm])
        z = categorical_rows(self.log_tau[:, perm], rng)
        return z, gamma, pi

    def log_density(self, z, gamma, pi) -> float:
        return self.component_log_density(z, gamma, pi, identity_perm(self.g))

    def sample(self, rng: np.random.Generator):
        """Draw ``(z, gamma, pi)``."""
        return self.sample_component(rng, identity_perm(self.g))

    def to_dict(self) -> dict:
        return {
            "kind": "lca_vb",
            "dirichlet_params": self.dirichlet_params.tolist(),
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "assign_probs": self.assign_probs.tolist(),
            "elbo": self.elbo,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LcaVbApprox":
        return cls(d["dirichlet_params"], d["alpha"], d["beta"], d["assign_probs"], d.get("elbo", float("nan")))


def _kl_dirichlet(post, prior) -> float:
    s = post.sum()
    return float(
        gammaln(s) - gammaln(post).sum() - gammaln(prior.sum()) + gammaln(prior).sum()
        + np.sum((post - prior) * (digamma(post) - digamma(s)))
    )


def _kl_beta(a1, b1, a0, b0) -> np.ndarray:
    s = a1 + b1
    return (betaln(a0, b0) - betaln(a1, b1)
            + (a1 - a0) * digamma(a1) + (b1 - b0) * digamma(b1) + (a0 + b0 - s) * digamma(s))


def _lca_cavi(Y, tau, hyper: LcaHyper, max_iter: int, tol: float):
    n, q = Y.shape
    g = tau.shape[1]
    prior_d = np.full(g, hyper.d)
    trace = []
    for _ in range(max_iter):
        # conjugate parameter updates given responsibilities
        nk = tau.sum(axis=0)
        sk = tau.T @ Y
        delta = hyper.d + nk
        alpha = hyper.a + sk
        beta = hyper.b + nk[:, None] - sk
        # responsibilities given parameters
        e_log_pi = digamma(delta) - digamma(delta.sum())
        e_lg = digamma(alpha) - digamma(alpha + beta)
        e_l1g = digamma(beta) - digamma(alpha + beta)
        logits = e_log_pi + Y @ e_lg.T + (1.0 - Y) @ e_l1g.T
        log_tau = logits - logsumexp(logits, axis=1, keepdims=True)
        tau = np.exp(log_tau)
        # bound at (tau, delta, alpha, beta)
        with np.errstate(invalid="ignore"):
            ent = -np.sum(np.where(tau > 0, tau * log_tau, 0.0))
        elbo = (
            np.sum(tau * logits)
            + ent
            - _kl_dirichlet(delta, prior_d)
            - float(np.sum(_kl_beta(alpha, beta, hyper.a, hyper.b)))
        )
        trace.append(float(elbo))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            break
    nk = tau.sum(axis=0)
    sk = tau.T @ Y
    # parameters consistent with the final responsibilities
    delta = hyper.d + nk
    alpha = hyper.a + sk
    beta = hyper.b + nk[:, None] - sk
    return delta, alpha, beta, tau, trace


def fit_vb_lca(Y, g: int, hyper: LcaHyper = LcaHyper(), restarts: int = 5, max_iter: int = 500,
               tol: float = 1e-6, seed: int = 0) -> LcaVbApprox:
    """Coordinate-ascent VB for LCA, best of ``restarts`` random soft starts."""
    Y = np.asarray(Y, dtype=float)
    if g < 1:
        raise ValueError("g must be at least 1")
    n = Y.shape[0]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts) if g > 1 else 1):
        tau0 = rng.dirichlet(np.ones(g), size=n) if g > 1 else np.ones((n, 1))
        fit = _lca_cavi(Y, tau0, hyper, max_iter, tol)
        if best is None or fit[4][-1] > best[4][-1]:
            best = fit
    delta, alpha, beta, tau, trace = best
    return LcaVbApprox(delta, alpha, beta, tau, elbo=trace[-1], elbo_trace=trace)
