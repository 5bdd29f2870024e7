"""Latent class analysis on the bridge, with an explicit relabelling variable.

The model for ``n`` individuals and ``q`` binary items is

    Z_i ~ Cat(pi),   Y_ij | Z_i = k ~ Bern(gamma_kj),
    pi ~ Dir(d, ..., d),   gamma_kj ~ Beta(a, b).

With a symmetrized reference ``(1/g!) sum_sigma q_sigma(Z, gamma, pi)`` the
state is augmented with ``sigma`` and the bridge runs on the joint

    p_rho(Z, gamma, pi, sigma) ∝ [q_sigma / g!]^(1 - rho) [l pi / g!]^rho,

whose ``sigma`` marginal at ``rho = 1`` is uniform and whose other marginal is
the posterior.  Particle weights follow the ``sigma``-marginal of this path:
``log_alpha`` is returned for every relabelling and the engine averages the
weight increments over the conditional law of ``sigma``.  Weighting by the
carried ``sigma`` alone would be valid too, but it misses the mass that the
other relabellings only acquire very close to ``rho = 1`` and so
underestimates the evidence by up to ``log g!``.  Every factor of ``q_sigma`` and of the model is conjugate in
one block, and the exponents add, so a Gibbs sweep stays exact:

    sigma      | .  ∝ q_sigma(Z, gamma, pi)^(1 - rho)
    Z_i = k    | .  ∝ tau[i, sigma_k]^(1 - rho) [pi_k prod_j Bern(y_ij; gamma_kj)]^rho
    gamma_kj   | .  ~ Beta((1 - rho) at[sigma_k, j] + rho (a + s_kj),
                           (1 - rho) bt[sigma_k, j] + rho (b + n_k - s_kj))
    pi         | .  ~ Dir((1 - rho) dt[sigma] + rho (d + n))

with ``n_k`` the class counts and ``s_kj`` the class-wise item totals.  When
the reference is the prior itself the ``(1 - rho)`` and ``rho`` prior factors
merge and only the likelihood is tempered.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import betaln

from ..approximations.lca import LcaHyper, LcaVbApprox, categorical_rows, log_dirichlet_pdf
from ..approximations.symmetrize import SymmetrizedApprox, identity_perm
from ..engine import BridgeTarget, NonFiniteDensityError

GAMMA_CLIP = 1e-15


@dataclass(frozen=True)
class LcaState:
    z: np.ndarray
    gamma: np.ndarray
    pi: np.ndarray
    sigma: np.ndarray

    def permuted(self, perm) -> "LcaState":
        """Relabel: new class ``k`` is old class ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return LcaState(inv[self.z], self.gamma[perm], self.pi[perm], self.sigma[perm])


def _counts(z, Y, g):
    onehot = np.zeros((z.size, g))
    onehot[np.arange(z.size), z] = 1.0
    return onehot.sum(axis=0), onehot.T @ Y


def log_lik_lca(state: LcaState, Y) -> float:
    lg = np.log(state.gamma)
    l1g = np.log1p(-state.gamma)
    per_class = Y @ lg.T + (1.0 - Y) @ l1g.T  # (n, g)
    return float(per_class[np.arange(Y.shape[0]), state.z].sum())


def log_prior_lca(state: LcaState, hyper: LcaHyper) -> float:
    g = state.pi.size
    lp = float(np.sum(np.log(state.pi)[state.z]))
    lp += log_dirichlet_pdf(state.pi, np.full(g, hyper.d))
    lp += float(np.sum((hyper.a - 1.0) * np.log(state.gamma) + (hyper.b - 1.0) * np.log1p(-state.gamma)
                       - betaln(hyper.a, hyper.b)))
    return lp


def log_joint_lca(state: LcaState, Y, hyper: LcaHyper) -> float:
    """``log p(Y, Z, gamma, pi)`` for the mixture of product-Bernoulli classes."""
    Y = np.asarray(Y, dtype=float)
    return log_lik_lca(state, Y) + log_prior_lca(state, hyper)


def _finish(z, gamma, pi, sigma) -> LcaState:
    gamma = np.clip(gamma, GAMMA_CLIP, 1.0 - GAMMA_CLIP)
    pi = np.maximum(pi, 1e-300)
    return LcaState(z, gamma, pi / pi.sum(), sigma)


_PRIOR_REF, _PLAIN_REF, _SYM_REF = 0, 1, 2


@numba.njit(cache=True)
def _draw_index(logits, u):
    top = logits.max()
    total = 0.0
    cdf = np.empty(logits.size)
    for k in range(logits.size):
        total += np.exp(logits[k] - top)
        cdf[k] = total
    target = u * total
    for k in range(logits.size):
        if target < cdf[k]:
            return k
    return logits.size - 1


@numba.njit(cache=True)
def _sweep(z, gamma, pi, sigma, rho, Y, log_tau, at, bt, dt, perms, a, b, d, mode, rng):
    n, q = Y.shape
    g = pi.size
    z = z.copy()
    sigma = sigma.copy()
    lg = np.log(gamma)
    l1g = np.log1p(-gamma)
    lpi = np.log(pi)

    # sigma | Z, gamma, pi; perm-invariant normalizing terms dropped
    if mode == _SYM_REF and g > 1:
        P = perms.shape[0]
        logits = np.zeros(P)
        if rho < 1.0:
            for s in range(P):
                v = 0.0
                for k in range(g):
                    c = perms[s, k]
                    v += (dt[c] - 1.0) * lpi[k]
                    for j in range(q):
                        v += (at[c, j] - 1.0) * lg[k, j] + (bt[c, j] - 1.0) * l1g[k, j]
                for i in range(n):
                    v += log_tau[i, perms[s, z[i]]]
                logits[s] = (1.0 - rho) * v
        s = _draw_index(logits, rng.random())
        for k in range(g):
            sigma[k] = perms[s, k]

    # Z | sigma, gamma, pi
    zl = np.empty(g)
    for i in range(n):
        for k in range(g):
            ll = lpi[k]
            for j in range(q):
                ll += Y[i, j] * lg[k, j] + (1.0 - Y[i, j]) * l1g[k, j]
            if mode == _PRIOR_REF:
                zl[k] = lpi[k] + rho * (ll - lpi[k])
            else:
                zl[k] = (1.0 - rho) * log_tau[i, sigma[k]] + rho * ll
        z[i] = _draw_index(zl, rng.random())

    nk = np.zeros(g)
    sk = np.zeros((g, q))
    for i in range(n):
        nk[z[i]] += 1.0
        for j in range(q):
            sk[z[i], j] += Y[i, j]

    # gamma, pi | Z, sigma
    new_gamma = np.empty((g, q))
    new_pi = np.empty(g)
    total = 0.0
    for k in range(g):
        c = sigma[k]
        for j in range(q):
            if mode == _PRIOR_REF:
                ga = a + rho * sk[k, j]
                gb = b + rho * (nk[k] - sk[k, j])
            else:
                ga = (1.0 - rho) * at[c, j] + rho * (a + sk[k, j])
                gb = (1.0 - rho) * bt[c, j] + rho * (b + nk[k] - sk[k, j])
            x = rng.beta(ga, gb)
            new_gamma[k, j] = min(max(x, GAMMA_CLIP), 1.0 - GAMMA_CLIP)
        if mode == _PRIOR_REF:
            pd = d + nk[k]
        else:
            pd = (1.0 - rho) * dt[c] + rho * (d + nk[k])
        new_pi[k] = max(rng.standard_gamma(pd), 1e-300)
        total += new_pi[k]
    new_pi /= total
    return z, new_gamma, new_pi, sigma


def gibbs_kernel_lca(state: LcaState, rho: float, vb, Y, hyper: LcaHyper, rng: np.random.Generator) -> LcaState:
    """One sweep ``sigma -> Z -> gamma -> pi`` on the tempered target.

    ``vb`` is a :class:`SymmetrizedApprox`, a plain :class:`LcaVbApprox`
    (``sigma`` stays at the identity) or ``None`` for the prior reference.
    """
    g = state.pi.size
    if vb is None:
        mode, base = _PRIOR_REF, None
    elif isinstance(vb, SymmetrizedApprox):
        mode, base = _SYM_REF, vb.base
    else:
        mode, base = _PLAIN_REF, vb
    if base is None:
        log_tau = np.zeros((Y.shape[0], g))
        at = bt = np.ones((g, Y.shape[1]))
        dt = np.ones(g)
        perms = np.zeros((1, g), dtype=np.intp)
    else:
        log_tau, at, bt, dt = base.log_tau, base.alpha, base.beta, base.dirichlet_params
        perms = vb.perms if mode == _SYM_REF else np.zeros((1, g), dtype=np.intp)
    z, gamma, pi, sigma = _sweep(
        state.z.astype(np.intp), state.gamma, state.pi, state.sigma.astype(np.intp), float(rho),
        np.asarray(Y, dtype=float), log_tau, at, bt, dt, perms, hyper.a, hyper.b, hyper.d, mode, rng,
    )
    return LcaState(z, gamma, pi, sigma)


class LcaTarget(BridgeTarget):
    """LCA posterior bridged from a VB fit, its symmetrized version, or the prior.

    Parameters
    ----------
    Y : (n, q) binary array
    g : int
    hyper : LcaHyper
    approx : LcaVbApprox, SymmetrizedApprox or None
        ``None`` gives the classical bridge from the prior.
    """

    def __init__(self, Y, g: int, hyper: LcaHyper = LcaHyper(), approx=None):
        self.Y = np.asarray(Y, dtype=float)
        self.g = int(g)
        self.hyper = hyper
        self.approx = approx
        self.symmetrized = isinstance(approx, SymmetrizedApprox)
        self.log_nperm = math.lgamma(self.g + 1) if self.symmetrized else 0.0
        if approx is not None and approx.g != self.g:
            raise ValueError("approximation has a different number of classes")
        q = self.Y.shape[1]
        self.param_names = [f"pi_{k + 1}" for k in range(self.g)] + [
            f"gamma_{k + 1}_{j + 1}" for k in range(self.g) for j in range(q)
        ]
        self._ident = identity_perm(self.g)

    def log_prior(self, state) -> float:
        return log_prior_lca(state, self.hyper) - self.log_nperm

    def log_lik(self, state) -> float:
        return log_lik_lca(state, self.Y)

    def log_approx(self, state) -> float:
        if self.approx is None:
            return log_prior_lca(state, self.hyper)
        if self.symmetrized:
            return self.approx.base.component_log_density(state.z, state.gamma, state.pi, state.sigma) - self.log_nperm
        return self.approx.log_density(state.z, state.gamma, state.pi)

    def log_alpha(self, state, index: int = -1):
        if not self.symmetrized:
            return super().log_alpha(state, index)
        # one value per relabelling; the 1/g! factors cancel
        joint = log_lik_lca(state, self.Y) + log_prior_lca(state, self.hyper)
        comp = self.approx.component_log_densities(state.z, state.gamma, state.pi)
        if not np.all(np.isfinite(comp)) or not np.isfinite(joint):
            raise NonFiniteDensityError(index, "symmetrized LCA densities")
        return joint - comp

    def sample_approx(self, rng):
        if self.approx is None:
            pi = rng.dirichlet(np.full(self.g, self.hyper.d))
            gamma = rng.beta(self.hyper.a, self.hyper.b, size=(self.g, self.Y.shape[1]))
            z = categorical_rows(np.tile(np.log(np.maximum(pi, 1e-300)), (self.Y.shape[0], 1)), rng)
            return _finish(z, gamma, pi, self._ident)
        if self.symmetrized:
            (z, gamma, pi), perm = self.approx.sample_with_perm(rng)
            return _finish(z, gamma, pi, perm.copy())
        z, gamma, pi = self.approx.sample(rng)
        return _finish(z, gamma, pi, self._ident)

    def move(self, state, rho, rng):
        return gibbs_kernel_lca(state, rho, self.approx, self.Y, self.hyper, rng)

    def flatten(self, state) -> np.ndarray:
        return np.concatenate([state.pi, state.gamma.ravel()])
