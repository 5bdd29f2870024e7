"""Stochastic block model with dyad covariates on the bridge.

For ``i < j``, ``logit P(Y_ij = 1) = x_ij' beta + alpha[z_i, z_j]`` with
``z_i ~ Cat(pi)``, ``pi ~ Dir(d)``, independent Gaussian priors on the packed
upper triangle of ``alpha`` and on ``beta``.

The move kernel is one hybrid sweep on ``p_rho``:

* ``sigma`` (symmetrized reference only): exact draw over all relabellings;
* ``z_i``: exact categorical draw, both factors being pointwise evaluable;
* ``pi``: interpolated Dirichlet, as in the latent class model;
* ``alpha``, ``beta`` and then ``(alpha, beta)`` jointly: random-walk
  Metropolis with a three-scale mixture of Gaussian steps shaped by the
  (relabelled) variational covariance.

The reference factor for ``(alpha, beta)`` is a joint Gaussian, so its
``1 - rho`` power is just a Gaussian term in the acceptance ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from ..approximations.lca import categorical_rows
from ..approximations.sbmreg import SbmRegVbApprox
from ..approximations.symmetrize import SymmetrizedApprox, identity_perm
from ..engine import BridgeTarget, NonFiniteDensityError
from .network import EdgeData, SbmPriors, block_index, n_block_params, pack_alpha

MH_SCALES = (1.0, 0.1, 10.0)
_PRIOR_REF, _PLAIN_REF, _SYM_REF = 0, 1, 2
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SbmRegState:
    z: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    pi: np.ndarray
    sigma: np.ndarray

    def permuted(self, perm) -> "SbmRegState":
        """Relabel: new block ``k`` is old block ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return SbmRegState(inv[self.z], self.alpha[np.ix_(perm, perm)], self.beta, self.pi[perm], self.sigma[perm])


# ---------------------------------------------------------------------------
# densities


@numba.njit(cache=True)
def _softplus(x):
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@numba.njit(cache=True)
def _loglik(y, xb, alpha, z, rows, cols):
    out = 0.0
    for d in range(y.size):
        eta = xb[d] + alpha[z[rows[d]], z[cols[d]]]
        out += y[d] * eta - _softplus(eta)
    return out


def log_lik_sbmreg(state: SbmRegState, data: EdgeData) -> float:
    xb = data.X @ np.asarray(state.beta, dtype=float)
    return float(_loglik(data.y, xb, np.asarray(state.alpha, dtype=float), np.asarray(state.z, dtype=np.intp),
                         data.rows, data.cols))


def log_prior_sbmreg(state: SbmRegState, priors: SbmPriors) -> float:
    g = state.pi.size
    a = pack_alpha(state.alpha)
    b = np.asarray(state.beta, dtype=float)
    lp = -0.5 * (a.size * (_LOG_2PI + math.log(priors.alpha_var)) + np.sum((a - priors.alpha_mean) ** 2) / priors.alpha_var)
    lp += -0.5 * (b.size * (_LOG_2PI + math.log(priors.beta_var)) + b @ b / priors.beta_var)
    lp += math.lgamma(g * priors.d) - g * math.lgamma(priors.d) + (priors.d - 1.0) * np.sum(np.log(state.pi))
    lp += np.sum(np.log(state.pi)[state.z])
    return float(lp)


def log_joint_sbmreg(state: SbmRegState, data: EdgeData, priors: SbmPriors) -> float:
    """``log p(Y, z, alpha, beta, pi)``."""
    return log_lik_sbmreg(state, data) + log_prior_sbmreg(state, priors)


# ---------------------------------------------------------------------------
# kernel


@numba.njit(cache=True)
def _log_q_all(z, a_state, beta, pi, perms, slots, log_tau, delta, m, prec, q_const):
    """Log-density of every relabelled reference component at the state."""
    P, g = perms.shape
    na = a_state.size
    dim = m.size
    out = np.empty(P)
    lpi = np.log(pi)
    w = np.empty(dim)
    for s in range(P):
        for i in range(na):
            w[slots[s, i]] = a_state[i]
        for j in range(dim - na):
            w[na + j] = beta[j]
        quad = 0.0
        for r in range(dim):
            dr = w[r] - m[r]
            acc = 0.0
            for c in range(dim):
                acc += prec[r, c] * (w[c] - m[c])
            quad += dr * acc
        v = q_const - 0.5 * quad
        for k in range(g):
            v += (delta[perms[s, k]] - 1.0) * lpi[k]
        for i in range(z.size):
            v += log_tau[i, perms[s, z[i]]]
        out[s] = v
    return out


@numba.njit(cache=True)
def _log_prior_ab(a_state, beta, amean, avar, bvar):
    v = 0.0
    for i in range(a_state.size):
        v -= 0.5 * (a_state[i] - amean) ** 2 / avar
    for j in range(beta.size):
        v -= 0.5 * beta[j] ** 2 / bvar
    return v


@numba.njit(cache=True)
def _gauss_ref(a_state, beta, slots_s, m, prec):
    na = a_state.size
    dim = m.size
    w = np.empty(dim)
    for i in range(na):
        w[slots_s[i]] = a_state[i]
    for j in range(dim - na):
        w[na + j] = beta[j]
    quad = 0.0
    for r in range(dim):
        acc = 0.0
        for c in range(dim):
            acc += prec[r, c] * (w[c] - m[c])
        quad += (w[r] - m[r]) * acc
    return -0.5 * quad


@numba.njit(cache=True)
def _draw_index(logits, u):
    top = logits.max()
    total = 0.0
    cdf = np.empty(logits.size)
    for k in range(logits.size):
        total += math.exp(logits[k] - top)
        cdf[k] = total
    target = u * total
    for k in range(logits.size):
        if target < cdf[k]:
            return k
    return logits.size - 1


@numba.njit(cache=True)
def _unpack(a_state, tri_r, tri_c, g):
    alpha = np.empty((g, g))
    for i in range(a_state.size):
        alpha[tri_r[i], tri_c[i]] = a_state[i]
        alpha[tri_c[i], tri_r[i]] = a_state[i]
    return alpha


@numba.njit(cache=True)
def _sweeps(z, a_state, beta, pi, sigma_idx, rho, n_sweeps,
            y, X, rows, cols, dyad, tri_r, tri_c,
            perms, slots, log_tau, delta, m, prec, q_const,
            chol_a, chol_b, chol_w, scales, amean, avar, bvar, dprior, mode, rng):
    n = z.size
    g = pi.size
    na = a_state.size
    p = beta.size
    P = perms.shape[0]
    z = z.copy()
    a_state = a_state.copy()
    beta = beta.copy()
    pi = pi.copy()
    s_idx = sigma_idx
    xb = X @ beta
    zl = np.empty(g)

    for _ in range(n_sweeps):
        lpi = np.log(pi)
        # relabelling
        if mode == _SYM_REF and P > 1:
            if rho < 1.0:
                lq = _log_q_all(z, a_state, beta, pi, perms, slots, log_tau, delta, m, prec, q_const)
                s_idx = _draw_index((1.0 - rho) * lq, rng.random())
            else:
                s_idx = int(rng.random() * P)
                if s_idx >= P:
                    s_idx = P - 1
        sig = perms[s_idx]
        alpha = _unpack(a_state, tri_r, tri_c, g)

        # memberships, one node at a time
        for i in range(n):
            for k in range(g):
                ll = 0.0
                for j in range(n):
                    if j == i:
                        continue
                    d = dyad[i, j]
                    eta = xb[d] + alpha[k, z[j]]
                    ll += y[d] * eta - _softplus(eta)
                if mode == _PRIOR_REF:
                    zl[k] = lpi[k] + rho * ll
                else:
                    zl[k] = (1.0 - rho) * log_tau[i, sig[k]] + rho * (lpi[k] + ll)
            z[i] = _draw_index(zl, rng.random())

        # proportions
        total = 0.0
        nk = np.zeros(g)
        for i in range(n):
            nk[z[i]] += 1.0
        for k in range(g):
            if mode == _PRIOR_REF:
                conc = dprior + nk[k]
            else:
                conc = (1.0 - rho) * delta[sig[k]] + rho * (dprior + nk[k])
            pi[k] = max(rng.standard_gamma(conc), 1e-300)
            total += pi[k]
        pi /= total

        # block effects and coefficients
        ll_cur = _loglik(y, xb, alpha, z, rows, cols)
        for block in range(3):
            c = scales[int(rng.random() * scales.size) % scales.size]
            a_new = a_state.copy()
            b_new = beta.copy()
            if block == 0:
                e = np.empty(na)
                for r in range(na):
                    e[r] = rng.standard_normal()
                a_new += c * (chol_a[s_idx] @ e)
            elif block == 1:
                if p == 0:
                    continue
                e = np.empty(p)
                for r in range(p):
                    e[r] = rng.standard_normal()
                b_new += c * (chol_b @ e)
            else:
                e = np.empty(na + p)
                for r in range(na + p):
                    e[r] = rng.standard_normal()
                step = c * (chol_w[s_idx] @ e)
                a_new += step[:na]
                b_new += step[na:]
            xb_new = X @ b_new if block != 0 else xb
            alpha_new = _unpack(a_new, tri_r, tri_c, g)
            ll_new = _loglik(y, xb_new, alpha_new, z, rows, cols)
            dprior_ab = _log_prior_ab(a_new, b_new, amean, avar, bvar) - _log_prior_ab(a_state, beta, amean, avar, bvar)
            if mode == _PRIOR_REF:
                log_ratio = dprior_ab + rho * (ll_new - ll_cur)
            else:
                dref = _gauss_ref(a_new, b_new, slots[s_idx], m, prec) - _gauss_ref(a_state, beta, slots[s_idx], m, prec)
                log_ratio = (1.0 - rho) * dref + rho * (dprior_ab + ll_new - ll_cur)
            if math.log(rng.random()) < log_ratio:
                a_state = a_new
                beta = b_new
                xb = xb_new
                alpha = alpha_new
                ll_cur = ll_new
    ll_final = _loglik(y, xb, _unpack(a_state, tri_r, tri_c, g), z, rows, cols)
    return z, a_state, beta, pi, s_idx, ll_final


# ---------------------------------------------------------------------------
# target


class SbmRegTarget(BridgeTarget):
    """Block model with covariates, bridged from its VB fit (optionally symmetrized) or the prior.

    Parameters
    ----------
    data : EdgeData
    g : int
    priors : SbmPriors
    approx : SbmRegVbApprox, SymmetrizedApprox over one, or None
        ``None`` gives the classical bridge from the prior.  The MH step
        shapes then come from ``proposal`` (a fitted approximation) when
        given, or from the prior variances.
    """

    def __init__(self, data: EdgeData, g: int, priors: SbmPriors | None = None, approx=None,
                 proposal: SbmRegVbApprox | None = None, scales=MH_SCALES):
        self.data = data
        self.g = int(g)
        self.priors = priors or SbmPriors()
        self.approx = approx
        self.symmetrized = isinstance(approx, SymmetrizedApprox)
        base = approx.base if self.symmetrized else approx
        if base is not None and (base.g != self.g or base.p != data.p):
            raise ValueError("approximation does not match the model dimensions")
        self.base = base
        g, p = self.g, data.p
        self.na = n_block_params(g)
        self.log_nperm = math.lgamma(g + 1) if self.symmetrized else 0.0
        self.mode = _PRIOR_REF if base is None else (_SYM_REF if self.symmetrized else _PLAIN_REF)
        self.perms = approx.perms if self.symmetrized else identity_perm(g)[None, :]
        self.tri_r, self.tri_c = (a.astype(np.intp) for a in np.triu_indices(g))
        self.dyad = data.dyad_index()
        self.scales = np.sqrt(np.asarray(scales, dtype=float))

        shape_src = base if base is not None else proposal
        if shape_src is not None:
            self.slots = np.array([shape_src.alpha_slots(pm) for pm in self.perms], dtype=np.intp)
            cov = shape_src.w_gauss.covariance
        else:
            self.slots = np.arange(self.na, dtype=np.intp)[None, :].repeat(len(self.perms), axis=0)
            cov = np.diag(np.r_[np.full(self.na, self.priors.alpha_var), np.full(p, self.priors.beta_var)])
        chol_w, chol_a = [], []
        for s in range(len(self.perms)):
            v = np.r_[self.slots[s], np.arange(self.na, self.na + p)]
            cs = cov[np.ix_(v, v)]
            chol_w.append(np.linalg.cholesky(cs))
            chol_a.append(np.linalg.cholesky(cs[: self.na, : self.na]))
        self.chol_w = np.ascontiguousarray(chol_w)
        self.chol_a = np.ascontiguousarray(chol_a)
        self.chol_b = np.linalg.cholesky(cov[self.na:, self.na:]) if p else np.zeros((0, 0))

        if base is not None:
            gw = base.w_gauss
            self.m = np.ascontiguousarray(gw.mean)
            self.prec = np.linalg.inv(gw.covariance)
            self.prec = 0.5 * (self.prec + self.prec.T)
            self.log_tau = base.log_tau
            self.delta = base.pi_dirichlet
            # normalizing terms of the Gaussian and Dirichlet factors
            self.q_const = float(-0.5 * (gw.dim * _LOG_2PI + gw.logdet)
                                 + math.lgamma(self.delta.sum()) - np.sum([math.lgamma(x) for x in self.delta]))
        else:
            self.m = np.zeros(self.na + p)
            self.prec = np.eye(self.na + p)
            self.log_tau = np.zeros((data.n, g))
            self.delta = np.ones(g)
            self.q_const = 0.0
        self.param_names = (
            [f"beta_{j + 1}" for j in range(p)]
            + [f"alpha_{r + 1}_{c + 1}" for r, c in zip(self.tri_r, self.tri_c)]
            + [f"pi_{k + 1}" for k in range(g)]
        )

    # densities -----------------------------------------------------------

    def log_prior(self, state) -> float:
        return log_prior_sbmreg(state, self.priors) - self.log_nperm

    def log_lik(self, state) -> float:
        return log_lik_sbmreg(state, self.data)

    def _log_q(self, state) -> np.ndarray:
        return _log_q_all(np.asarray(state.z, dtype=np.intp), pack_alpha(state.alpha), np.asarray(state.beta, float),
                          state.pi, self.perms, self.slots, self.log_tau, self.delta, self.m, self.prec, self.q_const)

    def log_approx(self, state) -> float:
        if self.base is None:
            return log_prior_sbmreg(state, self.priors)
        if self.symmetrized:
            s = self.approx.perm_index(state.sigma)
            return float(self._log_q(state)[s]) - self.log_nperm
        return float(self._log_q(state)[0])

    def _alpha_from_parts(self, state, ll, index):
        lp = log_prior_sbmreg(state, self.priors)
        if self.base is None:
            return ll
        lq = self._log_q(state)
        if not (np.isfinite(ll) and np.isfinite(lp) and np.all(np.isfinite(lq))):
            raise NonFiniteDensityError(index, "block model densities")
        la = ll + lp - lq
        return la if self.symmetrized else float(la[0])

    def log_alpha(self, state, index: int = -1):
        return self._alpha_from_parts(state, self.log_lik(state), index)

    # sampling ------------------------------------------------------------

    def sample_approx(self, rng):
        g = self.g
        if self.base is None:
            pr = self.priors
            pi = rng.dirichlet(np.full(g, pr.d))
            pi = np.maximum(pi, 1e-300)
            pi /= pi.sum()
            a = pr.alpha_mean + math.sqrt(pr.alpha_var) * rng.standard_normal(self.na)
            beta = math.sqrt(pr.beta_var) * rng.standard_normal(self.data.p)
            z = categorical_rows(np.tile(np.log(pi), (self.data.n, 1)), rng)
            return SbmRegState(z, a[block_index(g)], beta, pi, identity_perm(g))
        if self.symmetrized:
            (z, alpha, beta, pi), perm = self.approx.sample_with_perm(rng)
            sigma = perm.copy()
        else:
            z, alpha, beta, pi = self.base.sample(rng)
            sigma = identity_perm(g)
        pi = np.maximum(pi, 1e-300)
        return SbmRegState(z.astype(np.intp), alpha, beta, pi / pi.sum(), sigma)

    def _run(self, state, rho, rng, sweeps):
        s_idx = self.approx.perm_index(state.sigma) if self.symmetrized else 0
        d = self.data
        z, a, beta, pi, s_idx, ll = _sweeps(
            np.asarray(state.z, dtype=np.intp), pack_alpha(state.alpha), np.asarray(state.beta, float),
            np.asarray(state.pi, float), s_idx, float(rho), int(sweeps),
            d.y, d.X, d.rows, d.cols, self.dyad, self.tri_r, self.tri_c,
            self.perms, self.slots, self.log_tau, self.delta, self.m, self.prec, self.q_const,
            self.chol_a, self.chol_b, self.chol_w, self.scales,
            self.priors.alpha_mean, self.priors.alpha_var, self.priors.beta_var, self.priors.d, self.mode, rng,
        )
        new = SbmRegState(z, a[block_index(self.g)], beta, pi, self.perms[s_idx].copy())
        return new, ll

    def move(self, state, rho, rng):
        return mcmc_kernel_sbmreg(state, rho, self, rng)

    def propagate(self, state, rho, rng, sweeps, index=-1):
        new, ll = self._run(state, rho, rng, sweeps)
        return new, self._alpha_from_parts(new, ll, index)

    def flatten(self, state) -> np.ndarray:
        return np.concatenate([state.beta, pack_alpha(state.alpha), state.pi])


def mcmc_kernel_sbmreg(state: SbmRegState, rho: float, target: SbmRegTarget, rng: np.random.Generator) -> SbmRegState:
    """One hybrid Gibbs/Metropolis sweep leaving ``p_rho`` of ``target`` invariant."""
    return target._run(state, rho, rng, 1)[0]
