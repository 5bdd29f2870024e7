"""Prior-predictive draws ``(theta*, Y*)`` for the calibration checks."""
from __future__ import annotations

import numpy as np

from ..approximations.lca import LcaHyper, categorical_rows
from ..approximations.symmetrize import identity_perm
from .lca import LcaState
from .network import EdgeData, SbmPriors, block_index, n_block_params
from .sbmreg import SbmRegState

MODEL_KINDS = ("gaussian_mean", "logistic", "lca", "sbmreg")


def _simplex(rng, conc):
    pi = np.maximum(rng.dirichlet(conc), 1e-300)
    return pi / pi.sum()


def simulate_prior_predictive(model_kind: str, design: dict, hyper, rng: np.random.Generator):
    """Draw ``theta* ~ prior`` and then ``data* ~ l(. | theta*)``.

    Parameters
    ----------
    model_kind : {"gaussian_mean", "logistic", "lca", "sbmreg"}
    design : dict
        ``gaussian_mean``: ``n``; ``logistic``: ``X``; ``lca``: ``n``, ``q``,
        ``g``; ``sbmreg``: ``n``, ``g`` and either ``X`` (one row per dyad) or
        ``p`` (covariates then drawn iid standard normal).
    hyper
        Model hyperparameters: a dict with ``noise_var``, ``prior_mean``,
        ``prior_var`` for the Gaussian mean; the prior variance (float) for
        logistic regression; :class:`LcaHyper`; :class:`SbmPriors`.
    rng : numpy Generator

    Returns
    -------
    theta_star, data_star
    """
    if model_kind == "gaussian_mean":
        h = dict(noise_var=1.0, prior_mean=0.0, prior_var=1.0)
        h.update(hyper or {})
        mu = h["prior_mean"] + np.sqrt(h["prior_var"]) * rng.standard_normal()
        x = mu + np.sqrt(h["noise_var"]) * rng.standard_normal(int(design["n"]))
        return np.array([mu]), x
    if model_kind == "logistic":
        X = np.atleast_2d(np.asarray(design["X"], dtype=float))
        prior_var = 100.0 if hyper is None else float(hyper)
        theta = np.sqrt(prior_var) * rng.standard_normal(X.shape[1])
        y = (rng.random(X.shape[0]) < 1.0 / (1.0 + np.exp(-(X @ theta)))).astype(float)
        return theta, y
    if model_kind == "lca":
        hyper = hyper or LcaHyper()
        n, q, g = int(design["n"]), int(design["q"]), int(design["g"])
        pi = _simplex(rng, np.full(g, hyper.d))
        gamma = rng.beta(hyper.a, hyper.b, size=(g, q))
        z = categorical_rows(np.tile(np.log(pi), (n, 1)), rng)
        Y = (rng.random((n, q)) < gamma[z]).astype(float)
        return LcaState(z, gamma, pi, identity_perm(g)), Y
    if model_kind == "sbmreg":
        priors = hyper or SbmPriors()
        n, g = int(design["n"]), int(design["g"])
        D = n * (n - 1) // 2
        if design.get("X") is not None:
            X = np.asarray(design["X"], dtype=float).reshape(D, -1)
        else:
            X = rng.standard_normal((D, int(design.get("p", 0))))
        pi = _simplex(rng, np.full(g, priors.d))
        a = priors.alpha_mean + np.sqrt(priors.alpha_var) * rng.standard_normal(n_block_params(g))
        alpha = a[block_index(g)]
        beta = np.sqrt(priors.beta_var) * rng.standard_normal(X.shape[1])
        z = categorical_rows(np.tile(np.log(pi), (n, 1)), rng)
        r, c = np.triu_indices(n, k=1)
        eta = X @ beta + alpha[z[r], z[c]]
        y = (rng.random(D) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        return SbmRegState(z, alpha, beta, pi, identity_perm(g)), EdgeData(n, y, X)
    raise ValueError(f"unknown model kind {model_kind!r}; expected one of {MODEL_KINDS}")
