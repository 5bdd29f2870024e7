"""Deterministic posterior approximations used as bridge starting points."""
import json

from .gaussian import (
    GaussianApprox,
    SeparationError,
    VBConvergenceError,
    fit_ml_logistic,
    fit_vb_logistic,
    perturb_approx,
    prior_gaussian,
)
from .lca import LcaHyper, LcaVbApprox, fit_vb_lca
from .sbmreg import SbmRegVbApprox, fit_vb_sbmreg
from .symmetrize import SymmetrizedApprox, symmetrize

_KINDS = {
    "gaussian": GaussianApprox,
    "lca_vb": LcaVbApprox,
    "sbmreg_vb": SbmRegVbApprox,
}


def approx_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "symmetrized":
        return SymmetrizedApprox(approx_from_dict(d["base"]))
    if kind not in _KINDS:
        raise ValueError(f"unknown approximation kind {kind!r}")
    return _KINDS[kind].from_dict(d)


def save_approx(approx, path) -> None:
    with open(path, "w") as fh:
        json.dump(approx.to_dict(), fh, indent=1)


def load_approx(path):
    with open(path) as fh:
        return approx_from_dict(json.load(fh))


__all__ = [
    "GaussianApprox", "LcaHyper", "LcaVbApprox", "SbmRegVbApprox", "SymmetrizedApprox",
    "SeparationError", "VBConvergenceError", "approx_from_dict", "fit_ml_logistic", "fit_vb_lca",
    "fit_vb_logistic", "fit_vb_sbmreg", "load_approx", "perturb_approx", "prior_gaussian",
    "save_approx", "symmetrize",
]
