"""Command-line entry point: fit approximations, run bridges, select models, calibrate.

Exit codes: 0 success, 1 fitter failure, 2 input/config error, 3 sampler
degeneracy, 4 calibration failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .approximations import (
    GaussianApprox,
    SeparationError,
    SymmetrizedApprox,
    fit_ml_logistic,
    fit_vb_lca,
    fit_vb_logistic,
    fit_vb_sbmreg,
    load_approx,
    perturb_approx,
    save_approx,
    symmetrize,
)
from .approximations.lca import LcaHyper
from .calibration import (
    METHODS,
    BmaSummary,
    CalibrationError,
    replicate_seeds,
    run_bma_coverage,
    run_checking_procedure,
)
from .engine import DegenerateCloudError, NonFiniteDensityError, SamplerConfig, run_sbs
from .io import DataIOError, load_binary_matrix, load_dyads, load_logistic_csv, read_json, write_json, write_sample_csv
from .models.lca import LcaTarget
from .models.logistic import LogisticTarget
from .models.network import SbmPriors
from .models.sbmreg import SbmRegTarget

logger = logging.getLogger("shortbridge")

EXIT_OK, EXIT_FIT, EXIT_IO, EXIT_DEGENERATE, EXIT_CALIBRATION = 0, 1, 2, 3, 4
MODEL_KINDS = ("logistic", "lca", "sbmreg")
G_MAX = 6
LOW_INIT_ESS_FRACTION = 0.1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Resolved settings of one command; echoed into every report."""

    model_kind: str = "logistic"
    data_path: str | None = None
    approx: dict = field(default_factory=lambda: {"kind": "vb", "variant": None, "c": 1.0, "shift": 0.0,
                                                  "symmetrize": True, "path": None})
    sampler: dict = field(default_factory=dict)
    g: int = 2
    g_range: list = field(default_factory=lambda: [1, 2, 3])
    seed: int = 0
    output_dir: str = "."
    prior_var: float = 100.0
    calibration: dict = field(default_factory=lambda: {"study": "checking", "method": "SBS-from-VB.Sym",
                                                       "phis": None, "S": 30, "design": {}})

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        for key, value in d.items():
            if isinstance(getattr(base, key), dict):
                getattr(base, key).update(value or {})
            else:
                setattr(base, key, value)
        return base

    def validate(self, needs_data: bool = True) -> None:
        if self.model_kind not in MODEL_KINDS + ("gaussian_mean",):
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}")
        if needs_data:
            if not self.data_path:
                raise ConfigError("no data file given")
            if not os.path.isfile(self.data_path):
                raise DataIOError(f"data file not found: {self.data_path}")
        if not 1 <= int(self.g) <= G_MAX:
            raise ConfigError(f"g must lie in 1..{G_MAX}")
        if not self.g_range or any(not 1 <= int(g) <= G_MAX for g in self.g_range):
            raise ConfigError(f"g_range must lie within 1..{G_MAX}")
        self.sampler_config()

    def sampler_config(self) -> SamplerConfig:
        try:
            return SamplerConfig(**{"master_seed": int(self.seed), **self.sampler})
        except TypeError as exc:
            raise ConfigError(f"bad sampler settings: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = self.sampler_config().to_dict()
        return d


# ---------------------------------------------------------------------------
# model plumbing


def _load_data(cfg: ExperimentConfig):
    if cfg.model_kind == "logistic":
        return load_logistic_csv(cfg.data_path)
    if cfg.model_kind == "lca":
        return load_binary_matrix(cfg.data_path)
    if cfg.model_kind == "sbmreg":
        return load_dyads(cfg.data_path)
    raise ConfigError(f"no data loader for {cfg.model_kind!r}")


def _fit(cfg: ExperimentConfig, data, g: int, seed: int):
    a = cfg.approx
    if cfg.model_kind == "logistic":
        X, y, _ = data
        if a.get("kind", "vb") == "ml":
            approx = fit_ml_logistic(X, y)
        elif a.get("kind", "vb") == "vb":
            approx = fit_vb_logistic(X, y, cfg.prior_var)
        else:
            raise ConfigError(f"unknown approximation kind {a.get('kind')!r}")
        if a.get("variant"):
            approx = perturb_approx(approx, a["variant"], float(a.get("c", 1.0)), float(a.get("shift", 0.0)))
        return approx
    if cfg.model_kind == "lca":
        vb = fit_vb_lca(data, g, LcaHyper(), seed=seed)
    else:
        vb = fit_vb_sbmreg(data, g, SbmPriors(), seed=seed)
    return symmetrize(vb) if a.get("symmetrize", True) and g > 1 else vb


def _ml_covariance(X, y, fallback):
    try:
        return fit_ml_logistic(X, y).covariance
    except SeparationError:
        logger.warning("ML fit failed; MH steps use the VB covariance")
        return fit_vb_logistic(X, y, fallback).covariance


def _build_target(cfg: ExperimentConfig, data, g: int, approx, variant: str):
    """Target whose reference is ``approx`` (SBS) or the prior (CBS, CBS_IS)."""
    ref = approx if variant == "SBS" else None
    if cfg.model_kind == "logistic":
        X, y, names = data
        return LogisticTarget(X, y, cfg.prior_var, approx=ref, proposal_cov=_ml_covariance(X, y, cfg.prior_var),
                              names=names)
    if cfg.model_kind == "lca":
        return LcaTarget(data, g, LcaHyper(), ref)
    base = approx.base if isinstance(approx, SymmetrizedApprox) else approx
    return SbmRegTarget(data, g, SbmPriors(), ref, proposal=base)


def _approx_for(cfg, data, g, seed):
    path = cfg.approx.get("path")
    if path:
        if not os.path.isfile(path):
            raise DataIOError(f"approximation file not found: {path}")
        return load_approx(path)
    return _fit(cfg, data, g, seed)


def _out(cfg, name) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return os.path.join(cfg.output_dir, name)


def _summary(values, weights, names):
    mean = weights @ values
    sd = np.sqrt(np.maximum(weights @ (values - mean) ** 2, 0.0))
    return {n: {"mean": float(m), "sd": float(s)} for n, m, s in zip(names, mean, sd)}


# ---------------------------------------------------------------------------
# commands


def cmd_fit_approx(cfg: ExperimentConfig, threads: int = 1) -> int:
    cfg.validate()
    data = _load_data(cfg)
    approx = _fit(cfg, data, int(cfg.g), int(cfg.seed))
    path = _out(cfg, "approx.json")
    save_approx(approx, path)
    logger.info("wrote %s", path)
    return EXIT_OK


def cmd_sample(cfg: ExperimentConfig, threads: int = 1) -> int:
    cfg.validate()
    sc = cfg.sampler_config()
    data = _load_data(cfg)
    g = int(cfg.g)
    variant = sc.path_variant
    approx = None
    if variant != "CBS" or cfg.model_kind == "sbmreg":
        approx = _approx_for(cfg, data, g, int(cfg.seed))
    init_proposal = None
    if variant == "CBS_IS":
        if not isinstance(approx, GaussianApprox):
            raise ConfigError("CBS_IS needs a Gaussian approximation (logistic model)")
        init_proposal = approx
    target = _build_target(cfg, data, g, approx, variant)
    report = {"version": __version__, "config": cfg.to_dict(), "warnings": []}
    t0 = time.perf_counter()
    try:
        out = run_sbs(target, sc, init_proposal=init_proposal, threads=threads)
    except (DegenerateCloudError, NonFiniteDensityError) as exc:
        trace = getattr(exc, "trace", None)
        report["error"] = str(exc)
        report["trace"] = trace.to_dict() if trace is not None else None
        write_json(_out(cfg, "report.json"), report)
        raise
    cloud = out.final_cloud
    values = np.array([target.flatten(p) for p in cloud.particles])
    names = list(target.param_names)
    write_sample_csv(_out(cfg, "sample.csv"), names, values, cloud.norm_weights)
    init_ess = out.trace.init_ess
    if variant == "CBS_IS" and init_ess < LOW_INIT_ESS_FRACTION * sc.M:
        msg = (f"initial ESS {init_ess:.1f} is below {LOW_INIT_ESS_FRACTION:g} M: the importance proposal "
               "misses posterior mass and the result may be unreliable (diagnostic added by this tool)")
        logger.warning(msg)
        report["warnings"].append({"kind": "low_initial_ess", "message": msg})
    if out.trace.slow_steps:
        report["warnings"].append({"kind": "slow_progress", "steps": out.trace.slow_steps})
    report.update({
        "log_evidence_product": out.log_evidence_product,
        "log_evidence_path": out.log_evidence_path,
        "n_steps": out.trace.n_steps,
        "init_ess": init_ess,
        "posterior": _summary(values, cloud.norm_weights, names),
        "trace": out.trace.to_dict(),
    })
    write_json(_out(cfg, "report.json"), report)
    write_json(_out(cfg, "timing.json"), {"wall_time": time.perf_counter() - t0, "threads": threads})
    logger.info("log evidence %.6f after %d steps", out.log_evidence_product, out.trace.n_steps)
    return EXIT_OK


def cmd_model_select(cfg: ExperimentConfig, threads: int = 1) -> int:
    cfg.validate()
    if cfg.model_kind not in ("lca", "sbmreg"):
        raise ConfigError("model selection is available for lca and sbmreg")
    sc = cfg.sampler_config()
    data = _load_data(cfg)
    g_values = sorted(int(g) for g in cfg.g_range)
    seeds = replicate_seeds(int(cfg.seed), len(g_values))
    per_g = []
    t0 = time.perf_counter()
    for g, s in zip(g_values, seeds):
        try:
            approx = _fit(cfg, data, g, s % (2**31))
            target = _build_target(cfg, data, g, approx, "SBS")
            out = run_sbs(target, SamplerConfig(**{**sc.to_dict(), "master_seed": s, "path_variant": "SBS"}),
                          threads=threads)
        except Exception:
            write_json(_out(cfg, "per_g.json"), {"version": __version__, "config": cfg.to_dict(),
                                                 "per_g": per_g, "failed_g": g})
            raise
        cloud = out.final_cloud
        entry = {"g": g, "log_evidence_product": out.log_evidence_product,
                 "log_evidence_path": out.log_evidence_path, "n_steps": out.trace.n_steps,
                 "elbo": float(getattr(getattr(approx, "base", approx), "elbo", float("nan")))}
        if cfg.model_kind == "sbmreg":
            betas = np.array([p.beta for p in cloud.particles])
            w = cloud.norm_weights
            m = w @ betas
            entry["beta_mean"] = m.tolist()
            entry["beta_var"] = (w @ (betas - m) ** 2).tolist()
        per_g.append(entry)
        logger.info("g=%d: log evidence %.4f (%d steps)", g, out.log_evidence_product, out.trace.n_steps)
    moments = {}
    if cfg.model_kind == "sbmreg":
        for j in range(data.p):
            moments[f"beta_{j + 1}"] = ([e["beta_mean"][j] for e in per_g], [e["beta_var"][j] for e in per_g])
    summary = BmaSummary.from_moments(g_values, [e["log_evidence_product"] for e in per_g], moments,
                                      [e["log_evidence_path"] for e in per_g])
    result = {"version": __version__, "config": cfg.to_dict(), **summary.to_dict(), "per_g": per_g}
    write_json(_out(cfg, "bma.json"), result)
    write_json(_out(cfg, "timing.json"), {"wall_time": time.perf_counter() - t0, "threads": threads})
    if 1 in g_values:
        logger.info("p(g=1|Y) = %.4g", summary.p_g(1))
    return EXIT_OK


def cmd_calibrate(cfg: ExperimentConfig, threads: int = 1) -> int:
    cfg.validate(needs_data=False)
    cal = cfg.calibration
    sc = cfg.sampler_config()
    study = cal.get("study", "checking")
    t0 = time.perf_counter()
    try:
        if study == "bma_coverage":
            design = cal.get("design") or {}
            report = run_bma_coverage(int(cal.get("S", 10)), sc, int(cfg.seed), n=int(design.get("n", 20)),
                                      p=int(design.get("p", 3)), g_stars=tuple(design.get("g_stars", (1, 2))),
                                      g_range=tuple(cfg.g_range), workers=threads)
        elif study == "checking":
            method = cal.get("method", "SBS-from-VB.Sym")
            if method not in METHODS:
                raise ConfigError(f"method must be one of {METHODS}")
            design = dict(cal.get("design") or {})
            design.setdefault("g", int(cfg.g))
            phis = cal.get("phis") or _default_phis(cfg.model_kind, design)
            hyper = cfg.prior_var if cfg.model_kind == "logistic" else None
            if cfg.model_kind == "logistic" and "X" not in design:
                design["X"] = np.random.default_rng(int(cfg.seed)).standard_normal(
                    (int(design.get("n", 100)), int(design.get("p", 2))))
            report = run_checking_procedure(cfg.model_kind, method, phis, int(cal.get("S", 30)), sc,
                                            int(cfg.seed), design, hyper, workers=threads)
        else:
            raise ConfigError(f"unknown calibration study {study!r}")
    except CalibrationError as exc:
        if exc.report is not None:
            _write_calibration(cfg, exc.report)
        raise
    _write_calibration(cfg, report)
    write_json(_out(cfg, "timing.json"), {"wall_time": time.perf_counter() - t0, "threads": threads})
    for name, (D, p) in report.ks.items():
        logger.info("%s: KS D=%.4f p=%.4g", name, D, p)
    return EXIT_OK


def _default_phis(model_kind, design):
    if model_kind == "lca":
        return ["abs_pi_diff", "pi_1"] if int(design.get("g", 2)) > 1 else ["pi_1"]
    if model_kind == "sbmreg":
        return [f"beta_{j + 1}" for j in range(int(design.get("p", 3)))]
    if model_kind == "logistic":
        return ["theta_1"]
    return ["mu"]


def _write_calibration(cfg, report):
    d = {"version": __version__, **report.to_dict(), "run_config": cfg.to_dict()}
    write_json(_out(cfg, "calibration.json"), d)
    if hasattr(report, "write_u_csv"):
        report.write_u_csv(_out(cfg, "u_values.csv"))
    else:
        with open(_out(cfg, "u_values.csv"), "w") as fh:
            labels = list(report.u_values)
            fh.write(",".join(["index", *labels]) + "\n")
            for i in range(len(report.u_values[labels[0]])):
                fh.write(",".join([str(i), *(f"{report.u_values[k][i]:.17g}" for k in labels)]) + "\n")


COMMANDS = {
    "fit-approx": cmd_fit_approx,
    "sample": cmd_sample,
    "model-select": cmd_model_select,
    "calibrate": cmd_calibrate,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shortbridge", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads or processes")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--model", dest="model_kind", choices=MODEL_KINDS + ("gaussian_mean",))
        sp.add_argument("--data", dest="data_path")
        sp.add_argument("--g", type=int)
        sp.add_argument("--prior-var", type=float)

    def approx_args(sp):
        sp.add_argument("--approx", dest="approx_kind", choices=("vb", "ml"))
        sp.add_argument("--approx-file", dest="approx_path")
        sp.add_argument("--variant", choices=("diag_shrink", "diag_inflate", "shift"))
        sp.add_argument("--scale", type=float, help="c in the perturbation")
        sp.add_argument("--shift", type=float)
        sp.add_argument("--no-symmetrize", action="store_true", help="keep the plain VB fit for mixtures")

    def sampler_args(sp):
        sp.add_argument("--M", type=int)
        sp.add_argument("--B", type=int)
        sp.add_argument("--tau1", type=float)
        sp.add_argument("--tau2", type=float)
        sp.add_argument("--path-variant", choices=("SBS", "CBS", "CBS_IS"))

    sp = sub.add_parser("fit-approx", help="fit and save a posterior approximation")
    common(sp)
    approx_args(sp)
    sp = sub.add_parser("sample", help="run the bridge sampler")
    common(sp)
    approx_args(sp)
    sampler_args(sp)
    sp = sub.add_parser("model-select", help="evidence over g and model averaging")
    common(sp)
    approx_args(sp)
    sampler_args(sp)
    sp.add_argument("--g-range", type=int, nargs=2, metavar=("LO", "HI"))
    sp = sub.add_parser("calibrate", help="prior-predictive calibration check")
    common(sp)
    sampler_args(sp)
    sp.add_argument("--study", choices=("checking", "bma_coverage"))
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--phis", nargs="+")
    sp.add_argument("--S", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--q", type=int)
    sp.add_argument("--p", type=int)
    sp.add_argument("--g-range", type=int, nargs=2, metavar=("LO", "HI"))
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(read_json(args.config)) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    for key in ("model_kind", "data_path", "g", "prior_var"):
        if getattr(args, key, None) is not None:
            setattr(cfg, key, getattr(args, key))
    if getattr(args, "g_range", None):
        lo, hi = args.g_range
        cfg.g_range = list(range(lo, hi + 1))
    for arg, key in (("approx_kind", "kind"), ("approx_path", "path"), ("variant", "variant"),
                     ("scale", "c"), ("shift", "shift")):
        if getattr(args, arg, None) is not None:
            cfg.approx[key] = getattr(args, arg)
    if getattr(args, "no_symmetrize", False):
        cfg.approx["symmetrize"] = False
    for arg, key in (("M", "M"), ("B", "B"), ("tau1", "tau1"), ("tau2", "tau2"), ("path_variant", "path_variant")):
        if getattr(args, arg, None) is not None:
            cfg.sampler[key] = getattr(args, arg)
    for key in ("study", "method", "phis", "S"):
        if getattr(args, key, None) is not None:
            cfg.calibration[key] = getattr(args, key)
    design = dict(cfg.calibration.get("design") or {})
    for key in ("n", "q", "p"):
        if getattr(args, key, None) is not None:
            design[key] = getattr(args, key)
    if getattr(args, "g", None) is not None:
        design["g"] = args.g
    cfg.calibration["design"] = design
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        logger.info("seed %d, config %s", int(cfg.seed), json.dumps(cfg.to_dict(), sort_keys=True, default=str))
        return COMMANDS[args.command](cfg, threads=max(1, args.threads))
    except DataIOError as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except ConfigError as exc:
        logger.error("configuration: %s", exc)
        return EXIT_IO
    except (DegenerateCloudError, NonFiniteDensityError) as exc:
        logger.error("sampler degeneracy: %s", exc)
        return EXIT_DEGENERATE
    except CalibrationError as exc:
        logger.error("calibration failed: %s", exc)
        return EXIT_CALIBRATION
    except Exception as exc:  # fitter failures and the like
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
