"""Posterior calibration checks and model averaging.

If ``theta*`` is drawn from the prior and ``Y*`` from the model given
``theta*``, the posterior CDF of a scalar functional evaluated at its true
value is uniform.  The checking procedure simulates ``S`` such pairs, computes
that CDF value ``U`` from each method's (weighted) posterior sample, and tests
the ``U`` values for uniformity with a Kolmogorov-Smirnov test.

The module also turns per-model evidence into posterior model probabilities
and combines per-model posterior moments by Bayesian model averaging.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.special import softmax

from .approximations import fit_vb_lca, fit_vb_logistic, fit_vb_sbmreg, symmetrize
from .approximations.lca import LcaHyper
from .engine import SamplerConfig, run_sbs
from .models.conjugate import GaussianMeanTarget
from .models.lca import LcaTarget
from .models.logistic import LogisticTarget
from .models.network import SbmPriors
from .models.sbmreg import SbmRegTarget
from .models.simulate import simulate_prior_predictive

logger = logging.getLogger(__name__)

METHODS = ("exact", "VB", "VB.Sym", "SBS-from-VB", "SBS-from-VB.Sym", "CBS")
KS_MONTE_CARLO_DRAWS = 10_000
MAX_FAILURE_FRACTION = 0.05


class CalibrationError(RuntimeError):
    """Too many replicates failed; carries the partial report."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# U statistic and uniformity tests


def u_statistic(phi_star: float, phi_sample, weights=None) -> float:
    """Weighted posterior CDF of the functional at its true value.

    Ties with ``phi_star`` count for half their weight, which keeps ``U``
    uniform for discrete functionals.
    """
    phi = np.asarray(phi_sample, dtype=float).ravel()
    if phi.size == 0:
        raise ValueError("empty posterior sample")
    if weights is None:
        w = np.full(phi.size, 1.0 / phi.size)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.size != phi.size:
            raise ValueError("weights and sample differ in length")
        w = w / w.sum()
    below = w[phi < phi_star].sum()
    ties = w[phi == phi_star].sum()
    return float(min(max(below + 0.5 * ties, 0.0), 1.0))


def _lattice_distance(k: np.ndarray, L: int) -> np.ndarray:
    """Sup distance of each row's empirical CDF to the uniform CDF on ``{0..L-1}``."""
    k = np.atleast_2d(k)
    counts = np.zeros((k.shape[0], L))
    np.add.at(counts, (np.repeat(np.arange(k.shape[0]), k.shape[1]), k.ravel()), 1.0)
    emp = np.cumsum(counts, axis=1) / k.shape[1]
    ref = np.arange(1, L + 1) / L
    return np.abs(emp - ref).max(axis=1)


def ks_uniform_test(u_values, lattice_size: int | None = None, seed: int = 0) -> tuple[float, float]:
    """Kolmogorov-Smirnov test of uniformity.

    Parameters
    ----------
    u_values : array of values in [0, 1]
    lattice_size : int or None
        ``None`` tests against U(0, 1) with the asymptotic p-value.  An
        integer ``L`` tests against the uniform law on ``{0, 1/(L-1), ..., 1}``
        (the law of ``U_M`` for ``M = L - 1`` unweighted draws); values are
        snapped to the nearest lattice point and the p-value comes from
        ``10^4`` seeded Monte Carlo null samples.

    Returns
    -------
    (D, p_value)
    """
    u = np.asarray(u_values, dtype=float).ravel()
    if u.size < 10:
        raise ValueError(f"need at least 10 values for a KS test, got {u.size}")
    if np.any((u < 0) | (u > 1)) or np.any(np.isnan(u)):
        raise ValueError("U values must lie in [0, 1]")
    if lattice_size is None:
        res = stats.kstest(u, "uniform", method="asymp")
        return float(res.statistic), float(res.pvalue)
    L = int(lattice_size)
    if L < 2:
        raise ValueError("lattice_size must be at least 2")
    k = np.rint(u * (L - 1)).astype(np.intp)
    D = float(_lattice_distance(k[None, :], L)[0])
    rng = np.random.default_rng(seed)
    exceed = 0
    chunk = max(1, min(KS_MONTE_CARLO_DRAWS, 2_000_000 // (L + u.size)))
    done = 0
    while done < KS_MONTE_CARLO_DRAWS:
        b = min(chunk, KS_MONTE_CARLO_DRAWS - done)
        sims = _lattice_distance(rng.integers(L, size=(b, u.size)), L)
        exceed += int(np.sum(sims >= D - 1e-12))
        done += b
    return D, (exceed + 1.0) / (KS_MONTE_CARLO_DRAWS + 1.0)


# ---------------------------------------------------------------------------
# model posterior and averaging


def model_posterior(log_evidence, log_prior_g=None) -> np.ndarray:
    """``p(g | Y)`` from per-model log-evidences; uniform prior by default."""
    le = np.asarray(log_evidence, dtype=float)
    if not np.all(np.isfinite(le)):
        raise ValueError("log-evidences must be finite")
    lp = np.zeros_like(le) if log_prior_g is None else np.asarray(log_prior_g, dtype=float)
    return softmax(le + lp)


def bma_moments(per_g_mean, per_g_var, p_g) -> tuple[float, float, float, float, float]:
    """Model-averaged mean and the within/between split of its variance.

    Returns ``(mean, within_var, between_var, sd, ratio)`` with
    ``ratio = mean / sd``.
    """
    m = np.asarray(per_g_mean, dtype=float)
    v = np.asarray(per_g_var, dtype=float)
    p = np.asarray(p_g, dtype=float)
    if not (m.shape == v.shape == p.shape):
        raise ValueError("per-model means, variances and probabilities differ in length")
    mean = float(p @ m)
    within = float(p @ v)
    between = float(p @ (m - mean) ** 2)
    sd = math.sqrt(within + between)
    ratio = mean / sd if sd > 0 else math.copysign(math.inf, mean) if mean else math.nan
    return mean, within, between, sd, ratio


def weighted_quantile(x, weights, q) -> np.ndarray:
    """Smallest sample value whose weighted CDF reaches each level in ``q``."""
    x = np.asarray(x, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    order = np.argsort(x, kind="stable")
    cdf = np.cumsum(w[order])
    cdf /= cdf[-1]
    pos = np.searchsorted(cdf, np.atleast_1d(q) - 1e-12, side="left")
    return x[order][np.minimum(pos, x.size - 1)]


def ci_coverage(per_replicate, level: float = 0.95) -> float:
    """Fraction of equal-tailed weighted credible intervals containing the truth.

    ``per_replicate`` yields ``(theta_star, sample, weights)``; ``theta_star``
    may be a vector, with ``sample`` of shape ``(M, d)``, in which case each
    coordinate counts as one interval.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    hits = total = 0
    for theta_star, sample, weights in per_replicate:
        ts = np.atleast_1d(np.asarray(theta_star, dtype=float))
        smp = np.asarray(sample, dtype=float).reshape(-1, ts.size)
        w = np.full(smp.shape[0], 1.0) if weights is None else np.asarray(weights, dtype=float)
        for j in range(ts.size):
            lo, hi = weighted_quantile(smp[:, j], w, [lo_q, hi_q])
            hits += int(lo <= ts[j] <= hi)
            total += 1
    if total == 0:
        raise ValueError("no replicates")
    return hits / total


# ---------------------------------------------------------------------------
# reports


@dataclass
class CalibrationReport:
    model_kind: str
    method: str
    phi_names: list
    u_values: dict
    ks: dict
    replicate_indices: list
    replicate_seeds: list
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def S(self) -> int:
        return len(self.replicate_indices)

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "method": self.method,
            "S": self.S,
            "phi_names": list(self.phi_names),
            "ks": {k: {"D": v[0], "p_value": v[1]} for k, v in self.ks.items()},
            "u_values": {k: [float(x) for x in v] for k, v in self.u_values.items()},
            "replicate_indices": [int(i) for i in self.replicate_indices],
            "replicate_seeds": [int(s) for s in self.replicate_seeds],
            "n_failed": self.n_failed,
            "failures": self.failures,
            "config": self.config,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_u_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["replicate", *self.phi_names])
            for row, idx in enumerate(self.replicate_indices):
                out.writerow([idx, *(f"{self.u_values[name][row]:.17g}" for name in self.phi_names)])


@dataclass
class BmaSummary:
    g_values: list
    model_posterior: np.ndarray
    log_evidence: list
    log_evidence_path: list
    parameters: dict = field(default_factory=dict)

    @classmethod
    def from_moments(cls, g_values, log_evidence, per_g_moments: dict, log_evidence_path=None, log_prior_g=None):
        """``per_g_moments`` maps a parameter name to ``(means, variances)`` over ``g_values``."""
        post = model_posterior(log_evidence, log_prior_g)
        params = {}
        for name, (means, variances) in per_g_moments.items():
            mean, within, between, sd, ratio = bma_moments(means, variances, post)
            params[name] = {"post_mean": mean, "within_var": within, "between_var": between, "sd": sd, "ratio": ratio}
        path = list(log_evidence_path) if log_evidence_path is not None else [math.nan] * len(g_values)
        return cls(list(g_values), post, [float(x) for x in log_evidence], [float(x) for x in path], params)

    def p_g(self, g: int) -> float:
        return float(self.model_posterior[self.g_values.index(g)])

    def to_dict(self) -> dict:
        return {
            "g_values": [int(g) for g in self.g_values],
            "model_posterior": [float(x) for x in self.model_posterior],
            "p_g1": self.p_g(1) if 1 in self.g_values else None,
            "log_evidence_product": self.log_evidence,
            "log_evidence_path": self.log_evidence_path,
            "parameters": self.parameters,
        }


# ---------------------------------------------------------------------------
# checking procedure


def phi_value(name: str, flat: np.ndarray, param_names) -> float:
    """Evaluate a named functional on a flattened state.

    ``abs_pi_diff`` is ``|pi_1 - pi_2|``; any other name must be a parameter name.
    """
    if name == "abs_pi_diff":
        i, j = param_names.index("pi_1"), param_names.index("pi_2")
        return float(abs(flat[i] - flat[j]))
    return float(flat[param_names.index(name)])


def replicate_seeds(seed: int, S: int) -> list:
    ss = np.random.SeedSequence(int(seed))
    return [int(x) for x in ss.generate_state(S, np.uint64) >> np.uint64(1)]


def _fit_and_target(model_kind, method, data, design, hyper, rs):
    """Reference approximation and bridge target for one replicate."""
    sym = method.endswith(".Sym")
    if model_kind == "gaussian_mean":
        h = dict(noise_var=1.0, prior_mean=0.0, prior_var=1.0)
        h.update(hyper or {})
        t = GaussianMeanTarget(data, h["noise_var"], h["prior_mean"], h["prior_var"])
        return (t if method == "CBS" else t.exact_posterior_target()), None
    if model_kind == "logistic":
        X = np.atleast_2d(np.asarray(design["X"], dtype=float))
        prior_var = 100.0 if hyper is None else float(hyper)
        if method == "CBS":
            return LogisticTarget(X, data, prior_var, proposal_cov=fit_vb_logistic(X, data, prior_var).covariance), None
        vb = fit_vb_logistic(X, data, prior_var)
        return LogisticTarget(X, data, prior_var, approx=vb), vb
    g = int(design.get("g_fit", design["g"]))
    if model_kind == "lca":
        hyper = hyper or LcaHyper()
        if method == "CBS":
            return LcaTarget(data, g, hyper), None
        vb = fit_vb_lca(data, g, hyper, seed=rs % (2**31))
        approx = symmetrize(vb) if sym else vb
        return LcaTarget(data, g, hyper, approx), approx
    if model_kind == "sbmreg":
        priors = hyper or SbmPriors()
        vb = fit_vb_sbmreg(data, g, priors, seed=rs % (2**31))
        if method == "CBS":
            return SbmRegTarget(data, g, priors, None, proposal=vb), None
        approx = symmetrize(vb) if sym else vb
        return SbmRegTarget(data, g, priors, approx), approx
    raise ValueError(f"unknown model kind {model_kind!r}")


def _posterior_sample(model_kind, method, target, approx, config, rs):
    """Flattened posterior sample and weights under ``method``."""
    M = config.M
    if method in ("exact", "VB", "VB.Sym"):
        if method == "exact" and model_kind != "gaussian_mean":
            raise ValueError("the exact method is only available for the Gaussian mean model")
        rng = np.random.default_rng(rs)
        draws = [target.sample_approx(rng) for _ in range(M)]
        return np.array([target.flatten(d) for d in draws]), np.full(M, 1.0 / M)
    variant = "CBS" if method == "CBS" else "SBS"
    out = run_sbs(target, replace(config, master_seed=rs, path_variant=variant))
    cloud = out.final_cloud
    return np.array([target.flatten(p) for p in cloud.particles]), cloud.norm_weights


def _replicate(args):
    model_kind, method, phis, design, hyper, config, rs, index = args
    try:
        rng = np.random.default_rng(rs)
        theta_star, data = simulate_prior_predictive(model_kind, design, hyper, rng)
        target, approx = _fit_and_target(model_kind, method, data, design, hyper, rs)
        flat_star = target.flatten(theta_star)
        sample, weights = _posterior_sample(model_kind, method, target, approx, config, rs)
        names = list(target.param_names)
        u = {}
        for name in phis:
            vals = np.array([phi_value(name, row, names) for row in sample])
            u[name] = u_statistic(phi_value(name, flat_star, names), vals, weights)
        return index, u, None
    except Exception as exc:  # recorded per replicate, judged in aggregate
        return index, None, f"{type(exc).__name__}: {exc}"


def _run_jobs(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_checking_procedure(model_kind: str, method: str, phis, S: int, sampler_config: SamplerConfig,
                           seed: int = 0, design: dict | None = None, hyper=None, workers: int = 1
                           ) -> CalibrationReport:
    """Simulate ``S`` prior-predictive replicates and test each ``U`` for uniformity.

    Parameters
    ----------
    model_kind : {"gaussian_mean", "logistic", "lca", "sbmreg"}
    method : one of ``METHODS``
        ``VB`` and ``VB.Sym`` draw ``M`` samples from the (symmetrized)
        approximation; ``SBS-from-*`` run the bridge from it; ``CBS`` runs
        it from the prior; ``exact`` samples the conjugate posterior.
    phis : list of str
        Functional names, see :func:`phi_value`.
    S : int
        Number of replicates.
    sampler_config : SamplerConfig
        ``M`` also sets the number of draws for the sampling methods; each
        replicate overrides ``master_seed``.
    seed : int
        Master seed; replicate seeds derive from it.
    design, hyper
        Passed to :func:`simulate_prior_predictive`.
    workers : int
        Worker processes.  The report does not depend on it.

    Raises
    ------
    CalibrationError
        More than 5% of the replicates failed.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if S < 1:
        raise ValueError("S must be positive")
    design = dict(design or {})
    seeds = replicate_seeds(seed, S)
    jobs = [(model_kind, method, list(phis), design, hyper, sampler_config, rs, i) for i, rs in enumerate(seeds)]
    results = sorted(_run_jobs(_replicate, jobs, workers), key=lambda r: r[0])

    ok = [r for r in results if r[2] is None]
    failures = [{"replicate": r[0], "seed": seeds[r[0]], "error": r[2]} for r in results if r[2] is not None]
    for f in failures:
        logger.warning("replicate %d failed: %s", f["replicate"], f["error"])
    u_values = {name: np.array([r[1][name] for r in ok]) for name in phis}
    lattice = sampler_config.M + 1 if method in ("exact", "VB", "VB.Sym") else None
    ks = {}
    for name in phis:
        if len(ok) >= 10:
            ks[name] = ks_uniform_test(u_values[name], lattice, seed=seed)
        else:
            ks[name] = (math.nan, math.nan)
    report = CalibrationReport(
        model_kind, method, list(phis), u_values, ks, [r[0] for r in ok], seeds,
        failures, {"S": S, "seed": seed, "sampler": sampler_config.to_dict(), "design": _jsonable(design)},
    )
    if len(failures) > MAX_FAILURE_FRACTION * S:
        raise CalibrationError(f"{len(failures)} of {S} replicates failed", report)
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return f"array{list(obj.shape)}"
    return obj


# ---------------------------------------------------------------------------
# averaged coverage study for the block model


@dataclass
class CoverageReport:
    level: float
    coverage: dict
    u_values: dict
    ks: dict
    g_star: list
    model_posterior: dict
    replicate_seeds: list
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "coverage": self.coverage,
            "ks": {k: {"D": v[0], "p_value": v[1]} for k, v in self.ks.items()},
            "u_values": {k: [float(x) for x in v] for k, v in self.u_values.items()},
            "g_star": self.g_star,
            "model_posterior": {k: [[float(x) for x in row] for row in v] for k, v in self.model_posterior.items()},
            "replicate_seeds": self.replicate_seeds,
            "n_failed": len(self.failures),
            "failures": self.failures,
            "config": self.config,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _bma_replicate(args):
    n, p, g_star, g_range, priors, config, rs, index, level = args
    try:
        rng = np.random.default_rng(rs)
        theta_star, data = simulate_prior_predictive("sbmreg", {"n": n, "g": g_star, "p": p}, priors, rng)
        beta_star = theta_star.beta
        sbs_le, vb_le, sbs_parts, vb_parts = [], [], [], []
        for g in g_range:
            vb = fit_vb_sbmreg(data, g, priors, seed=rs % (2**31))
            approx = symmetrize(vb) if g > 1 else vb
            target = SbmRegTarget(data, g, priors, approx)
            out = run_sbs(target, replace(config, master_seed=rs + g, path_variant="SBS"))
            cloud = out.final_cloud
            betas = np.array([s.beta for s in cloud.particles])
            sbs_le.append(out.log_evidence_product)
            sbs_parts.append((betas, cloud.norm_weights))
            vb_le.append(vb.elbo)
            vb_draws = vb.beta_gauss.sample(np.random.default_rng(rs + 1000 + g), size=config.M)
            vb_draws = np.asarray(vb_draws).reshape(config.M, p)
            vb_parts.append((vb_draws, np.full(config.M, 1.0 / config.M)))
        res = {}
        for label, le, parts in (("SBS", sbs_le, sbs_parts), ("VB", vb_le, vb_parts)):
            post = model_posterior(le)
            sample = np.concatenate([b for b, _ in parts])
            weights = np.concatenate([pg * w for pg, (_, w) in zip(post, parts)])
            u = [u_statistic(beta_star[j], sample[:, j], weights) for j in range(p)]
            cov = [ci_coverage([(beta_star[j], sample[:, j], weights)], level) for j in range(p)]
            res[label] = {"post": post.tolist(), "u": u, "covered": cov}
        return index, res, None
    except Exception as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def run_bma_coverage(S: int, sampler_config: SamplerConfig, seed: int = 0, n: int = 20, p: int = 3,
                     g_stars=(1, 2), g_range=(1, 2, 3), priors: SbmPriors | None = None,
                     level: float = 0.95, workers: int = 1) -> CoverageReport:
    """Coverage of model-averaged credible intervals for the block-model coefficients.

    Replicate ``s`` simulates a network with ``g_stars[s % len(g_stars)]``
    blocks and parameters from the prior, fits every ``g`` in ``g_range``, and
    averages over ``g`` twice: with bridge-sampler evidences and samples
    (``SBS``) and with variational bounds and draws (``VB``).  Coverage pools
    all replicates and coefficients.
    """
    priors = priors or SbmPriors()
    seeds = replicate_seeds(seed, S)
    g_star = [int(g_stars[i % len(g_stars)]) for i in range(S)]
    jobs = [(n, p, g_star[i], tuple(g_range), priors, sampler_config, rs, i, level) for i, rs in enumerate(seeds)]
    results = sorted(_run_jobs(_bma_replicate, jobs, workers), key=lambda r: r[0])
    ok = [r for r in results if r[2] is None]
    failures = [{"replicate": r[0], "seed": seeds[r[0]], "error": r[2]} for r in results if r[2] is not None]
    coverage, u_values, ks, post = {}, {}, {}, {}
    for label in ("SBS", "VB"):
        cov = [c for r in ok for c in r[1][label]["covered"]]
        coverage[label] = float(np.mean(cov)) if cov else math.nan
        u_values[label] = np.array([u for r in ok for u in r[1][label]["u"]])
        ks[label] = ks_uniform_test(u_values[label], seed=seed) if u_values[label].size >= 10 else (math.nan, math.nan)
        post[label] = [r[1][label]["post"] for r in ok]
    report = CoverageReport(
        level, coverage, u_values, ks, [g_star[r[0]] for r in ok], post, seeds, failures,
        {"S": S, "seed": seed, "n": n, "p": p, "g_stars": list(g_stars), "g_range": list(g_range),
         "priors": priors.to_dict(), "sampler": sampler_config.to_dict()},
    )
    if len(failures) > MAX_FAILURE_FRACTION * S:
        raise CalibrationError(f"{len(failures)} of {S} replicates failed", report)
    return report
