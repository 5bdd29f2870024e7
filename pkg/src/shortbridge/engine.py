"""Adaptive tempered SMC sampler on a geometric bridge.

The sampler moves a weighted particle cloud along the path

    p_rho(theta) ∝ q(theta)^(1 - rho) * [l(Y | theta) pi(theta)]^rho,

from a reference density ``q`` at ``rho = 0`` to the posterior at ``rho = 1``.
With ``q`` a deterministic posterior approximation this is the shortened
bridge (SBS); with ``q`` the prior it is the classical bridge (CBS).

Everything that can overflow is handled in log space.  The only quantity the
engine needs from a particle is ``log_alpha = log l + log pi - log q``: it
drives the incremental weights, the conditional ESS used to choose the next
temperature, and both marginal-likelihood estimators.

Randomness is split into deterministic substreams keyed on
``(master_seed, generation, particle)`` so that a run does not depend on how
particles are distributed over worker threads.
"""
from __future__ import annotations

import logging
import threading
import time
import warnings
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

PATH_VARIANTS = ("SBS", "CBS", "CBS_IS")

# substream tags
_PARTICLE_STREAM = 0
_RESAMPLE_STREAM = 1


class DegenerateCloudError(RuntimeError):
    """All particle weights collapsed to zero."""


class NonFiniteDensityError(RuntimeError):
    """A log-density evaluated to NaN or +inf at a sampled particle."""

    def __init__(self, index: int, detail: str = ""):
        self.index = index
        msg = f"non-finite log-density at particle {index}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class IncompleteTraceError(ValueError):
    """Evidence requested from a trace that never reached rho = 1."""


class SlowProgressWarning(RuntimeWarning):
    pass


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``key`` under ``master_seed``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


class ParticleStreams:
    """Per-particle PCG64 streams for one generation.

    Building a fresh ``SeedSequence`` per particle dominates the cost of cheap
    kernels, so the 256-bit PCG64 state of every particle is drawn in one
    batch from the generation's seed sequence and loaded into a reusable
    thread-local generator.  ``get(m)`` is only valid until the same thread
    asks for another stream.
    """

    _local = threading.local()

    def __init__(self, master_seed: int, generation: int, M: int):
        ss = np.random.SeedSequence(int(master_seed), spawn_key=(_PARTICLE_STREAM, int(generation)))
        self.words = ss.generate_state(4 * M, np.uint64).reshape(M, 4).tolist()

    def get(self, m: int) -> np.random.Generator:
        loc = self._local
        if not hasattr(loc, "gen"):
            loc.bitgen = np.random.PCG64(0)
            loc.gen = np.random.Generator(loc.bitgen)
        w = self.words[m]
        loc.bitgen.state = {
            "bit_generator": "PCG64",
            "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3] | 1},
            "has_uint32": 0,
            "uinteger": 0,
        }
        return loc.gen


# ---------------------------------------------------------------------------
# weight arithmetic


def normalize_log_weights(log_weights) -> tuple[np.ndarray, float]:
    """Softmax of ``log_weights`` together with their log-sum-exp.

    Raises
    ------
    DegenerateCloudError
        If every entry is ``-inf``.
    """
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0:
        raise ValueError("empty weight vector")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise ValueError("log-weights must be finite or -inf")
    top = lw.max()
    if top == -np.inf:
        raise DegenerateCloudError("all log-weights are -inf")
    w = np.exp(lw - top)
    s = w.sum()
    return w / s, float(top + np.log(s))


def ess(norm_weights) -> float:
    """Effective sample size ``1 / sum(W^2)`` of normalized weights."""
    w = np.asarray(norm_weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))


def _scaled(log_alpha: np.ndarray, delta: float) -> np.ndarray:
    # delta * log_alpha with 0 * -inf := 0
    if delta == 0.0:
        return np.zeros_like(log_alpha)
    return delta * log_alpha


def _log_w(norm_weights: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(norm_weights)


def log_increments(log_alpha, delta_rho: float, rho: float = 0.0) -> np.ndarray:
    """Per-particle log weight increment for moving from ``rho`` to ``rho + delta_rho``.

    A 1-D ``log_alpha`` is the usual geometric case and gives
    ``delta_rho * log_alpha``.  A 2-D ``log_alpha`` of shape ``(M, K)`` holds,
    for each particle, ``log alpha`` under each of ``K`` equally weighted
    reference components (the relabellings of a symmetrized approximation).
    The increment is then that of the reference mixed over components,

        log sum_k exp(-(1 - rho - delta) la_k) - log sum_k exp(-(1 - rho) la_k),

    i.e. the expectation of ``alpha_k^delta`` under the component posterior
    at ``rho``.  With ``K = 1`` the two forms agree.
    """
    la = np.asarray(log_alpha, dtype=float)
    if la.ndim == 1:
        return _scaled(la, delta_rho)
    if delta_rho == 0.0:
        return np.zeros(la.shape[0])
    dead = ~np.all(np.isfinite(la), axis=1)
    la = np.where(dead[:, None], 0.0, la)
    rho_new = min(rho + delta_rho, 1.0)
    inc = logsumexp(-(1.0 - rho_new) * la, axis=1) - logsumexp(-(1.0 - rho) * la, axis=1)
    return np.where(dead, -np.inf, inc)


def component_mean_log_alpha(log_alpha, rho: float = 0.0) -> np.ndarray:
    """``E[log alpha]`` per particle; over components for 2-D input."""
    la = np.asarray(log_alpha, dtype=float)
    if la.ndim == 1:
        return la
    lw = -(1.0 - rho) * la
    lw = lw - logsumexp(lw, axis=1, keepdims=True)
    return np.sum(np.exp(lw) * la, axis=1)


def cess(norm_weights, log_alpha, delta_rho: float, rho: float = 0.0) -> float:
    """Conditional ESS of the current cloud for a temperature increment.

    ``M * (sum W a^d)^2 / sum W a^(2d)`` with ``a = exp(log_alpha)``,
    evaluated in log space.  ``rho`` only matters for component-wise
    ``log_alpha`` (see :func:`log_increments`).
    """
    if delta_rho < 0:
        raise ValueError("delta_rho must be non-negative")
    w = np.asarray(norm_weights, dtype=float)
    la = np.asarray(log_alpha, dtype=float)
    if w.shape[0] != la.shape[0]:
        raise ValueError("weights and log_alpha differ in length")
    m = w.size
    if delta_rho == 0.0:
        return float(m)
    lw = _log_w(w)
    inc = log_increments(la, delta_rho, rho)
    num = lw + inc
    if np.all(num == -np.inf):
        raise DegenerateCloudError("no particle with positive weight and alpha")
    log_num = 2.0 * logsumexp(num)
    log_den = logsumexp(lw + 2.0 * inc)
    return float(min(m * np.exp(log_num - log_den), m))


# ---------------------------------------------------------------------------
# particle cloud


@dataclass
class ParticleCloud:
    """Weighted particles with their cached ``log_alpha`` values.

    ``log_alpha`` has shape ``(M,)``, or ``(M, K)`` for targets with ``K``
    reference components.  ``rho`` is the temperature the weights refer to.
    """

    particles: list
    log_weights: np.ndarray
    norm_weights: np.ndarray
    log_alpha: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        m = len(self.particles)
        if m < 1:
            raise ValueError("a cloud needs at least one particle")
        for name in ("log_weights", "norm_weights"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (m,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({m},)")
            setattr(self, name, arr)
        la = np.asarray(self.log_alpha, dtype=float)
        if la.ndim not in (1, 2) or la.shape[0] != m:
            raise ValueError(f"log_alpha has shape {la.shape}, expected ({m},) or ({m}, K)")
        self.log_alpha = la

    @classmethod
    def from_log_weights(cls, particles, log_weights, log_alpha, rho: float = 0.0) -> "ParticleCloud":
        w, _ = normalize_log_weights(log_weights)
        return cls(list(particles), np.asarray(log_weights, float), w, np.asarray(log_alpha, float), rho)

    def __len__(self) -> int:
        return len(self.particles)

    @property
    def M(self) -> int:
        return len(self.particles)

    def weighted_mean_log_alpha(self) -> float:
        keep = self.norm_weights > 0
        la = component_mean_log_alpha(self.log_alpha[keep], self.rho)
        return float(np.sum(self.norm_weights[keep] * la))


def reweight(cloud: ParticleCloud, delta_rho: float) -> ParticleCloud:
    """Multiply weights by ``alpha^delta_rho`` using the stored ``log_alpha``."""
    if delta_rho < 0:
        raise ValueError("delta_rho must be non-negative")
    if delta_rho == 0.0:
        return cloud
    lw = cloud.log_weights + log_increments(cloud.log_alpha, delta_rho, cloud.rho)
    w, _ = normalize_log_weights(lw)
    return ParticleCloud(cloud.particles, lw, w, cloud.log_alpha, min(cloud.rho + delta_rho, 1.0))


def resample_multinomial(cloud: ParticleCloud, rng: np.random.Generator) -> ParticleCloud:
    """Draw ``M`` ancestors i.i.d. from the normalized weights; reset weights."""
    m = cloud.M
    w = cloud.norm_weights
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(m), side="right")
    idx = np.minimum(idx, m - 1)
    return ParticleCloud(
        [cloud.particles[i] for i in idx],
        np.zeros(m),
        np.full(m, 1.0 / m),
        cloud.log_alpha[idx].copy(),
        cloud.rho,
    )


# ---------------------------------------------------------------------------
# configuration, targets, outputs


@dataclass(frozen=True)
class SamplerConfig:
    M: int = 1000
    tau1: float = 0.9
    tau2: float = 0.8
    B: int = 5
    master_seed: int = 0
    path_variant: str = "SBS"
    bisection_iters: int = 60
    rho_tolerance: float = 1e-10

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if not 0 < self.tau1 <= 1:
            raise ValueError("tau1 must lie in (0, 1]")
        if not 0 < self.tau2 <= 1:
            raise ValueError("tau2 must lie in (0, 1]")
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if self.path_variant not in PATH_VARIANTS:
            raise ValueError(f"path_variant must be one of {PATH_VARIANTS}")
        if not 0 < self.rho_tolerance < 1:
            raise ValueError("rho_tolerance must lie in (0, 1)")
        if self.bisection_iters < 1:
            raise ValueError("bisection_iters must be positive")

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "tau1": self.tau1,
            "tau2": self.tau2,
            "B": self.B,
            "master_seed": self.master_seed,
            "path_variant": self.path_variant,
            "bisection_iters": self.bisection_iters,
            "rho_tolerance": self.rho_tolerance,
        }


class BridgeTarget(ABC):
    """One sampling problem: densities along the bridge plus a move kernel.

    ``log_approx`` must be a normalized log-density and ``sample_approx`` must
    draw from it exactly.  ``move`` is one sweep of a Markov kernel leaving
    ``p_rho ∝ exp((1 - rho) log_approx + rho (log_lik + log_prior))``
    invariant.  States are treated as immutable values: ``move`` returns a new
    state rather than editing its argument.
    """

    param_names: Sequence[str] = ()

    @abstractmethod
    def log_prior(self, theta) -> float: ...

    @abstractmethod
    def log_lik(self, theta) -> float: ...

    @abstractmethod
    def log_approx(self, theta) -> float: ...

    @abstractmethod
    def sample_approx(self, rng: np.random.Generator) -> Any: ...

    @abstractmethod
    def move(self, theta, rho: float, rng: np.random.Generator) -> Any: ...

    def flatten(self, theta) -> np.ndarray:
        """Parameter vector written to the posterior-sample CSV."""
        return np.asarray(theta, dtype=float).ravel()

    def propagate(self, theta, rho: float, rng: np.random.Generator, sweeps: int, index: int = -1):
        """Apply ``sweeps`` moves, then return ``(theta, log_alpha(theta))``.

        Targets whose kernels already evaluate the densities can override this
        to avoid recomputing them.
        """
        for _ in range(sweeps):
            theta = self.move(theta, rho, rng)
        return theta, self.log_alpha(theta, index)

    def log_tempered(self, theta, rho: float) -> float:
        return (1.0 - rho) * self.log_approx(theta) + rho * (self.log_lik(theta) + self.log_prior(theta))

    def log_alpha(self, theta, index: int = -1) -> float | np.ndarray:
        """``log l + log pi - log q`` at ``theta``.

        Targets whose reference is a uniform mixture over relabellings may
        return one value per mixture component instead; the engine then
        weights particles by the mixture.
        """
        ll = self.log_lik(theta)
        lp = self.log_prior(theta)
        lq = self.log_approx(theta)
        if not np.isfinite(lq):
            raise NonFiniteDensityError(index, f"log_approx={lq}")
        if np.isnan(ll) or ll == np.inf or np.isnan(lp) or lp == np.inf:
            raise NonFiniteDensityError(index, f"log_lik={ll}, log_prior={lp}")
        return float(ll + lp - lq)


class InitialProposal(ABC):
    """Importance proposal for the first generation (CBS_IS baseline)."""

    @abstractmethod
    def log_density(self, theta) -> float: ...

    @abstractmethod
    def sample(self, rng: np.random.Generator) -> Any: ...


@dataclass
class TemperingTrace:
    rho_seq: list = field(default_factory=list)
    cess_seq: list = field(default_factory=list)
    ess_seq: list = field(default_factory=list)
    resampled: list = field(default_factory=list)
    step_log_ratio: list = field(default_factory=list)
    u_seq: list = field(default_factory=list)
    init_ess: float = float("nan")
    slow_steps: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.rho_seq) - 1

    @property
    def complete(self) -> bool:
        return (
            len(self.rho_seq) >= 2
            and self.rho_seq[0] == 0.0
            and self.rho_seq[-1] == 1.0
            and len(self.step_log_ratio) == len(self.rho_seq) - 1
            and len(self.u_seq) == len(self.rho_seq)
        )

    def to_dict(self) -> dict:
        return {
            "rho_seq": [float(r) for r in self.rho_seq],
            "cess_seq": [float(c) for c in self.cess_seq],
            "ess_seq": [float(e) for e in self.ess_seq],
            "resampled": [bool(r) for r in self.resampled],
            "step_log_ratio": [float(s) for s in self.step_log_ratio],
            "u_seq": [float(u) for u in self.u_seq],
            "init_ess": float(self.init_ess),
            "slow_steps": int(self.slow_steps),
        }


def evidence_product(trace: TemperingTrace) -> float:
    """Log of the product of incremental normalizing-constant ratios."""
    if not trace.complete:
        raise IncompleteTraceError("trace does not end at rho = 1")
    return float(np.sum(trace.step_log_ratio))


def evidence_path(trace: TemperingTrace) -> float:
    """Trapezoid rule for the thermodynamic integral of E[log alpha]."""
    if not trace.complete:
        raise IncompleteTraceError("trace does not end at rho = 1")
    rho = np.asarray(trace.rho_seq, dtype=float)
    u = np.asarray(trace.u_seq, dtype=float)
    return float(np.sum(np.diff(rho) / 2.0 * (u[1:] + u[:-1])))


@dataclass
class SamplerOutput:
    final_cloud: ParticleCloud
    trace: TemperingTrace
    log_evidence_product: float
    log_evidence_path: float
    wall_time: float

    def weighted_mean(self, fn: Callable[[Any], Any] | None = None) -> np.ndarray:
        vals = np.array([fn(p) if fn else p for p in self.final_cloud.particles], dtype=float)
        return np.tensordot(self.final_cloud.norm_weights, vals, axes=1)


# ---------------------------------------------------------------------------
# temperature search


def next_rho(cloud: ParticleCloud, rho_prev: float, config: SamplerConfig) -> float:
    """Largest ``rho <= 1`` whose conditional ESS stays above ``tau1 * M``.

    Bisection on the increment.  The returned increment is never below
    ``config.rho_tolerance``; when even that increment violates the threshold
    a :class:`SlowProgressWarning` is issued.
    """
    if not 0.0 <= rho_prev < 1.0:
        raise ValueError("rho_prev must lie in [0, 1)")
    target = config.tau1 * cloud.M
    w, la = cloud.norm_weights, cloud.log_alpha
    span = 1.0 - rho_prev
    if cess(w, la, span, rho_prev) >= target:
        return 1.0
    lo, hi = 0.0, span
    for _ in range(config.bisection_iters):
        mid = 0.5 * (lo + hi)
        if cess(w, la, mid, rho_prev) >= target:
            lo = mid
        else:
            hi = mid
        if hi - lo < config.rho_tolerance:
            break
    if lo < config.rho_tolerance:
        warnings.warn(
            f"cESS below threshold at the minimum increment from rho={rho_prev:.6g}",
            SlowProgressWarning,
            stacklevel=2,
        )
        lo = config.rho_tolerance
    return min(rho_prev + lo, 1.0)


# ---------------------------------------------------------------------------
# the sampler


def _parallel_map(fn, n: int, threads: int) -> list:
    if threads <= 1 or n < 2:
        return [fn(m) for m in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        chunk = max(1, n // (4 * threads))
        return list(pool.map(fn, range(n), chunksize=chunk))


def run_sbs(
    target: BridgeTarget,
    config: SamplerConfig,
    init_proposal: InitialProposal | None = None,
    threads: int = 1,
    max_steps: int | None = None,
) -> SamplerOutput:
    """Run the adaptive bridge sampler until ``rho`` reaches 1.

    Parameters
    ----------
    target
        The bridge.  For ``CBS`` and ``CBS_IS`` its reference density must be
        the prior.
    config
        Particle count, thresholds, sweeps per move and the master seed.
    init_proposal
        Required for ``CBS_IS``: generation 0 is drawn from it and weighted by
        ``log_approx - log_proposal``.
    threads
        Worker threads for per-particle work.  Results do not depend on it.
    max_steps
        Optional hard cap on tempering steps (raises ``RuntimeError``).
    """
    if config.path_variant == "CBS_IS" and init_proposal is None:
        raise ValueError("CBS_IS needs an init_proposal")
    t0 = time.perf_counter()
    seed = config.master_seed
    M = config.M

    streams0 = ParticleStreams(seed, 0, M)

    def init_one(m):
        rng = streams0.get(m)
        if config.path_variant == "CBS_IS":
            theta = init_proposal.sample(rng)
            lq = target.log_approx(theta)
            lprop = init_proposal.log_density(theta)
            if not np.isfinite(lprop) or np.isnan(lq) or lq == np.inf:
                raise NonFiniteDensityError(m, "initial importance weight")
            lw = lq - lprop
        else:
            theta = target.sample_approx(rng)
            lw = 0.0
        return theta, lw, target.log_alpha(theta, m)

    init = _parallel_map(init_one, M, threads)
    particles = [r[0] for r in init]
    log_w0 = np.array([r[1] for r in init])
    log_alpha = np.array([r[2] for r in init])
    cloud = ParticleCloud.from_log_weights(particles, log_w0, log_alpha)

    trace = TemperingTrace()
    trace.rho_seq.append(0.0)
    trace.init_ess = ess(cloud.norm_weights)
    trace.u_seq.append(cloud.weighted_mean_log_alpha())

    try:
        cloud = _temper(target, config, cloud, trace, threads, max_steps)
    except (DegenerateCloudError, NonFiniteDensityError) as exc:
        # partial trace for diagnosis
        exc.trace = trace
        raise

    return SamplerOutput(
        final_cloud=cloud,
        trace=trace,
        log_evidence_product=evidence_product(trace),
        log_evidence_path=evidence_path(trace),
        wall_time=time.perf_counter() - t0,
    )


def _temper(target, config, cloud, trace, threads, max_steps) -> ParticleCloud:
    """Reweight, resample and move until ``rho = 1``; fills ``trace`` in place."""
    seed = config.master_seed
    M = config.M
    rho = 0.0
    h = 0
    while rho < 1.0:
        h += 1
        if max_steps is not None and h > max_steps:
            raise RuntimeError(f"no convergence to rho=1 within {max_steps} steps")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SlowProgressWarning)
            new_rho = next_rho(cloud, rho, config)
        if caught:
            trace.slow_steps += 1
            for wrn in caught:
                warnings.warn(wrn.message, wrn.category, stacklevel=2)
        delta = new_rho - rho
        inc = log_increments(cloud.log_alpha, delta, rho)
        trace.step_log_ratio.append(float(logsumexp(_log_w(cloud.norm_weights) + inc)))
        trace.cess_seq.append(cess(cloud.norm_weights, cloud.log_alpha, delta, rho))

        cloud = reweight(cloud, delta)
        step_ess = ess(cloud.norm_weights)
        trace.ess_seq.append(step_ess)
        do_resample = step_ess < config.tau2 * M
        if do_resample:
            cloud = resample_multinomial(cloud, substream(seed, _RESAMPLE_STREAM, h))
        trace.resampled.append(bool(do_resample))

        rho_h, parts = new_rho, cloud.particles
        streams = ParticleStreams(seed, h, M)

        def move_one(m):
            return target.propagate(parts[m], rho_h, streams.get(m), config.B, m)

        moved = _parallel_map(move_one, M, threads)
        cloud = ParticleCloud(
            [r[0] for r in moved],
            cloud.log_weights,
            cloud.norm_weights,
            np.array([r[1] for r in moved]),
            new_rho,
        )
        rho = new_rho
        trace.rho_seq.append(rho)
        trace.u_seq.append(cloud.weighted_mean_log_alpha())
        logger.debug(
            "step %d: rho=%.6g cESS=%.1f ESS=%.1f resampled=%s",
            h, rho, trace.cess_seq[-1], step_ess, do_resample,
        )

    return cloud
