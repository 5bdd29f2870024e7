"""Adaptive SMC bridges from deterministic posterior approximations to the posterior."""
from .engine import (
    BridgeTarget,
    DegenerateCloudError,
    InitialProposal,
    NonFiniteDensityError,
    ParticleCloud,
    SamplerConfig,
    SamplerOutput,
    TemperingTrace,
    cess,
    ess,
    evidence_path,
    evidence_product,
    next_rho,
    normalize_log_weights,
    resample_multinomial,
    reweight,
    run_sbs,
)

__version__ = "0.1.0"
