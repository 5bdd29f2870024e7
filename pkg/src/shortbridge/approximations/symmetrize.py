"""Label-symmetrized mixtures of variational posteriors.

A mean-field fit of a mixture model picks one labelling of the components.
Averaging the fit over all ``g!`` relabellings gives a density that is
invariant to label permutations, like the true posterior.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import logsumexp

MAX_SYMMETRIZED_GROUPS = 6


def identity_perm(g: int) -> np.ndarray:
    return np.arange(g)


def all_perms(g: int) -> np.ndarray:
    """All permutations of ``range(g)`` as rows, identity first."""
    return np.array(list(itertools.permutations(range(g))), dtype=np.intp).reshape(-1, g)


class SymmetrizedApprox:
    """Uniform mixture of a base approximation over component relabellings.

    The base must provide ``component_log_densities(*state, perms)`` and
    ``sample_component(rng, perm)``, where component ``k`` of the state is
    described by base factor ``perm[k]``.
    """

    def __init__(self, base):
        g = base.g
        if g > MAX_SYMMETRIZED_GROUPS:
            raise ValueError(f"symmetrization over {g}! permutations is not supported (g <= 6)")
        self.base = base
        self.group_count = g
        self.perms = all_perms(g)
        self.log_nperm = math.lgamma(g + 1)

    @property
    def g(self) -> int:
        return self.group_count

    def perm_index(self, perm) -> int:
        hit = np.flatnonzero((self.perms == np.asarray(perm)).all(axis=1))
        if hit.size != 1:
            raise ValueError(f"{perm!r} is not a permutation of range({self.g})")
        return int(hit[0])

    def component_log_densities(self, *state) -> np.ndarray:
        return self.base.component_log_densities(*state, self.perms)

    def log_density(self, *state) -> float:
        return float(logsumexp(self.component_log_densities(*state)) - self.log_nperm)

    def sample_with_perm(self, rng: np.random.Generator):
        """Draw ``(state, perm)``: a uniform relabelling, then the permuted factors."""
        perm = self.perms[rng.integers(len(self.perms))]
        return self.base.sample_component(rng, perm), perm

    def sample(self, rng: np.random.Generator):
        return self.sample_with_perm(rng)[0]

    def to_dict(self) -> dict:
        return {"kind": "symmetrized", "base": self.base.to_dict()}


def symmetrize(approx) -> SymmetrizedApprox:
    return SymmetrizedApprox(approx)
