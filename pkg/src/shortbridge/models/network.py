"""Undirected binary networks with dyad-level covariates."""
from __future__ import annotations

import numpy as np


class EdgeData:
    """Simple undirected graph on ``n`` nodes with ``p`` covariates per dyad.

    Dyads are stored once each, in the row-major order of the strict upper
    triangle: ``(0,1), (0,2), ..., (n-2, n-1)``.

    Attributes
    ----------
    n, p : int
    rows, cols : ndarray (D,)
        Node indices of each dyad, ``rows < cols``.
    y : ndarray (D,)
        Edge indicators.
    X : ndarray (D, p)
        Covariates.
    """

    def __init__(self, n: int, y, X):
        n = int(n)
        if n < 2:
            raise ValueError("a network needs at least two nodes")
        rows, cols = np.triu_indices(n, k=1)
        y = np.asarray(y, dtype=float).ravel()
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else np.zeros((rows.size, 0))
        if y.size != rows.size or X.shape[0] != rows.size:
            raise ValueError(f"expected {rows.size} dyads for n={n}, got y={y.size}, X={X.shape[0]}")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("edges must be binary")
        self.n = n
        self.rows = rows
        self.cols = cols
        self.y = y
        self.X = X
        for a in (self.rows, self.cols, self.y, self.X):
            a.setflags(write=False)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_dyads(self) -> int:
        return self.rows.size

    @property
    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        A[self.rows, self.cols] = self.y
        return A + A.T

    def dyad_index(self) -> np.ndarray:
        """``(n, n)`` lookup from a node pair to its dyad row, ``-1`` on the diagonal."""
        idx = np.full((self.n, self.n), -1, dtype=np.intp)
        d = np.arange(self.n_dyads)
        idx[self.rows, self.cols] = d
        idx[self.cols, self.rows] = d
        return idx

    @classmethod
    def from_dyads(cls, i, j, y, X, n: int | None = None) -> "EdgeData":
        """Build from an unordered dyad list; every pair must appear exactly once."""
        i = np.asarray(i, dtype=np.intp)
        j = np.asarray(j, dtype=np.intp)
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float).reshape(i.size, -1)
        if np.any(i == j):
            raise ValueError("self-loops are not allowed")
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        if n is None:
            n = int(hi.max()) + 1
        if lo.min() < 0 or hi.max() >= n:
            raise ValueError("node index out of range")
        key = lo * n + hi
        order = np.argsort(key, kind="stable")
        rows, cols = np.triu_indices(n, k=1)
        if key.size != rows.size or np.any(key[order] != rows * n + cols):
            raise ValueError("each unordered dyad must be listed exactly once")
        return cls(n, y[order], X[order])

    @classmethod
    def from_adjacency(cls, A, covariates=None) -> "EdgeData":
        """From a symmetric 0/1 matrix and optional ``(n, n, p)`` covariates."""
        A = np.asarray(A, dtype=float)
        n = A.shape[0]
        if A.shape != (n, n) or np.any(A != A.T):
            raise ValueError("adjacency must be square and symmetric")
        rows, cols = np.triu_indices(n, k=1)
        if covariates is None:
            X = np.zeros((rows.size, 0))
        else:
            X = np.asarray(covariates, dtype=float)[rows, cols]
        return cls(n, A[rows, cols], X)


class SbmPriors:
    """Priors of the block model with covariates.

    ``alpha_kl ~ N(alpha_mean, alpha_var)`` independently for ``k <= l``,
    ``beta ~ N(0, beta_var I)``, ``pi ~ Dir(d, ..., d)``.
    """

    def __init__(self, alpha_mean: float = 0.0, alpha_var: float = 1.0, beta_var: float = 1.0, d: float = 1.0):
        if alpha_var <= 0 or beta_var <= 0 or d <= 0:
            raise ValueError("prior variances and Dirichlet parameter must be positive")
        self.alpha_mean = float(alpha_mean)
        self.alpha_var = float(alpha_var)
        self.beta_var = float(beta_var)
        self.d = float(d)

    def to_dict(self) -> dict:
        return dict(alpha_mean=self.alpha_mean, alpha_var=self.alpha_var, beta_var=self.beta_var, d=self.d)

    def __repr__(self) -> str:
        return "SbmPriors(" + ", ".join(f"{k}={v:g}" for k, v in self.to_dict().items()) + ")"


def n_block_params(g: int) -> int:
    return g * (g + 1) // 2


def block_index(g: int) -> np.ndarray:
    """``(g, g)`` map from a block pair to its slot in the packed upper triangle."""
    idx = np.empty((g, g), dtype=np.intp)
    r, c = np.triu_indices(g)
    idx[r, c] = np.arange(r.size)
    idx[c, r] = np.arange(r.size)
    return idx


def pack_alpha(alpha) -> np.ndarray:
    alpha = np.atleast_2d(alpha)
    return alpha[np.triu_indices(alpha.shape[0])]


def unpack_alpha(vec, g: int) -> np.ndarray:
    return np.asarray(vec, dtype=float)[block_index(g)]
