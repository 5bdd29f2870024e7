"""Gaussian posterior approximations for logistic regression."""
from __future__ import annotations

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit


class VBConvergenceError(RuntimeError):
    def __init__(self, message: str, last_delta: float):
        self.last_delta = last_delta
        super().__init__(f"{message} (last change {last_delta:.3g})")


class SeparationError(RuntimeError):
    """Maximum likelihood diverges: the data are (quasi-)separable."""


_LOG_2PI = np.log(2.0 * np.pi)


class GaussianApprox:
    """Multivariate normal with a cached Cholesky factor.

    Parameters
    ----------
    mean : array_like, shape (p,)
    covariance : array_like, shape (p, p)
        Symmetric positive definite.  Asymmetry above 1e-10 is rejected.
    """

    def __init__(self, mean, covariance):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        p = mean.size
        if cov.shape != (p, p):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {p}")
        asym = np.max(np.abs(cov - cov.T)) if p else 0.0
        if asym > 1e-10 * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        self.mean = mean
        self.covariance = cov
        self.chol = chol
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        self.mean.setflags(write=False)
        self.covariance.setflags(write=False)
        self.chol.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, x) -> float | np.ndarray:
        """Log-density at one point ``(p,)`` or at each row of ``(N, p)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        xs = np.atleast_2d(x.reshape(-1, self.dim) if single else x)
        z = linalg.solve_triangular(self.chol, (xs - self.mean).T, lower=True)
        out = -0.5 * (self.dim * _LOG_2PI + self.logdet + np.sum(z * z, axis=0))
        return float(out[0]) if single else out

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        if size is None:
            return self.mean + self.chol @ rng.standard_normal(self.dim)
        return self.mean + rng.standard_normal((size, self.dim)) @ self.chol.T

    def marginal(self, idx) -> "GaussianApprox":
        idx = np.asarray(idx, dtype=int)
        return GaussianApprox(self.mean[idx], self.covariance[np.ix_(idx, idx)])

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianApprox":
        return cls(d["mean"], d["covariance"])

    def __repr__(self) -> str:
        return f"GaussianApprox(dim={self.dim}, mean={np.array2string(self.mean, precision=4)})"


def prior_gaussian(p: int, prior_var: float) -> GaussianApprox:
    """The isotropic ``N(0, prior_var I)`` prior as an approximation object."""
    return GaussianApprox(np.zeros(p), prior_var * np.eye(p))


def _jj_lambda(xi: np.ndarray) -> np.ndarray:
    # tanh(xi/2) / (4 xi), continuous at 0 with value 1/8
    xi = np.abs(xi)
    out = np.full_like(xi, 0.125)
    big = xi > 1e-6
    out[big] = np.tanh(xi[big] / 2.0) / (4.0 * xi[big])
    return out


def fit_vb_logistic(X, y, prior_var: float = 100.0, max_iter: int = 1000, tol: float = 1e-10,
                    return_trace: bool = False):
    """Gaussian variational posterior under the local quadratic bound.

    Each observation's ``log(1 + e^x)`` term is replaced by the tangent bound
    at ``xi_i``; for fixed ``xi`` the posterior is Gaussian, and the optimal
    ``xi_i^2`` is the posterior second moment of ``x_i' theta``.  The two
    updates alternate until the bound parameters stop moving.

    Parameters
    ----------
    X : ndarray (n, p)
    y : ndarray (n,) of 0/1
    prior_var : float
        Variance of the isotropic zero-mean Gaussian prior.
    return_trace : bool
        Also return the list of lower-bound values, one per iteration.

    Raises
    ------
    VBConvergenceError
        If ``max_iter`` is reached first.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    if n == 0:
        approx = prior_gaussian(p, prior_var)
        return (approx, []) if return_trace else approx
    prior_prec = np.eye(p) / prior_var
    b = X.T @ (y - 0.5)
    xi = np.ones(n)
    trace = []
    delta = np.inf
    for _ in range(max_iter):
        lam = _jj_lambda(xi)
        prec = prior_prec + 2.0 * (X.T * lam) @ X
        cf = linalg.cho_factor(prec, lower=True)
        mean = linalg.cho_solve(cf, b)
        cov = linalg.cho_solve(cf, np.eye(p))
        logdet_prec = 2.0 * np.sum(np.log(np.diag(cf[0])))
        bound = (
            -0.5 * logdet_prec - 0.5 * p * np.log(prior_var)
            + 0.5 * mean @ prec @ mean
            + np.sum(log_expit(xi) - xi / 2.0 + lam * xi * xi)
        )
        trace.append(float(bound))
        second = cov + np.outer(mean, mean)
        xi_new = np.sqrt(np.einsum("ij,jk,ik->i", X, second, X))
        delta = float(np.max(np.abs(xi_new - xi)))
        xi = xi_new
        if delta < tol:
            break
    else:
        raise VBConvergenceError("variational logistic fit did not converge", delta)
    # final Gaussian at the converged bound parameters
    lam = _jj_lambda(xi)
    prec = prior_prec + 2.0 * (X.T * lam) @ X
    cov = linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    approx = GaussianApprox(cov @ b, cov)
    return (approx, trace) if return_trace else approx


def fit_ml_logistic(X, y, prior_var: float | None = None, max_iter: int = 100, tol: float = 1e-10):
    """Newton-Raphson fit with the inverse observed information as covariance.

    With ``prior_var=None`` this is the maximum likelihood estimate; otherwise
    the MAP under ``N(0, prior_var I)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = X.shape
    if n == 0:
        raise ValueError("maximum likelihood is undefined without data")
    prior_prec = np.zeros((p, p)) if prior_var is None else np.eye(p) / prior_var
    theta = np.zeros(p)
    for _ in range(max_iter):
        mu = expit(X @ theta)
        grad = X.T @ (y - mu) - prior_prec @ theta
        hess = (X.T * (mu * (1.0 - mu))) @ X + prior_prec
        try:
            step = linalg.solve(hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError) as exc:
            raise SeparationError("information matrix became singular") from exc
        theta = theta + step
        if np.linalg.norm(theta) > 1e3:
            raise SeparationError("coefficient norm diverged; data look separable")
        if np.max(np.abs(step)) < tol:
            break
    else:
        raise SeparationError("Newton-Raphson did not converge; data may be separable")
    mu = expit(X @ theta)
    info = (X.T * (mu * (1.0 - mu))) @ X + prior_prec
    cov = linalg.inv(info)
    return GaussianApprox(theta, 0.5 * (cov + cov.T))


def perturb_approx(approx: GaussianApprox, variant: str, c: float = 1.0, shift: float = 0.0) -> GaussianApprox:
    """Diagonalized and rescaled copy of a Gaussian approximation.

    ``diag_shrink``: ``N(mu, diag(S) / c)``; ``diag_inflate``: ``N(mu, diag(S) * c)``;
    ``shift``: ``N(mu + shift, diag(S) / c)``.
    """
    if c <= 0:
        raise ValueError("scale c must be positive")
    d = np.diag(approx.covariance)
    if variant == "diag_shrink":
        return GaussianApprox(approx.mean, np.diag(d / c))
    if variant == "diag_inflate":
        return GaussianApprox(approx.mean, np.diag(d * c))
    if variant == "shift":
        return GaussianApprox(approx.mean + shift, np.diag(d / c))
    raise ValueError(f"unknown perturbation {variant!r}")
