"""Dense linear algebra, splittable random streams and gradient checking.

All arrays are float64 numpy arrays. Functions validate shapes and refuse to
return non-finite results.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DimensionError, NumericalError

# Denominator floor for symmetric relative errors. Central differences at
# h=1e-4 resolve gradients only to ~1e-12 absolute, so components smaller than
# the floor are effectively compared in absolute terms.
REL_ERROR_DELTA = 1e-8
MAX_KRON_ELEMENTS = 2**31
DEFAULT_COND_CAP = 1e12


def as_vector(x, name="vector"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def as_matrix(a, name="matrix"):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericalError(f"{name} contains {bad} non-finite value(s)")
    return arr


class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Backed by numpy's ``SeedSequence`` so that children obtained with
    :meth:`child` are statistically independent of each other and of the
    parent, and do not depend on the order in which they are created.
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        if isinstance(stream_id, (int, np.integer)):
            stream_id = (int(stream_id),)
        self.seed = int(seed)
        self.path: tuple[int, ...] = tuple(int(s) for s in stream_id)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    @property
    def stream_id(self):
        return self.path

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(k) for k in key))

    def split(self, n: int) -> list["RngStream"]:
        return [self.child(i) for i in range(n)]

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def get_state(self) -> dict:
        return {"seed": self.seed, "path": list(self.path),
                "bit_generator": self.generator.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        stream = cls(state["seed"], tuple(state["path"]))
        stream.generator.bit_generator.state = state["bit_generator"]
        return stream

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.path})"


def gaussian_sample(rng: RngStream, mean, cov_factor):
    """Draw ``mean + L z`` with ``z`` standard normal and ``L = cov_factor``."""
    mean = as_vector(mean, "mean")
    factor = as_matrix(cov_factor, "cov_factor")
    if factor.shape[0] != mean.shape[0]:
        raise DimensionError(
            f"cov_factor has {factor.shape[0]} rows, mean has length {mean.shape[0]}")
    z = rng.normal(factor.shape[1])
    return mean + factor @ z


def sqrt_factor(cov):
    """Symmetric square root of a PSD matrix via eigendecomposition."""
    cov = as_matrix(cov, "covariance")
    if cov.shape[0] != cov.shape[1]:
        raise DimensionError("covariance must be square")
    if np.allclose(cov, np.diag(np.diag(cov)), rtol=0, atol=0):
        d = np.diag(cov)
        if np.any(d < 0):
            raise NumericalError("covariance has negative diagonal entries")
        return np.diag(np.sqrt(d))
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    scale = max(1.0, float(np.max(np.abs(vals))))
    if vals.min() < -1e-10 * scale:
        raise NumericalError(f"covariance is not PSD (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def kron(a, b):
    """Kronecker product with a guard against absurd result sizes."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows * cols > MAX_KRON_ELEMENTS:
        raise NumericalError(f"kron result shape ({rows}, {cols}) is too large")
    return np.kron(a, b)


def solve_linear(a, b, cond_cap: float = DEFAULT_COND_CAP):
    """Solve ``a x = b`` for square, well-conditioned ``a``.

    Raises NumericalError carrying the condition estimate when it exceeds
    ``cond_cap``.
    """
    a = as_matrix(a, "a")
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"a must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionError(f"b has leading size {b.shape[0]}, expected {a.shape[0]}")
    check_finite(b, "b")
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > cond_cap:
        err = NumericalError(f"matrix is singular or ill-conditioned (cond ~ {cond:.3e})")
        err.condition = cond
        raise err
    return np.linalg.solve(a, b)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5):
    """Central-difference gradient of a scalar field."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    argmax: int
    h: float
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None

    def passed(self, tol):
        return self.max_rel_error < tol


def relative_error(a, b, delta: float = REL_ERROR_DELTA):
    """Elementwise ``|a - b| / (|a| + |b| + delta)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / (np.abs(a) + np.abs(b) + delta)


def check_gradient(f, grad, x, h: float = 1e-5) -> FiniteDiffReport:
    """Compare an analytic gradient against central differences at ``x``."""
    numeric = finite_diff_grad(f, x, h).reshape(-1)
    analytic = np.asarray(grad, dtype=np.float64).reshape(-1)
    if analytic.shape != numeric.shape:
        raise DimensionError(f"gradient has {analytic.size} entries, x has {numeric.size}")
    if analytic.size == 0:
        return FiniteDiffReport(0.0, -1, h, analytic, numeric)
    err = relative_error(analytic, numeric)
    i = int(np.argmax(err))
    return FiniteDiffReport(float(err[i]), i, h, analytic, numeric)


def save_matrix_csv(a, path):
    """One row per line, shortest round-trip decimal, no header."""
    a = as_matrix(a)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in a:
            writer.writerow([repr(float(v)) for v in row])


def load_matrix_csv(path):
    rows = []
    with open(Path(path), newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DimensionError(f"{path}:{lineno}: {exc}") from None
    if rows and len({len(r) for r in rows}) != 1:
        raise DimensionError(f"{path}: ragged rows")
    return as_matrix(np.array(rows, dtype=np.float64).reshape(len(rows), -1))
