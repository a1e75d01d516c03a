"""Evaluation measures: flatness, predictive entropy, AUROC, NLL and accuracy.

Entropies use the natural logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .numerics import RngStream

NLL_CLAMP = 1e-12
PROB_TOL = 1e-6


@dataclass
class FlatnessPoint:
    sigma_z: float
    mean: float
    std: float
    n_samples: int

    @property
    def stderr(self):
        return self.std / np.sqrt(self.n_samples) if self.n_samples > 1 else 0.0


@dataclass
class FlatnessCurve:
    points: list = field(default_factory=list)

    def rows(self):
        return [(p.sigma_z, p.mean, p.std, p.n_samples) for p in self.points]


def flatness_score(loss_at, w, sigma_z, n_samples, rng: RngStream, base_loss=None):
    """Monte-Carlo ``E_z[L(w + z) - L(w)]`` with ``z_i ~ N(0, (w_i sigma_z)^2)``.

    Returns ``(mean, std)`` where ``std`` is the sample standard deviation of
    the per-draw increments (divide by ``sqrt(n_samples)`` for a standard error).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if sigma_z < 0:
        raise ValueError("sigma_z must be nonnegative")
    w = np.asarray(w, dtype=np.float64)
    if sigma_z == 0:
        return 0.0, 0.0
    ref = float(loss_at(w)) if base_loss is None else float(base_loss)
    deltas = np.empty(n_samples)
    for s in range(n_samples):
        z = rng.normal(w.shape) * (w * sigma_z)
        value = float(loss_at(w + z))
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at flatness sample {s}")
        deltas[s] = value - ref
    std = float(deltas.std(ddof=1)) if n_samples > 1 else 0.0
    return float(deltas.mean()), std


def flatness_curve(loss_at, w, sigmas, n_samples, rng: RngStream) -> FlatnessCurve:
    """Flatness over a grid of ``sigma_z``; grid point ``j`` uses ``rng.child(j)``.

    Reusing the same ``rng`` for two models gives common random numbers.
    """
    sigmas = [float(s) for s in sigmas]
    if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigma_z values must be strictly increasing")
    w = np.asarray(w, dtype=np.float64)
    ref = float(loss_at(w))
    curve = FlatnessCurve()
    for j, s in enumerate(sigmas):
        mean, std = flatness_score(loss_at, w, s, n_samples, rng.child(j), base_loss=ref)
        curve.points.append(FlatnessPoint(s, mean, std, n_samples if s > 0 else 0))
    return curve


def _check_distribution(probs, axis=-1):
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise DataError("probabilities must be finite and nonnegative")
    if np.any(np.abs(probs.sum(axis=axis) - 1.0) > PROB_TOL):
        raise DataError("probabilities must sum to 1")


def predictive_entropy(probs):
    """Shannon entropy ``-sum p ln p`` with ``0 ln 0 = 0``.

    A distribution that is uniform over its support returns ``ln(support)``
    directly, avoiding the rounding of ``1/C`` in the summed form.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DataError("expected a nonempty probability vector")
    _check_distribution(p)
    nz = p[p > 0]
    if np.all(nz == nz[0]):
        return float(np.log(nz.size))
    return float(-np.sum(nz * np.log(nz)))


def entropy_batch(probs):
    """Row-wise entropies of an ``(N, C)`` probability matrix."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise DataError("expected an (N, C) probability matrix")
    _check_distribution(p, axis=1)
    logs = np.log(np.where(p > 0, p, 1.0))
    out = -np.sum(p * logs, axis=1)
    support = np.count_nonzero(p > 0, axis=1)
    peak = p.max(axis=1)
    flat = np.all((p == 0) | (p == peak[:, None]), axis=1)
    out[flat] = np.log(support[flat])
    return out


@dataclass
class RocResult:
    auroc: float
    n_pos: int
    n_neg: int
    ties: int


def auroc(scores_positive, scores_negative) -> RocResult:
    """Mann-Whitney AUROC: ``(#pos > neg + ties / 2) / (n_pos n_neg)``.

    Pair counts are exact integers. Values above one half are formed as one
    minus the complementary ratio, which makes ``auroc(a, b) + auroc(b, a)``
    equal 1 exactly in floating point.
    """
    pos = np.asarray(scores_positive, dtype=np.float64).ravel()
    neg = np.sort(np.asarray(scores_negative, dtype=np.float64).ravel())
    if pos.size == 0 or neg.size == 0:
        raise DataError("auroc needs nonempty positive and negative score lists")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise DataError("scores must be finite")
    below = np.searchsorted(neg, pos, side="left")
    below_or_equal = np.searchsorted(neg, pos, side="right")
    greater = int(below.sum())
    ties = int((below_or_equal - below).sum())
    total = pos.size * neg.size
    numer = 2 * greater + ties
    if numer <= total:
        value = numer / (2 * total)
    else:
        value = 1.0 - (2 * total - numer) / (2 * total)
    return RocResult(float(value), int(pos.size), int(neg.size), ties)


@dataclass
class NllAccuracy:
    nll: float
    accuracy: float
    clamped: int


def nll_and_accuracy(probs, labels) -> NllAccuracy:
    """Mean negative log-likelihood and argmax accuracy (lowest index wins ties).

    Zero probabilities on the true label are clamped to ``NLL_CLAMP`` and
    counted in ``clamped``.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or p.shape[0] == 0 or y.shape != (p.shape[0],):
        raise DataError(f"probabilities {p.shape} do not match labels {y.shape}")
    _check_distribution(p, axis=1)
    if np.any((y < 0) | (y >= p.shape[1])):
        raise DataError("labels out of range")
    picked = p[np.arange(len(y)), y]
    clamped = int(np.count_nonzero(picked < NLL_CLAMP))
    nll = float(-np.mean(np.log(np.maximum(picked, NLL_CLAMP))))
    acc = float(np.mean(np.argmax(p, axis=1) == y))
    return NllAccuracy(nll, acc, clamped)
