"""Class-similarity prior and Dirichlet sampling of target softmax vectors.

All randomness comes from ``numpy.random.Generator`` (PCG64 bit generator);
callers pass a seeded generator in, nothing here touches global state.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateTemplateError, DimensionError, ParameterError

EPS_FLOOR = 1e-2


@dataclass(frozen=True)
class SimilarityMatrix:
    raw: np.ndarray
    normalized: np.ndarray
    eps_floor: float = EPS_FLOOR

    @property
    def K(self) -> int:
        return self.raw.shape[0]

    def to_csv(self, path, which: str = "normalized") -> Path:
        mat = {"raw": self.raw, "normalized": self.normalized}[which]
        path = Path(path)
        path.write_text("\n".join(",".join(f"{v:.17g}" for v in row) for row in mat) + "\n")
        return path


@dataclass(frozen=True)
class ConcentrationVector:
    alpha: np.ndarray
    class_index: int
    beta: float

    def __post_init__(self):
        if not np.all(self.alpha > 0):
            raise ParameterError("concentration entries must be strictly positive")


def cosine_similarity_matrix(templates: np.ndarray) -> np.ndarray:
    """Cosine similarity between the columns of ``templates`` (features x K)."""
    w = np.asarray(templates, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionError(f"templates must be 2-D, got shape {w.shape}")
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms == 0):
        raise DegenerateTemplateError(f"zero-norm template for classes {np.flatnonzero(norms == 0).tolist()}")
    unit = w / norms
    sim = unit.T @ unit
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def normalize_rows(raw: np.ndarray, eps_floor: float = EPS_FLOOR) -> np.ndarray:
    """Row-wise min-max scaling to [0, 1], then flooring at ``eps_floor``.

    A constant row (all classes equally similar) maps to all ones.
    """
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min(axis=1, keepdims=True)
    span = raw.max(axis=1, keepdims=True) - lo
    flat = span[:, 0] == 0
    span[flat] = 1.0
    out = (raw - lo) / span
    out[flat] = 1.0
    return np.maximum(out, eps_floor)


def class_similarity(teacher, eps_floor: float = EPS_FLOOR) -> SimilarityMatrix:
    """Similarity prior from the teacher's final-layer weight columns (bias excluded)."""
    templates = teacher.class_templates() if hasattr(teacher, "class_templates") else teacher
    raw = cosine_similarity_matrix(templates)
    return SimilarityMatrix(raw, normalize_rows(raw, eps_floor), eps_floor)


def uniform_prior(K: int) -> SimilarityMatrix:
    if K < 2:
        raise ParameterError(f"need at least 2 classes, got {K}")
    ones = np.ones((K, K))
    return SimilarityMatrix(ones, ones.copy(), 0.0)


def concentration(sim: SimilarityMatrix, k: int, beta: float) -> ConcentrationVector:
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if not 0 <= k < sim.K:
        raise ParameterError(f"class index {k} outside [0, {sim.K})")
    return ConcentrationVector(beta * sim.normalized[k], int(k), float(beta))


def log_gamma_sample(alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """log of Gamma(alpha, 1) draws, elementwise over ``alpha``.

    Marsaglia-Tsang squeeze/rejection for shape >= 1. Shapes below 1 are
    drawn at ``alpha + 1`` and multiplied by ``U ** (1 / alpha)``, carried in
    log space so tiny shapes cannot underflow to an all-zero vector.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.all(alpha > 0):
        raise ParameterError("gamma shape must be strictly positive")
    flat = alpha.ravel()
    small = flat < 1
    shape = np.where(small, flat + 1.0, flat)
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(flat)
    pending = np.arange(flat.size)
    while pending.size:
        dd, cc = d[pending], c[pending]
        x = rng.standard_normal(pending.size)
        u = rng.random(pending.size)
        v = (1.0 + cc * x) ** 3
        pos = v > 0
        logv = np.log(np.where(pos, v, 1.0))
        accept = pos & ((u < 1.0 - 0.0331 * x ** 4) |
                        (np.log(u) < 0.5 * x * x + dd * (1.0 - v + logv)))
        out[pending[accept]] = np.log(dd[accept]) + logv[accept]
        pending = pending[~accept]
    if small.any():
        idx = np.flatnonzero(small)
        out[idx] += np.log(rng.random(idx.size)) / flat[idx]
    return out.reshape(alpha.shape)


def dirichlet_sample(alpha, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from Dir(alpha) by normalising independent gamma variates.

    Returns a length-K probability vector, or ``size x K`` when ``size`` is given.
    """
    a = alpha.alpha if isinstance(alpha, ConcentrationVector) else np.asarray(alpha, dtype=np.float64)
    if a.ndim != 1 or a.size < 2:
        raise DimensionError(f"alpha must be a vector of length >= 2, got shape {a.shape}")
    if not np.all(a > 0):
        raise ParameterError("Dirichlet concentration must be strictly positive")
    n = 1 if size is None else int(size)
    logg = log_gamma_sample(np.broadcast_to(a, (n, a.size)), rng)
    logg -= logg.max(axis=1, keepdims=True)
    g = np.exp(logg)
    out = g / g.sum(axis=1, keepdims=True)
    return out[0] if size is None else out


def dirichlet_moments(alpha) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form component means and variances of Dir(alpha)."""
    a = np.asarray(alpha, dtype=np.float64)
    a0 = a.sum()
    mean = a / a0
    var = a * (a0 - a) / (a0 ** 2 * (a0 + 1))
    return mean, var
