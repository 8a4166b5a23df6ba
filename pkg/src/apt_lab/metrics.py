"""Distribution metrics for the synthetic tasks and the preference-score formula."""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from apt_lab.config import DataConfig
from apt_lab.data import mode_centers, normalization_for
from apt_lab.errors import InvalidInputError


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        raise InvalidInputError("expected an array of samples, got a scalar")
    return a.reshape(len(a), -1) if len(a) else a.reshape(0, int(np.prod(a.shape[1:])))


def _pair_sum(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    total = 0.0
    for i in range(0, len(a), chunk):
        total += cdist(a[i:i + chunk], b).sum()
    return total


def energy_distance(a, b) -> float:
    """Unbiased energy-distance statistic ``2E|A-B| - E|A-A'| - E|B-B'|``.

    The within-set terms average over distinct pairs only, so the estimate can
    dip slightly below zero when the two sets come from one distribution.
    """
    a, b = _as_2d(a), _as_2d(b)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("energy distance needs two non-empty sets")
    if len(a) < 2 or len(b) < 2:
        raise InvalidInputError("energy distance needs at least two points per set")
    n, m = len(a), len(b)
    cross = _pair_sum(a, b) / (n * m)
    within_a = _pair_sum(a, a) / (n * (n - 1))
    within_b = _pair_sum(b, b) / (m * (m - 1))
    return float(2 * cross - within_a - within_b)


def mode_coverage(samples, spec: DataConfig, min_fraction: float = 0.01) -> tuple[int, float]:
    """Count covered modes and the fraction of high-quality samples.

    A sample is high quality when it lies within ``3 * mode_std`` of its nearest
    mode center; a mode is covered when at least ``min_fraction`` of all samples
    are high quality and assigned to it. Checkerboard cells count as modes, with
    cell membership in place of the distance test.
    """
    if spec.kind not in ("gmm_ring", "checkerboard"):
        raise InvalidInputError(f"mode coverage needs a synthetic spec, got {spec.kind!r}")
    pts = normalization_for(spec).invert(_as_2d(samples)[:, :2])
    centers = mode_centers(spec)
    d = cdist(pts, centers)
    nearest = d.argmin(axis=1)
    if spec.kind == "gmm_ring":
        good = d[np.arange(len(pts)), nearest] <= 3 * spec.mode_std
    else:
        half = spec.extent / spec.grid
        good = (np.abs(pts - centers[nearest]) <= half).all(axis=1)
    counts = np.bincount(nearest[good], minlength=len(centers))
    covered = int((counts >= min_fraction * len(pts)).sum())
    return covered, float(good.mean()) if len(pts) else 0.0


class RandomFeatures:
    """Fixed seeded random projection followed by ``tanh``; a stand-in for a learned embedding."""

    def __init__(self, in_dim: int, out_dim: int = 32, seed: int = 0, scale: float = 1.0):
        rng = np.random.default_rng(seed)
        self.weight = rng.standard_normal((in_dim, out_dim)) * scale / np.sqrt(in_dim)
        self.bias = rng.uniform(-np.pi, np.pi, out_dim) * 0.5

    def __call__(self, x) -> np.ndarray:
        return np.tanh(_as_2d(x) @ self.weight + self.bias)


def _floor_psd(mat: np.ndarray, floor: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrize and floor the eigenvalues; returns ``(eigenvalues, eigenvectors)``."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return np.maximum(vals, floor), vecs


def sqrtm_product(cov_a: np.ndarray, cov_b: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    """A square root ``S`` of ``cov_a @ cov_b`` (``S @ S == cov_a @ cov_b``) for PSD inputs.

    ``S = A^{1/2} (A^{1/2} B A^{1/2})^{1/2} A^{-1/2}`` with eigenvalues floored at ``floor``.
    """
    vals_a, vecs_a = _floor_psd(cov_a, floor)
    root_a = (vecs_a * np.sqrt(vals_a)) @ vecs_a.T
    inv_root_a = (vecs_a / np.sqrt(vals_a)) @ vecs_a.T
    vals, vecs = np.linalg.eigh(root_a @ cov_b @ root_a)
    inner = (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
    return root_a @ inner @ inv_root_a


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b, floor: float = 1e-10) -> float:
    diff = np.asarray(mu_a, dtype=np.float64) - np.asarray(mu_b, dtype=np.float64)
    vals_a, vecs_a = _floor_psd(np.atleast_2d(cov_a), floor)
    vals_b, vecs_b = _floor_psd(np.atleast_2d(cov_b), floor)
    root_a = (vecs_a * np.sqrt(vals_a)) @ vecs_a.T
    root_b = (vecs_b * np.sqrt(vals_b)) @ vecs_b.T
    # tr((A B)^{1/2}) is the nuclear norm of A^{1/2} B^{1/2}; singular values avoid squaring small eigenvalues
    tr_cross = np.linalg.svd(root_a @ root_b, compute_uv=False).sum()
    return float(diff @ diff + vals_a.sum() + vals_b.sum() - 2 * tr_cross)


def feature_frechet(a, b, feature_extractor: Callable | None = None) -> float:
    """Fréchet distance between Gaussian fits of extracted features."""
    a, b = _as_2d(a), _as_2d(b)
    if feature_extractor is None:
        feature_extractor = RandomFeatures(a.shape[1])
    fa, fb = _as_2d(feature_extractor(a)), _as_2d(feature_extractor(b))
    dim = fa.shape[1]
    if dim < 2:
        raise InvalidInputError("feature dimension must be >= 2")
    if len(fa) <= dim or len(fb) <= dim:
        raise InvalidInputError("each set must be larger than the feature dimension")
    return frechet_from_stats(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def preference_score(good: int, similar: int, bad: int) -> float:
    """``(G - B) / (G + S + B)`` in [-1, 1]."""
    if min(good, similar, bad) < 0:
        raise InvalidInputError("counts must be non-negative")
    total = good + similar + bad
    if total == 0:
        raise InvalidInputError("at least one count must be positive")
    return (good - bad) / total
