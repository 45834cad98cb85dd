"""k-nearest-neighbour mutual information between fused latents and an outcome."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma

JITTER = 1e-10


class DegenerateSamples(ValueError):
    """The samples carry no usable variation (for example a constant outcome)."""


def pca_reduce(z: np.ndarray, d: int) -> np.ndarray:
    """Project centred rows of ``z`` onto their top ``d`` principal directions."""
    z = np.asarray(z, dtype=np.float64)
    centred = z - z.mean(axis=0)
    if d >= z.shape[1]:
        return centred
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    return centred @ vt[:d].T


def _standardise(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    std = x.std(axis=0)
    keep = std > 0
    x = (x[:, keep] - x[:, keep].mean(axis=0)) / std[keep]
    # break distance ties from repeated values without moving the estimate
    return x + JITTER * rng.standard_normal(x.shape)


def ksg_mi(x: np.ndarray, y: np.ndarray, k: int = 3) -> float:
    """Kraskov-Stogbauer-Grassberger estimator (first variant) in nats.

    Neighbourhoods use the max-norm in the joint space; marginal counts are
    of points strictly closer than the k-th joint neighbour.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    n = x.shape[0]
    joint = np.hstack([x, y])
    eps = cKDTree(joint).query(joint, k=k + 1, p=np.inf)[0][:, k]
    radius = np.nextafter(eps, 0.0)
    nx = cKDTree(x).query_ball_point(x, radius, p=np.inf, return_length=True) - 1
    ny = cKDTree(y).query_ball_point(y, radius, p=np.inf, return_length=True) - 1
    return float(digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1)))


def estimate_mi(z_samples, y_samples, k: int = 3, d_reduce: int = 8, seed: int = 0) -> float:
    """``I(z; y)`` in nats after a PCA reduction of ``z``, clamped at zero."""
    z = np.asarray(z_samples, dtype=np.float64)
    y = np.asarray(y_samples, dtype=np.float64).reshape(-1)
    if z.ndim == 1:
        z = z[:, None]
    n = z.shape[0]
    if y.shape[0] != n:
        raise ValueError(f"{n} latent samples but {y.shape[0]} outcomes")
    if n < 2 * k + 2:
        raise ValueError(f"need at least {2 * k + 2} samples for k={k}, got {n}")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
        raise ValueError("samples must be finite")
    if np.ptp(y) == 0.0:
        raise DegenerateSamples("outcome has zero variance")
    rng = np.random.default_rng(seed)
    reduced = pca_reduce(z, d_reduce)
    if np.all(reduced.std(axis=0) == 0.0):
        return 0.0
    zs = _standardise(reduced, rng)
    ys = _standardise(y[:, None], rng)
    return max(0.0, ksg_mi(zs, ys, k))


def gaussian_mi(rho: float) -> float:
    """Closed-form MI of a bivariate normal with correlation ``rho``."""
    return -0.5 * float(np.log1p(-rho * rho))
