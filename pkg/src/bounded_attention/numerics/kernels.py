"""Plain numpy kernels shared by every module."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import AllMaskedRow, DegenerateData, ZeroMass


def masked_softmax(logits, mask=None):
    """Row softmax of ``logits + mask`` over the last axis.

    ``mask`` holds 0 or -inf and broadcasts against ``logits``.  Positions
    carrying -inf come out as exact zeros because ``exp(-inf) == 0.0``.
    """
    x = np.asarray(logits)
    if mask is not None:
        x = x + mask
    m = x.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        bad = np.argwhere(~np.isfinite(m[..., 0]))
        raise AllMaskedRow(f"{len(bad)} row(s) have no finite entry, first at {tuple(bad[0])}")
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def l1_normalize(v):
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("l1_normalize expects non-negative entries")
    total = v.sum()
    if total == 0:
        raise ZeroMass("cannot normalize a map with zero mass")
    return v / total


@dataclass
class Pca2Result:
    projections: np.ndarray  # (N, 2)
    components: np.ndarray  # (2, D), rows orthonormal
    explained_variance_ratio: np.ndarray  # (2,)
    mean: np.ndarray


def _fix_sign(vec, tol=1e-12):
    nz = np.flatnonzero(np.abs(vec) > tol)
    if len(nz) and vec[nz[0]] < 0:
        return -vec
    return vec


def pca2(points) -> Pca2Result:
    """Project onto the two leading principal axes via an exact eigendecomposition."""
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError(f"pca2 needs N >= 3 points of dimension >= 2, got {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    if not np.any(cov):
        raise DegenerateData("covariance is identically zero")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    comps = np.stack([_fix_sign(evecs[:, 0]), _fix_sign(evecs[:, 1])])
    ratio = evals[:2] / evals.sum()
    proj = xc @ comps.T
    return Pca2Result(proj, comps, ratio, mu)
