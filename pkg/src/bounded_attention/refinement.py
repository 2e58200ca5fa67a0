"""Subject-mask refinement by clustering self-attention rows.

Each pixel's averaged self-attention row is a feature vector.  KMeans groups
the pixels; each cluster is labelled with the subject whose soft
cross-attention mask overlaps it most (intersection over minimum), or left
as background when that overlap is below ``sigma_cluster``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bounded import SubjectMasks
from .errors import NoRecords, ZeroMass
from .numerics import l1_normalize, sigmoid


@dataclass
class RefinementConfig:
    s: float = 10.0
    sigma_noun: float = 0.2
    sigma_cluster: float = 0.2
    clusters_per_subject: int = 3
    interval: int = 5
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-8
    robust_layers: tuple | None = None  # None -> attention layers of the deepest block
    binarize_cross: bool = True  # label clusters against the above-uniform support of each soft mask
    seed: int = 0

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("s must be positive")
        for name in ("sigma_noun", "sigma_cluster"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.clusters_per_subject < 1:
            raise ValueError("clusters_per_subject must be >= 1")

    def layers_for(self, n_blocks):
        if self.robust_layers is not None:
            return tuple(self.robust_layers)
        return (2 * (n_blocks - 1), 2 * (n_blocks - 1) + 1)


@dataclass
class ClusterResult:
    assignment: np.ndarray  # (N,) cluster id per pixel
    centers: np.ndarray  # (K, D)
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0

    def indicators(self):
        K = len(self.centers)
        return np.stack([self.assignment == k for k in range(K)])


def self_attention_features(records, robust_layers=None):
    """Per-pixel self-attention rows averaged over heads and the chosen layers."""
    sel = [r for r in records if r.kind == "self" and (robust_layers is None or r.layer in robust_layers)]
    if not sel:
        raise NoRecords("no self-attention records for the selected layers")
    return np.mean([np.asarray(r.attn, dtype=np.float64) for r in sel], axis=0)


def noun_cross_maps(records, scene, robust_layers=None):
    """(n, HW) cross-attention map of each subject's last token, head/layer averaged."""
    sel = [r for r in records if r.kind == "cross" and (robust_layers is None or r.layer in robust_layers)]
    if not sel:
        raise NoRecords("no cross-attention records for the selected layers")
    mean = np.mean([np.asarray(r.attn, dtype=np.float64) for r in sel], axis=0)
    return np.stack([mean[:, s.noun_index] for s in scene.subjects])


def _sq_dists(x, centers):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, K, rng):
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    d = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, K):
        total = d.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d / total))
        centers.append(x[idx])
        d = np.minimum(d, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans(features, K, init_centers=None, seed=0, max_iters=100, tol=1e-8) -> ClusterResult:
    """Lloyd iterations with squared Euclidean distance.

    Seeds from ``init_centers`` when given, else k-means++ drawn from
    ``seed``.  An emptied cluster is moved onto the point farthest from its
    current centre.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if not 1 <= K <= n:
        raise ValueError(f"K={K} must lie in [1, {n}]")
    if init_centers is not None:
        centers = np.array(init_centers, dtype=np.float64)
        if centers.shape != (K, x.shape[1]):
            raise ValueError(f"init_centers shape {centers.shape} != {(K, x.shape[1])}")
    else:
        centers = _kmeans_pp(x, K, np.random.default_rng(seed))

    history = []
    assign = None
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centers)
        assign = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), assign].sum()))
        new = centers.copy()
        for k in range(K):
            members = assign == k
            if members.any():
                new[k] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(d[np.arange(n), assign]))
                new[k] = x[far]
                assign[far] = k
        shift = float(np.max(np.sum((new - centers) ** 2, axis=1)))
        centers = new
        if shift < tol:
            break
    d = _sq_dists(x, centers)
    final = np.argmin(d, axis=1)
    # keep the reported assignment consistent with the returned centres
    if not np.array_equal(final, assign):
        assign = final
        history.append(float(d[np.arange(n), assign].sum()))
    return ClusterResult(assign, centers, history, it)


def cross_attention_masks(attn_map, s=10.0, sigma_noun=0.2):
    """``norm(sigmoid(s * norm(A) - sigma_noun))`` with L1 ``norm``."""
    a = np.asarray(attn_map, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("attention map must be non-negative")
    if a.sum() == 0:
        raise ZeroMass("attention map has zero mass")
    return l1_normalize(sigmoid(s * l1_normalize(a) - sigma_noun))


def iom(mask, cluster):
    """Intersection over minimum of a non-negative map and an indicator map."""
    m = np.asarray(mask, dtype=np.float64)
    c = np.asarray(cluster, dtype=np.float64)
    denom = min(m.sum(), c.sum())
    if denom <= 0:
        raise ZeroMass("iom needs two maps with positive mass")
    return float((m * c).sum() / denom)


def binarize(mask):
    """Pixels whose soft-mask weight exceeds the uniform level ``1 / N``."""
    m = np.asarray(mask, dtype=np.float64)
    return m > m.sum() / m.size


def assign_clusters(cluster_indicators, cross_masks, sigma_cluster=0.2, coarse=None, binarize_cross=True):
    """Label clusters with subjects and return refined, disjoint masks.

    ``cluster_indicators`` is (K, HW) boolean, ``cross_masks`` (n, HW).
    A subject that wins no cluster falls back to its coarse box minus pixels
    already claimed by other subjects.  Returns ``(SubjectMasks, labels)``
    where ``labels[j]`` is the subject of cluster ``j`` or -1 for background.
    """
    C = np.asarray(cluster_indicators, dtype=bool)
    M = np.asarray(cross_masks, dtype=np.float64)
    if binarize_cross:
        M = np.stack([binarize(m) for m in M]).astype(np.float64)
    n = len(M)
    labels = np.full(len(C), -1)
    for j, c in enumerate(C):
        if not c.any():
            continue
        scores = [iom(M[i], c) if M[i].sum() > 0 else 0.0 for i in range(n)]
        best = int(np.argmax(scores))
        if scores[best] >= sigma_cluster:
            labels[j] = best
    refined = np.zeros((n, C.shape[1]), dtype=bool)
    for j, lab in enumerate(labels):
        if lab >= 0:
            refined[lab] |= C[j]
    if coarse is not None:
        shape = coarse.shape
        coarse_flat = coarse.flat
    else:
        side = int(round(np.sqrt(C.shape[1])))
        shape = (side, C.shape[1] // side)
        coarse_flat = None
    for i in range(n):
        if refined[i].any():
            continue
        if coarse_flat is None:
            raise ValueError(f"subject {i} won no cluster and no coarse masks were given")
        claimed = refined.any(axis=0)
        fallback = coarse_flat[i] & ~claimed
        refined[i] = fallback if fallback.any() else coarse_flat[i]
    return SubjectMasks(refined.reshape((n,) + tuple(shape)), "refined-cluster"), labels


def is_refinement_step(step_index, start_step, interval):
    return step_index >= start_step and (step_index - start_step) % interval == 0


def refine(step_index, records, scene, prev: SubjectMasks, prev_centers=None, config=None,
           coarse: SubjectMasks | None = None, start_step=0, n_blocks=None):
    """One refinement pass; a no-op returning ``(prev, prev_centers)`` off-cadence."""
    config = config or RefinementConfig()
    if not is_refinement_step(step_index, start_step, config.interval):
        return prev, prev_centers
    if n_blocks is None:
        n_blocks = 1 + max(r.layer for r in records) // 2
    layers = config.layers_for(n_blocks)
    feats = self_attention_features(records, layers)
    K = min(config.clusters_per_subject * scene.n_subjects, len(feats))
    init = prev_centers if prev_centers is not None and len(prev_centers) == K else None
    clusters = kmeans(feats, K, init, seed=config.seed, max_iters=config.kmeans_max_iters, tol=config.kmeans_tol)
    cross = np.stack([cross_attention_masks(a, config.s, config.sigma_noun)
                      for a in noun_cross_maps(records, scene, layers)])
    masks, _ = assign_clusters(clusters.indicators(), cross, config.sigma_cluster,
                               coarse if coarse is not None else prev, config.binarize_cross)
    return masks, clusters.centers
