"""Time-specific additive attention masks and the bounded attention op.

Masks are dense float arrays holding ``0.0`` where a query may attend to a
key and ``-inf`` where it may not.  Rows index latent pixels (flattened
``r * W + c``); columns index prompt tokens (cross) or pixels (self).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import RoleConflict, ShapeMismatch
from .numerics import autodiff as ad
from .scene import box_mask

NEG_INF = -np.inf


class MaskMode(str, enum.Enum):
    GUIDANCE = "guidance"
    DENOISING = "denoising"


@dataclass
class SubjectMasks:
    """Per-subject boolean pixel masks on the latent grid."""

    masks: np.ndarray  # (n, H, W) bool
    provenance: str = "coarse-box"  # or "refined-cluster"

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise ShapeMismatch(f"expected (n, H, W) masks, got {self.masks.shape}")
        empty = [i for i in range(len(self.masks)) if not self.masks[i].any()]
        if empty:
            raise ValueError(f"subject mask(s) {empty} are empty")

    @property
    def n(self):
        return self.masks.shape[0]

    @property
    def shape(self):
        return self.masks.shape[1:]

    @property
    def flat(self):
        return self.masks.reshape(self.n, -1)

    @property
    def union(self):
        return self.masks.any(axis=0)

    @property
    def background(self):
        return ~self.union

    def pixel_sets(self):
        return [set(np.flatnonzero(m).tolist()) for m in self.flat]

    def copy(self):
        return SubjectMasks(self.masks.copy(), self.provenance)


@dataclass
class AttentionRecord:
    """One head of one attention layer; arrays drop the batch axis when B == 1."""

    layer: int
    head: int
    kind: str  # "self" | "cross"
    q: np.ndarray
    k: np.ndarray
    logits: np.ndarray
    mask: np.ndarray | None
    attn: np.ndarray
    node: object = None  # tape Var of the whole (B, heads, N, M) map, if taped


def coarse_masks(scene, H=None, W=None) -> SubjectMasks:
    H = scene.latent_height if H is None else H
    W = scene.latent_width if W is None else W
    return SubjectMasks(np.stack([box_mask(s.box, H, W) for s in scene.subjects]), "coarse-box")


def token_owner(scene):
    """Map token index -> subject index, raising on shared tokens."""
    owner = {}
    for i, s in enumerate(scene.subjects):
        for j in s.token_indices:
            if j in owner and owner[j] != i:
                raise RoleConflict(f"token {j} belongs to subjects {owner[j]} and {i}")
            owner[j] = i
    return owner


def build_cross_mask(scene, masks: SubjectMasks, mode=MaskMode.DENOISING, dtype=np.float64):
    mode = MaskMode(mode)
    n_tok = len(scene.tokens)
    flat = masks.flat
    hw = flat.shape[1]
    bg = masks.background.reshape(-1)
    union = ~bg
    owner = token_owner(scene)
    allowed = np.ones((hw, n_tok), dtype=bool)
    for j, tok in enumerate(scene.tokens):
        if tok.role == "excluded":
            allowed[:, j] = False
        elif tok.role == "eot":
            allowed[:, j] = union
        elif j in owner:
            own = flat[owner[j]]
            allowed[:, j] = own | bg if mode is MaskMode.GUIDANCE else own
    return np.where(allowed, 0.0, NEG_INF).astype(dtype)


def build_self_mask(masks: SubjectMasks, dtype=np.float64):
    flat = masks.flat.astype(np.int64)
    bg = masks.background.reshape(-1)
    # a query may see keys sharing any of its subjects (overlaps count as own),
    # background keys, and everything if it is itself background
    shared = (flat.T @ flat) > 0
    allowed = shared | bg[None, :] | bg[:, None]
    return np.where(allowed, 0.0, NEG_INF).astype(dtype)


def permissive_cross_mask(hw, n_tokens, dtype=np.float64):
    return np.zeros((hw, n_tokens), dtype=dtype)


def attend(q, k, v, mask=None):
    """Return ``(output, logits, attn)``; works on arrays and tape variables."""
    d = ad.value(q).shape[-1]
    logits = ad.matmul(q, ad.transpose(k, _swap_last(ad.value(k).ndim))) * (1.0 / np.sqrt(d))
    attn = ad.masked_softmax(logits, mask)
    return ad.matmul(attn, v), logits, attn


def bounded_attention(q, k, v, mask=None, record=False, layer=0, head=0, kind="cross"):
    """``masked_softmax(q k^T / sqrt(d) + mask) v``.

    ``q`` is (..., Nq, d), ``k`` and ``v`` are (..., Nk, d).
    """
    out, logits, attn = attend(q, k, v, mask)
    rec = None
    if record:
        rec = AttentionRecord(layer, head, kind, ad.value(q), ad.value(k), ad.value(logits), mask,
                              ad.value(attn), attn if isinstance(attn, ad.Var) else None)
    return out, rec


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes
