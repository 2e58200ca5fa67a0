"""Bounded Guidance: per-subject attention-localisation loss and latent descent.

For subject ``i`` with context set ``C_i`` and pixel box ``b_i``::

    inside_i  = sum_{x in b_i,     c in C_i} A[x, c]
    outside_i = sum_{x not in b_i, c in C_i} A[x, c]
    L_i       = 1 - inside_i / (inside_i + alpha * outside_i)

and the latent moves along ``-beta * grad_z sum_i L_i^2``.  Cross- and
self-attention maps share one key axis: columns ``[0, T)`` are prompt tokens
and columns ``[T, T + HW)`` are latent pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bounded import MaskMode, build_cross_mask, build_self_mask
from .errors import EmptySubject, NonFiniteGradient
from .numerics import Tape
from .numerics import autodiff as ad


@dataclass
class GuidanceConfig:
    alpha: float | None = None  # None -> number of subjects
    iterations: int = 5
    beta_start: float = 6.0
    beta_end: float = 1.5
    early_stop: float = 0.2
    t_guidance: float = 0.7
    loss_layers: tuple | None = None  # None -> every attention layer

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.beta_start >= self.beta_end > 0:
            raise ValueError("need beta_start >= beta_end > 0")
        if not 0 < self.t_guidance <= 1:
            raise ValueError("t_guidance must lie in (0, 1]")

    def alpha_for(self, n_subjects):
        return float(n_subjects) if self.alpha is None else float(self.alpha)


@dataclass
class LossReport:
    losses: np.ndarray
    inside: np.ndarray
    outside: np.ndarray
    alpha: float
    objective_node: object = field(default=None, repr=False)

    @property
    def mean(self):
        return float(np.mean(self.losses))

    @property
    def objective(self):
        """The descent objective, ``sum_i L_i^2``."""
        return float(np.sum(self.losses ** 2))

    def to_dict(self):
        return {
            "losses": [float(v) for v in self.losses],
            "mean": self.mean,
            "objective": self.objective,
            "inside": [float(v) for v in self.inside],
            "outside": [float(v) for v in self.outside],
        }


def guidance_step_count(steps, t_guidance):
    """Number of leading denoising steps that fall in the guidance interval."""
    return min(steps, math.ceil(steps * (1.0 - t_guidance) - 1e-9))


def beta_schedule(config: GuidanceConfig, n_guided):
    """Linear step sizes, one per guided denoising step."""
    if n_guided <= 1:
        return np.full(n_guided, config.beta_start)
    return np.linspace(config.beta_start, config.beta_end, n_guided)


def subject_context_sets(scene, masks):
    """Per subject: cross token indices (incl. the eot token) and self pixel indices."""
    eot = scene.eot_index
    out = []
    for s, m in zip(scene.subjects, masks.flat):
        out.append({
            "cross": sorted(set(s.token_indices) | {eot}),
            "self": np.flatnonzero(m).tolist(),
        })
    return out


def combined_context_columns(scene, context_sets, kinds=("cross", "self")):
    """Column indices of each ``C_i`` in the shared [tokens | pixels] key axis."""
    T = len(scene.tokens)
    cols = []
    for cs in context_sets:
        c = []
        if "cross" in kinds:
            c.extend(cs["cross"])
        if "self" in kinds:
            c.extend(T + p for p in cs["self"])
        cols.append(sorted(c))
    return cols


def bounded_guidance_loss(mean_map, box_masks, context_sets, alpha) -> LossReport:
    """Evaluate the loss on a (HW x K) mean attention map.

    ``box_masks`` is (n, HW) boolean, ``context_sets`` lists each subject's
    column indices into ``mean_map``.  Works on arrays and tape variables.
    """
    box = np.asarray(box_masks, dtype=bool)
    n, hw = box.shape
    K = ad.value(mean_map).shape[1]
    dt = ad.value(mean_map).dtype
    sel = np.zeros((K, n), dtype=dt)
    for i, cols in enumerate(context_sets):
        sel[list(cols), i] = 1.0
    aff = ad.matmul(mean_map, sel)  # (HW, n) attention mass on C_i per pixel
    inside = ad.sum(aff * box.T.astype(dt), axis=0)
    outside = ad.sum(aff * (~box).T.astype(dt), axis=0)
    inv, outv = ad.value(inside), ad.value(outside)
    empty = np.flatnonzero(inv + outv == 0)
    if len(empty):
        raise EmptySubject(f"subjects {empty.tolist()} receive no attention mass")
    losses = 1.0 - inside / (inside + alpha * outside)
    objective = ad.sum(ad.square(losses))
    return LossReport(np.array(ad.value(losses), dtype=float), np.array(inv, dtype=float),
                      np.array(outv, dtype=float), float(alpha),
                      objective if isinstance(objective, ad.Var) else None)


def mean_attention_map(records, n_tokens, hw, layers=None):
    """Average records over heads and layers into the shared key axis.

    Uses the tape node of each layer when present, so the result stays
    differentiable; otherwise averages the recorded arrays.
    """
    by_layer = {}
    for r in records:
        if layers is None or r.layer in layers:
            by_layer.setdefault(r.layer, []).append(r)
    if not by_layer:
        raise ValueError("no attention records for the requested layers")
    total, count = None, 0
    for layer in sorted(by_layer):
        recs = by_layer[layer]
        kind = recs[0].kind
        node = recs[0].node
        if node is not None:
            heads = ad.value(node).shape[1]
            m = ad.reshape(ad.sum(node, axis=1), (hw, ad.value(node).shape[-1]))
        else:
            heads = len(recs)
            m = np.sum([r.attn for r in recs], axis=0)
        dt = ad.value(m).dtype
        if kind == "cross":
            place = np.hstack([np.eye(n_tokens, dtype=dt), np.zeros((n_tokens, hw), dtype=dt)])
        else:
            place = np.hstack([np.zeros((hw, n_tokens), dtype=dt), np.eye(hw, dtype=dt)])
        m = ad.matmul(m, place)
        total = m if total is None else total + m
        count += heads
    return total * (1.0 / count)


def guidance_masks(scene, masks, dtype=np.float64):
    return {
        "cross": build_cross_mask(scene, masks, MaskMode.GUIDANCE, dtype),
        "self": build_self_mask(masks, dtype),
    }


def guidance_loss(model, z, t, scene, masks, config: GuidanceConfig, tape=None):
    """Taped forward with guidance-mode masks; returns ``(report, z_var)``."""
    tape = Tape() if tape is None else tape
    z_var = z if isinstance(z, ad.Var) else tape.leaf(np.asarray(z, dtype=model.dtype), name="z_t")
    _, records = model.forward(z_var, t, scene.token_ids, masks=guidance_masks(scene, masks, model.dtype),
                               record=True)
    hw = masks.flat.shape[1]
    T = len(scene.tokens)
    mean_map = mean_attention_map(records, T, hw, config.loss_layers)
    cols = combined_context_columns(scene, subject_context_sets(scene, masks))
    report = bounded_guidance_loss(mean_map, masks.flat, cols, config.alpha_for(scene.n_subjects))
    return report, z_var


def guidance_step(z_t, loss_grad, beta):
    g = np.asarray(loss_grad)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("guidance gradient has non-finite entries")
    return z_t - beta * g


def run_guidance_phase(z_t, model, scene, masks, config: GuidanceConfig, t, beta, tape_factory=Tape):
    """Up to ``config.iterations`` descent steps on ``sum_i L_i^2``.

    Each iteration evaluates the loss; the loop stops without updating once
    the mean subject loss is at or below ``config.early_stop``.  Returns the
    optimised latent and a list of per-iteration loss reports.
    """
    z = np.asarray(z_t)
    history = []
    for _ in range(config.iterations):
        tape = tape_factory()
        report, z_var = guidance_loss(model, z, t, scene, masks, config, tape)
        entry = report.to_dict()
        history.append(entry)
        if report.mean <= config.early_stop:
            entry["updated"] = False
            break
        grad = tape.backward(report.objective_node)[z_var]
        z = guidance_step(z, grad, beta)
        entry["updated"] = True
        entry["grad_norm"] = float(np.linalg.norm(grad))
    return z, history
