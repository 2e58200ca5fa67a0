"""Two-phase bounded sampling with classifier-free guidance.

Steps ``1..G`` (``G = ceil(steps * (1 - t_guidance))``) run a Bounded
Guidance step on the latent followed by a bounded denoising step under the
coarse box masks.  Steps ``G+1..steps`` only denoise; starting at ``G+1``
and every ``interval`` steps after, the subject masks are re-estimated by
clustering self-attention.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .bounded import MaskMode, build_cross_mask, build_self_mask, coarse_masks, permissive_cross_mask
from .errors import ShapeMismatch
from .guidance import GuidanceConfig, beta_schedule, guidance_step_count, run_guidance_phase
from .refinement import RefinementConfig, is_refinement_step, refine


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 3.0
    seed: int = 0
    eta: float = 0.0  # 0 -> deterministic DDIM; 1 -> ancestral
    clip_denoised: bool = True
    vanilla: bool = False
    use_guidance: bool = True
    use_refinement: bool = True
    check_records: bool = False
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class StepTrace:
    index: int
    t: int
    phase: str  # "guidance" | "denoising"
    beta: float | None = None
    guidance: list = field(default_factory=list)
    refined: bool = False
    masks: np.ndarray | None = None
    record_checks: list = field(default_factory=list)

    @property
    def inner_iterations(self):
        return len(self.guidance)

    def to_dict(self):
        return {
            "index": self.index,
            "t": self.t,
            "phase": self.phase,
            "beta": self.beta,
            "inner_iterations": self.inner_iterations,
            "guidance": self.guidance,
            "refined": self.refined,
            "record_checks": self.record_checks,
        }


@dataclass
class RunTrace:
    config: dict
    steps: list = field(default_factory=list)
    image: np.ndarray | None = None
    masks_final: np.ndarray | None = None
    seconds: float = 0.0

    @property
    def guided_steps(self):
        return [s.index for s in self.steps if s.phase == "guidance"]

    @property
    def refinement_steps(self):
        return [s.index for s in self.steps if s.refined]

    def to_dict(self):
        return {
            "config": self.config,
            "steps": [s.to_dict() for s in self.steps],
            "guided_steps": self.guided_steps,
            "refinement_steps": self.refinement_steps,
        }


def cfg_combine(eps_cond, eps_uncond, w):
    eps_cond, eps_uncond = np.asarray(eps_cond), np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeMismatch(f"{eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def denoise_step(z_t, eps, t, t_prev, schedule, eta=0.0, rng=None, clip=False):
    """DDIM update from timestep ``t`` to ``t_prev`` (``-1`` is the clean end)."""
    ab = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t_prev))
    x0 = (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    if clip:
        x0 = np.clip(x0, -1.0, 1.0)
        # keep eps consistent with the clipped prediction
        eps = (z_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    sigma = 0.0
    if eta > 0 and t_prev >= 0:
        sigma = eta * np.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
    z = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
    if sigma > 0:
        z = z + sigma * rng.standard_normal(np.shape(z_t))
    return z


def initial_latent(model, seed):
    cfg = model.config
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((cfg.image_channels, cfg.latent_height, cfg.latent_width)).astype(model.dtype)
    return z, rng


def to_image(z):
    """Map a final latent in [-1, 1] to an RGB image in [0, 1], (H, W, 3)."""
    return np.clip((np.transpose(np.asarray(z, dtype=np.float64), (1, 2, 0)) + 1.0) / 2.0, 0.0, 1.0)


def denoising_masks(scene, masks, dtype):
    self_mask = build_self_mask(masks, dtype)
    cond = {"cross": build_cross_mask(scene, masks, MaskMode.DENOISING, dtype), "self": self_mask}
    uncond = {"cross": permissive_cross_mask(self_mask.shape[0], len(scene.tokens), dtype), "self": self_mask}
    return cond, uncond


def check_records(records):
    """Masked-zero and row-sum statistics over a list of attention records."""
    masked_max, rowsum_err = 0.0, 0.0
    for r in records:
        a = np.asarray(r.attn)
        rowsum_err = max(rowsum_err, float(np.max(np.abs(a.sum(axis=-1) - 1.0))))
        if r.mask is not None:
            blocked = np.broadcast_to(np.isneginf(r.mask), a.shape)
            if blocked.any():
                masked_max = max(masked_max, float(np.max(np.abs(a[blocked]))))
    return {"masked_max": masked_max, "rowsum_err": rowsum_err, "n_records": len(records)}


def sample(model, scene, config: SamplerConfig | None = None, on_records=None):
    """Generate one image for ``scene``; returns ``(image, RunTrace)``.

    ``on_records(step_index, label, records)`` is called with the attention
    records of every model evaluation when given.
    """
    config = config or SamplerConfig()
    cfg = model.config
    if (scene.latent_height, scene.latent_width) != (cfg.latent_height, cfg.latent_width):
        raise ShapeMismatch("scene and model resolutions differ")
    started = time.perf_counter()
    dt = model.dtype
    sched = model.schedule
    timesteps = sched.sampling_timesteps(config.steps)
    bounded = not config.vanilla
    n_guided = guidance_step_count(config.steps, config.guidance.t_guidance) if bounded and config.use_guidance else 0
    first_refine = guidance_step_count(config.steps, config.guidance.t_guidance) + 1
    betas = beta_schedule(config.guidance, n_guided)

    z, rng = initial_latent(model, config.seed)
    ctx_c = scene.token_ids
    ctx_u = model.null_context(len(scene.tokens))
    coarse = coarse_masks(scene) if bounded else None
    masks = coarse
    centers = None
    want_records = bounded or config.check_records or on_records is not None
    trace = RunTrace(config.to_dict())

    for k, t in enumerate(timesteps, start=1):
        t = int(t)
        t_prev = int(timesteps[k]) if k < len(timesteps) else -1
        st = StepTrace(k, t, "guidance" if k <= n_guided else "denoising")

        if k <= n_guided:
            st.beta = float(betas[k - 1])
            z, st.guidance = run_guidance_phase(z, model, scene, masks, config.guidance, t, st.beta)
            z = np.asarray(z, dtype=dt)

        if not bounded:
            mc, mu = None, None
        else:
            mc, mu = denoising_masks(scene, masks, dt)
        eps_c, recs = model.forward(z, t, ctx_c, mc, record=want_records)

        if bounded and config.use_refinement and is_refinement_step(k, first_refine, config.refinement.interval):
            masks, centers = refine(k, recs, scene, masks, centers, config.refinement, coarse,
                                    start_step=first_refine, n_blocks=cfg.blocks)
            st.refined = True
            st.masks = masks.masks.copy()
            _emit(on_records, st, k, "refine-input", recs, config)
            mc, mu = denoising_masks(scene, masks, dt)
            eps_c, recs = model.forward(z, t, ctx_c, mc, record=want_records)

        _emit(on_records, st, k, "cond", recs, config)
        eps_u, recs_u = model.forward(z, t, ctx_u, mu, record=config.check_records or on_records is not None)
        _emit(on_records, st, k, "uncond", recs_u, config)

        eps = cfg_combine(eps_c, eps_u, config.cfg_scale)
        z = denoise_step(z, eps, t, t_prev, sched, config.eta, rng, config.clip_denoised).astype(dt)
        trace.steps.append(st)

    image = to_image(z)
    trace.image = image
    trace.masks_final = None if masks is None else masks.masks.copy()
    trace.seconds = time.perf_counter() - started
    return image, trace


def _emit(on_records, st, k, label, recs, config):
    if config.check_records and recs:
        st.record_checks.append({"label": label, **check_records(recs)})
    if on_records is not None and recs:
        on_records(k, label, recs)


def reference_sample(model, scene, steps=50, cfg_scale=3.0, seed=0, eta=0.0, clip_denoised=True):
    """Plain classifier-free-guided DDIM with no bounding code in the path."""
    sched = model.schedule
    timesteps = sched.sampling_timesteps(steps)
    z, rng = initial_latent(model, seed)
    ctx_c = scene.token_ids
    ctx_u = model.null_context(len(scene.tokens))
    for k, t in enumerate(timesteps, start=1):
        t_prev = int(timesteps[k]) if k < len(timesteps) else -1
        eps_c, _ = model.forward(z, int(t), ctx_c)
        eps_u, _ = model.forward(z, int(t), ctx_u)
        eps = eps_u + cfg_scale * (eps_c - eps_u)
        z = denoise_step(z, eps, int(t), t_prev, sched, eta, rng, clip_denoised).astype(model.dtype)
    return to_image(z)
