"""A tiny conditional denoiser with interleaved conv, self- and cross-attention.

Layout: ``conv_in -> [res block -> self-attn -> cross-attn] x blocks -> 1x1 conv``.
Feature maps are kept channel-last, (B, H, W, C); the public ``forward``
takes and returns channel-first latents, (C, H, W) or (B, C, H, W).

Attention layer ``l`` counts attention layers in execution order:
block ``b`` owns self layer ``2b`` and cross layer ``2b + 1``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..bounded import AttentionRecord, attend
from ..errors import ShapeMismatch
from ..numerics import autodiff as ad
from ..numerics.tensorio import load_tensors, save_tensors
from .schedule import NoiseSchedule

NULL_TOKEN = 0


@dataclass
class DenoiserConfig:
    latent_height: int = 16
    latent_width: int = 16
    image_channels: int = 3
    channels: int = 32
    blocks: int = 3
    heads: int = 2
    token_embed_dim: int = 32
    vocab_size: int = 32
    time_embed_dim: int = 32
    max_tokens: int = 16
    num_timesteps: int = 1000
    schedule: str = "cosine"
    prediction: str = "v"  # what the output head predicts: "v" or "eps"

    def __post_init__(self):
        if self.prediction not in ("v", "eps"):
            raise ValueError(f"unknown prediction target {self.prediction!r}")
        if self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")

    @property
    def head_dim(self):
        return self.channels // self.heads

    @property
    def n_attention_layers(self):
        return 2 * self.blocks

    def layer_kind(self, layer):
        return "self" if layer % 2 == 0 else "cross"


@dataclass
class Checkpoint:
    config: DenoiserConfig
    params: dict
    metadata: dict = field(default_factory=dict)

    def save(self, path):
        manifest = {"config": asdict(self.config), "metadata": self.metadata, "params": list(self.params)}
        blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        save_tensors(path, {"__manifest__": blob, **self.params})

    @classmethod
    def load(cls, path):
        tensors = load_tensors(path)
        manifest = json.loads(tensors.pop("__manifest__").tobytes().decode("utf-8"))
        params = {k: tensors[k] for k in manifest["params"]}
        # checkpoints written before the velocity head carry no prediction field
        config = {"prediction": "eps", **manifest["config"]}
        return cls(DenoiserConfig(**config), params, manifest["metadata"])


def timestep_embedding(t, dim, max_period=10000.0):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def init_params(cfg: DenoiserConfig, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    C, D, E = cfg.channels, cfg.token_embed_dim, cfg.time_embed_dim

    def dense(fan_in, shape, gain=1.0):
        return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))

    p = {
        "tok_emb": rng.standard_normal((cfg.vocab_size, D)),
        "pos_emb": rng.standard_normal((cfg.max_tokens, D)) * 0.1,
        "time_w1": dense(E, (E, E)),
        "time_b1": np.zeros(E),
        "time_w2": dense(E, (E, E)),
        "time_b2": np.zeros(E),
        "conv_in_w": dense(9 * cfg.image_channels, (3, 3, cfg.image_channels, C)),
        "conv_in_b": np.zeros(C),
    }
    for b in range(cfg.blocks):
        pre = f"blocks.{b}."
        p.update({
            pre + "norm1_g": np.ones(C), pre + "norm1_b": np.zeros(C),
            pre + "conv1_w": dense(9 * C, (3, 3, C, C), np.sqrt(2.0)), pre + "conv1_b": np.zeros(C),
            pre + "temb_w": dense(E, (E, C)),
            pre + "norm2_g": np.ones(C), pre + "norm2_b": np.zeros(C),
            pre + "conv2_w": dense(9 * C, (3, 3, C, C), 0.5), pre + "conv2_b": np.zeros(C),
            pre + "sa_norm_g": np.ones(C), pre + "sa_norm_b": np.zeros(C),
            pre + "sa_wq": dense(C, (C, C)), pre + "sa_wk": dense(C, (C, C)),
            pre + "sa_wv": dense(C, (C, C)), pre + "sa_wo": dense(C, (C, C), 0.5),
            pre + "ca_norm_g": np.ones(C), pre + "ca_norm_b": np.zeros(C),
            pre + "ca_wq": dense(C, (C, C)), pre + "ca_wk": dense(D, (D, C)),
            pre + "ca_wv": dense(D, (D, C)), pre + "ca_wo": dense(C, (C, C), 0.5),
        })
    p.update({
        "out_norm_g": np.ones(C), "out_norm_b": np.zeros(C),
        "out_w": dense(C, (1, 1, C, cfg.image_channels), 0.5),
        "out_b": np.zeros(cfg.image_channels),
    })
    return {k: np.asarray(v, dtype=dtype) for k, v in p.items()}


class Denoiser:
    """Noise predictor ``eps(z_t, context, t)`` over a parameter dict.

    Parameters may be plain arrays (frozen) or tape variables (training).
    """

    def __init__(self, config: DenoiserConfig, params: dict):
        self.config = config
        self.params = params
        self.schedule = NoiseSchedule(config.schedule, config.num_timesteps)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=None):
        params = ckpt.params
        if dtype is not None:
            params = {k: v.astype(dtype) for k, v in params.items()}
        return cls(ckpt.config, params)

    @classmethod
    def initialize(cls, config: DenoiserConfig, seed=0, dtype=np.float64):
        return cls(config, init_params(config, seed, dtype))

    @property
    def dtype(self):
        return ad.value(self.params["conv_in_w"]).dtype

    def null_context(self, n_tokens):
        return np.full(n_tokens, NULL_TOKEN, dtype=np.int64)

    def _norm(self, x, pre):
        p = self.params
        return ad.layernorm(x) * p[pre + "_g"] + p[pre + "_b"]

    def _attend(self, x, ctx, pre, mask, layer, kind, record, records):
        cfg, p = self.config, self.params
        B, N, C = ad.value(x).shape
        h, hd = cfg.heads, cfg.head_dim
        src = x if ctx is None else ctx
        M = ad.value(src).shape[1]
        q = ad.transpose(ad.reshape(x @ p[pre + "wq"], (B, N, h, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(src @ p[pre + "wk"], (B, M, h, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(src @ p[pre + "wv"], (B, M, h, hd)), (0, 2, 1, 3))
        m = None
        if mask is not None:
            mask = np.asarray(mask, dtype=ad.value(x).dtype)
            if mask.shape[-2:] != (N, M):
                raise ShapeMismatch(f"{kind} mask {mask.shape} does not match attention {(N, M)}")
            m = mask[:, None] if mask.ndim == 3 else mask
        out, logits, attn = attend(q, k, v, m)
        if record:
            node = attn if isinstance(attn, ad.Var) else None
            qv, kv, lv, av = (ad.value(a) for a in (q, k, logits, attn))
            sq = (lambda a: a[0]) if B == 1 else (lambda a: a)
            for head in range(h):
                records.append(AttentionRecord(
                    layer, head, kind, sq(qv[:, head]), sq(kv[:, head]), sq(lv[:, head]),
                    mask, sq(av[:, head]), node,
                ))
        o = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, N, C))
        return o @ p[pre + "wo"]

    def forward(self, z, t, context, masks=None, record=False, tape=None, raw=False):
        """Predict the noise in ``z``.

        ``context`` holds token ids, (T,) or (B, T).  ``masks`` is an optional
        dict with ``"self"`` (HW x HW) and/or ``"cross"`` (HW x T) additive
        masks, optionally with a leading batch axis.  With ``tape`` the
        latent is registered as a leaf (unless it already is a Var) and the
        returned estimate is a tape variable.  With a velocity head the noise
        is ``sqrt(1 - ab) z + sqrt(ab) v``; ``raw=True`` returns the head output.
        """
        cfg, p = self.config, self.params
        if tape is not None and not isinstance(z, ad.Var):
            z = tape.leaf(np.asarray(z, dtype=self.dtype), name="z")
        zv = ad.value(z)
        single = zv.ndim == 3
        if single:
            z = ad.reshape(z, (1,) + zv.shape)
            zv = ad.value(z)
        B, Cimg, H, W = zv.shape
        if (Cimg, H, W) != (cfg.image_channels, cfg.latent_height, cfg.latent_width):
            raise ShapeMismatch(f"latent {zv.shape[1:]} does not match config")
        context = np.asarray(context, dtype=np.int64)
        if context.ndim == 1:
            context = np.broadcast_to(context, (B, context.shape[0]))
        if context.shape[0] != B:
            raise ShapeMismatch("context batch does not match latent batch")
        T = context.shape[1]
        if T > cfg.max_tokens:
            raise ShapeMismatch(f"{T} tokens exceed max_tokens={cfg.max_tokens}")
        masks = masks or {}
        dt = self.dtype

        temb = timestep_embedding(np.broadcast_to(np.asarray(t), (B,)), cfg.time_embed_dim).astype(dt)
        temb = ad.silu(temb @ p["time_w1"] + p["time_b1"]) @ p["time_w2"] + p["time_b2"]
        ctx = ad.take_rows(p["tok_emb"], context) + ad.take_rows(p["pos_emb"], np.arange(T))
        temb = ad.silu(temb)

        x = ad.transpose(z, (0, 2, 3, 1))
        h = ad.conv2d(x, p["conv_in_w"]) + p["conv_in_b"]
        records = []
        for b in range(cfg.blocks):
            pre = f"blocks.{b}."
            r = ad.conv2d(ad.silu(self._norm(h, pre + "norm1")), p[pre + "conv1_w"]) + p[pre + "conv1_b"]
            r = r + ad.reshape(temb @ p[pre + "temb_w"], (B, 1, 1, cfg.channels))
            r = ad.conv2d(ad.silu(self._norm(r, pre + "norm2")), p[pre + "conv2_w"]) + p[pre + "conv2_b"]
            h = h + r
            hs = ad.reshape(h, (B, H * W, cfg.channels))
            hs = hs + self._attend(self._norm(hs, pre + "sa_norm"), None, pre + "sa_",
                                   masks.get("self"), 2 * b, "self", record, records)
            hs = hs + self._attend(self._norm(hs, pre + "ca_norm"), ctx, pre + "ca_",
                                   masks.get("cross"), 2 * b + 1, "cross", record, records)
            h = ad.reshape(hs, (B, H, W, cfg.channels))
        out = ad.conv2d(ad.silu(self._norm(h, "out_norm")), p["out_w"]) + p["out_b"]
        eps = ad.transpose(out, (0, 3, 1, 2))
        if cfg.prediction == "v" and not raw:
            ab = self.schedule.alpha_bar(np.broadcast_to(np.asarray(t), (B,))).reshape(B, 1, 1, 1)
            eps = z * np.sqrt(1.0 - ab).astype(dt) + eps * np.sqrt(ab).astype(dt)
        if single:
            eps = ad.reshape(eps, (Cimg, H, W))
        return eps, records

    __call__ = forward
