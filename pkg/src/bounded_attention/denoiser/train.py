"""Training for the toy denoiser.

A velocity head regresses ``v = sqrt(ab) eps - sqrt(1 - ab) x0``, which keeps
the implied clean image accurate at high noise where a plain noise loss
leaves it unconstrained.

Training never builds attention masks: the bounded mechanism is applied
only at sampling time.
"""
from __future__ import annotations

import logging
import math
import time
import numpy as np

from ..errors import DivergedLoss
from ..numerics import Tape
from ..numerics import autodiff as ad
from .model import NULL_TOKEN, Checkpoint, Denoiser, DenoiserConfig, init_params

log = logging.getLogger(__name__)

ADAM_DEFAULTS = {"lr": 2e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "warmup": 200,
                 "final_lr_frac": 0.05, "clip_norm": 1.0}


def _lr_at(step, steps, opt):
    if step < opt["warmup"]:
        return opt["lr"] * (step + 1) / opt["warmup"]
    frac = (step - opt["warmup"]) / max(1, steps - opt["warmup"])
    lo = opt["final_lr_frac"]
    return opt["lr"] * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def loss_and_grads(model_cfg, params, x0, t, eps, context):
    """Mean squared error of the output head and its parameter gradients."""
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    model = Denoiser(model_cfg, leaves)
    z = model.schedule.add_noise(x0, eps, t).astype(x0.dtype)
    pred, _ = model.forward(z, t, context, raw=True)
    target = eps
    if model_cfg.prediction == "v":
        ab = model.schedule.alpha_bar(t).reshape((-1, 1, 1, 1))
        target = (np.sqrt(ab) * eps - np.sqrt(1.0 - ab) * x0).astype(x0.dtype)
    loss = ad.mean(ad.square(pred - target))
    grads = tape.backward(loss)
    return float(loss.value), {k: grads[v] for k, v in leaves.items()}


def batch_arrays(samples, dtype):
    x0 = np.stack([2.0 * s.image - 1.0 for s in samples]).astype(dtype)
    ctx = np.stack([s.scene.token_ids for s in samples])
    return x0, ctx


def train(config: DenoiserConfig, dataset, steps, cond_dropout=0.1, seed=0, batch_size=32,
          dtype=np.float32, optimizer=None, log_every=100, init=None) -> Checkpoint:
    """Fit ``config`` on ``dataset`` (a list of samples) for ``steps`` Adam steps.

    Samples are batched by prompt length so no padding tokens are needed.
    With probability ``cond_dropout`` a sample's prompt is replaced by the
    null prompt of the same length.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    opt = {**ADAM_DEFAULTS, **(optimizer or {})}
    rng = np.random.default_rng(seed)
    params = init if init is not None else init_params(config, seed, dtype)
    params = {k: np.array(v, dtype=dtype) for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}

    groups = {}
    for i, s in enumerate(dataset):
        groups.setdefault(len(s.scene.tokens), []).append(i)
    keys = sorted(groups)
    weights = np.array([len(groups[k]) for k in keys], dtype=float)
    weights /= weights.sum()

    history = []
    started = time.perf_counter()
    for step in range(steps):
        key = keys[int(rng.choice(len(keys), p=weights))]
        idx = rng.choice(groups[key], size=batch_size, replace=True)
        x0, ctx = batch_arrays([dataset[i] for i in idx], dtype)
        drop = rng.random(batch_size) < cond_dropout
        ctx[drop] = NULL_TOKEN
        t = rng.integers(0, config.num_timesteps, size=batch_size)
        eps = rng.standard_normal(x0.shape).astype(dtype)

        loss, grads = loss_and_grads(config, params, x0, t, eps, ctx)
        if not math.isfinite(loss):
            raise DivergedLoss(f"loss became {loss} at step {step}")
        history.append(loss)

        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        scale = min(1.0, opt["clip_norm"] / (norm + 1e-12))
        lr = _lr_at(step, steps, opt)
        b1, b2 = opt["beta1"], opt["beta2"]
        c1, c2 = 1 - b1 ** (step + 1), 1 - b2 ** (step + 1)
        for k, g in grads.items():
            g = g * scale
            m[k] = b1 * m[k] + (1 - b1) * g
            v2[k] = b2 * v2[k] + (1 - b2) * g * g
            params[k] = (params[k] - lr * (m[k] / c1) / (np.sqrt(v2[k] / c2) + opt["eps"])).astype(dtype)
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(history[-log_every:]))
            log.info("step %d/%d loss %.4f lr %.2e (%.0fs)", step + 1, steps, recent, lr,
                     time.perf_counter() - started)

    meta = {
        "steps": steps,
        "seed": seed,
        "batch_size": batch_size,
        "cond_dropout": cond_dropout,
        "dtype": np.dtype(dtype).name,
        "optimizer": opt,
        "loss_history": history,
    }
    return Checkpoint(config, params, meta)
