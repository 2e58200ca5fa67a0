import math

import numpy as np


class NoiseSchedule:
    """Discrete-time variance-preserving schedule, ``z_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""

    def __init__(self, kind="cosine", num_timesteps=1000):
        self.kind = kind
        self.num_timesteps = num_timesteps
        T = num_timesteps
        if kind == "cosine":
            s = 0.008
            f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
            betas = np.array([min(1 - f(t + 1) / f(t), 0.999) for t in range(T)])
        elif kind == "linear":
            betas = np.linspace(1e-4, 0.02, T)
        else:
            raise ValueError(f"unknown schedule {kind!r}")
        self.betas = betas
        self.alpha_bars = np.cumprod(1.0 - betas)

    def alpha_bar(self, t):
        """``ab_t``; ``t = -1`` denotes the clean end of the chain (ab = 1)."""
        t = np.asarray(t)
        return np.where(t < 0, 1.0, self.alpha_bars[np.clip(t, 0, None)])

    def add_noise(self, x0, eps, t):
        ab = self.alpha_bar(t).reshape((-1,) + (1,) * (np.ndim(x0) - 1)) if np.ndim(t) else self.alpha_bar(t)
        return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps

    def sampling_timesteps(self, steps):
        """Descending integer timesteps for a ``steps``-step sampler."""
        ts = np.linspace(self.num_timesteps - 1, 0, steps)
        return np.round(ts).astype(np.int64)
