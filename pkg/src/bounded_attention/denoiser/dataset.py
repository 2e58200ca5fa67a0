"""Procedural multi-subject scenes: coloured shapes on a smooth grey background.

Prompts follow ``<sot> a <color> <shape> and a <color> <shape> ... <eot> <pad>...``
with ``<sot>`` and ``a`` as background tokens, ``and`` excluded, the colour a modifier and the
shape the subject noun.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene import SceneSpec, SubjectSpec, TokenSpec

VOCAB = (
    "<null>", "<sot>", "<eot>", "a", "and",
    "red", "green", "blue", "yellow", "magenta", "cyan",
    "square", "circle", "triangle",
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

PALETTE = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.80, 0.15),
    "blue": (0.12, 0.20, 0.92),
    "yellow": (0.92, 0.88, 0.12),
    "magenta": (0.88, 0.12, 0.88),
    "cyan": (0.12, 0.88, 0.90),
}
SHAPES = ("square", "circle", "triangle")
PROMPT_LENGTH = 16


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    scene: SceneSpec


def shape_mask(shape, h, w):
    """Boolean (h, w) footprint of ``shape`` filling an h x w box."""
    r = (np.arange(h) + 0.5)[:, None]
    c = (np.arange(w) + 0.5)[None, :]
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        return ((r - h / 2) / (h / 2)) ** 2 + ((c - w / 2) / (w / 2)) ** 2 <= 1.0 + 1e-9
    if shape == "triangle":
        # apex at the top centre, base along the bottom row
        half = (r / h) * (w / 2) + 0.5
        return np.abs(c - w / 2) <= half
    raise ValueError(f"unknown shape {shape!r}")


def smooth_background(rng, H, W, grid=4):
    """Grey background with bilinearly upsampled low-frequency noise."""
    base = rng.uniform(0.38, 0.62)
    coarse = base + rng.uniform(-0.07, 0.07, size=(3, grid + 1, grid + 1))
    ys = np.linspace(0, grid, H)
    xs = np.linspace(0, grid, W)
    y0 = np.minimum(ys.astype(int), grid - 1)
    x0 = np.minimum(xs.astype(int), grid - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = (
        coarse[:, y0][:, :, x0] * (1 - fy) * (1 - fx)
        + coarse[:, y0 + 1][:, :, x0] * fy * (1 - fx)
        + coarse[:, y0][:, :, x0 + 1] * (1 - fy) * fx
        + coarse[:, y0 + 1][:, :, x0 + 1] * fy * fx
    )
    return np.clip(out, 0.0, 1.0)


def make_scene(subjects, H, W, length=PROMPT_LENGTH):
    """Build a :class:`SceneSpec` for ``[(color, shape, (r0, c0, r1, c1)), ...]``.

    ``length`` pads the prompt with ``<pad>`` copies of the eot embedding;
    ``None`` leaves it unpadded.
    """
    tokens, specs = [TokenSpec("<sot>", TOKEN_ID["<sot>"], "background")], []
    for i, (color, shape, (r0, c0, r1, c1)) in enumerate(subjects):
        if i:
            tokens.append(TokenSpec("and", TOKEN_ID["and"], "excluded"))
        tokens.append(TokenSpec("a", TOKEN_ID["a"], "background"))
        tokens.append(TokenSpec(color, TOKEN_ID[color], "modifier"))
        tokens.append(TokenSpec(shape, TOKEN_ID[shape], "subject-noun"))
        box = (c0 / W, r0 / H, c1 / W, r1 / H)
        specs.append(SubjectSpec(f"{color} {shape}", (len(tokens) - 2, len(tokens) - 1), box))
    tokens.append(TokenSpec("<eot>", TOKEN_ID["<eot>"], "eot"))
    if length is not None:
        if len(tokens) > length:
            raise ValueError(f"prompt needs {len(tokens)} tokens, more than length={length}")
        tokens += [TokenSpec("<pad>", TOKEN_ID["<eot>"], "background")] * (length - len(tokens))
    return SceneSpec(tuple(tokens), tuple(specs), H, W)


def render(subjects, H, W, rng, palette=PALETTE, jitter=0.04):
    img = smooth_background(rng, H, W)
    for color, shape, (r0, c0, r1, c1) in subjects:
        fill = np.clip(np.asarray(palette[color]) + rng.uniform(-jitter, jitter, 3), 0, 1)
        m = shape_mask(shape, r1 - r0, c1 - c0)
        region = img[:, r0:r1, c0:c1]
        region[:, m] = fill[:, None]
    return img


def _place_boxes(rng, n, H, W, min_size, max_size, gap=1, tries=200):
    boxes = []
    for _ in range(n):
        for _ in range(tries):
            h = int(rng.integers(min_size, max_size + 1))
            w = int(np.clip(h + rng.integers(-1, 2), min_size, max_size))
            r0 = int(rng.integers(0, H - h + 1))
            c0 = int(rng.integers(0, W - w + 1))
            cand = (r0, c0, r0 + h, c0 + w)
            if all(
                cand[2] + gap <= b[0] or b[2] + gap <= cand[0] or cand[3] + gap <= b[1] or b[3] + gap <= cand[1]
                for b in boxes
            ):
                boxes.append(cand)
                break
        else:
            return None
    return boxes


def random_layout(rng, H=16, W=16, palette=PALETTE, shapes=SHAPES, n=None, same_shape=None):
    n = int(rng.choice([1, 2, 3], p=[0.2, 0.45, 0.35])) if n is None else n
    lo, hi = {1: (5, 9), 2: (5, 8), 3: (4, 7)}[min(n, 3)]
    # size ranges are tuned for 16x16; shrink them for smaller canvases
    scale = min(H, W) / 16
    if scale < 1:
        lo, hi = max(2, int(lo * scale)), max(2, int(hi * scale))
    for _ in range(1000):
        boxes = _place_boxes(rng, n, H, W, lo, hi)
        if boxes is not None:
            break
    else:
        raise ValueError(f"cannot place {n} boxes on a {H}x{W} canvas")
    colors = rng.choice(list(palette), size=n, replace=False)
    if same_shape is None:
        same_shape = rng.random() < 0.5
    if same_shape:
        picked = [str(rng.choice(shapes))] * n
    else:
        picked = [str(s) for s in rng.choice(shapes, size=n)]
    return [(str(c), s, b) for c, s, b in zip(colors, picked, boxes)]


def synth_dataset(seed, count, palette=PALETTE, shapes=SHAPES, H=16, W=16, length=PROMPT_LENGTH):
    """``count`` rendered samples; identical for identical arguments."""
    if len(palette) < 4:
        raise ValueError("palette needs at least 4 distinct colours")
    if not set(shapes) <= set(SHAPES):
        raise ValueError(f"shapes must be a subset of {SHAPES}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        layout = random_layout(rng, H, W, palette, tuple(shapes))
        out.append(Sample(render(layout, H, W, rng, palette), make_scene(layout, H, W, length)))
    return out
