"""Minimal netpbm writers/readers; PNG output goes through Pillow."""
from pathlib import Path

import numpy as np


def _to_u8(a):
    return np.clip(np.round(np.asarray(a, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image):
    """Binary P6 from an (H, W, 3) image in [0, 1]."""
    img = _to_u8(image)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def write_pgm(path, mask):
    """Binary P5 from an (H, W) array in [0, 1] (booleans become 0/255)."""
    img = _to_u8(np.asarray(mask, dtype=np.float64))
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pnm(path):
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        parts.append(data[start:pos])
    pos += 1
    magic, w, h = parts[0], int(parts[1]), int(parts[2])
    ch = 3 if magic == b"P6" else 1
    arr = np.frombuffer(data[pos:pos + w * h * ch], dtype=np.uint8)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w)).astype(np.float64) / 255.0


def write_png(path, image, scale=1):
    from PIL import Image

    img = _to_u8(image)
    pil = Image.fromarray(img)
    if scale > 1:
        pil = pil.resize((img.shape[1] * scale, img.shape[0] * scale), Image.NEAREST)
    pil.save(path, format="PNG")
