"""Shared fixtures: tiny scenes, tiny models and planted attention tensors."""
import numpy as np

from bounded_attention.bounded import AttentionRecord
from bounded_attention.denoiser.dataset import TOKEN_ID, make_scene
from bounded_attention.denoiser.model import Denoiser, DenoiserConfig
from bounded_attention.scene import parse_scene

TINY = DenoiserConfig(latent_height=8, latent_width=8, channels=8, blocks=2, heads=1, token_embed_dim=8,
                      time_embed_dim=8, max_tokens=16)


def tiny_model(seed=0, dtype=np.float64, **over):
    cfg = TINY if not over else DenoiserConfig(**{**TINY.__dict__, **over})
    return Denoiser.initialize(cfg, seed=seed, dtype=dtype)


def quadrant_scene(H=4, W=4, boxes=((0, 0, 0.5, 0.5), (0.5, 0.5, 1, 1))):
    """Subjects ``a <color> square`` joined by ``and``, one per box (x0, y0, x1, y1)."""
    colors = ["red", "blue", "green"]
    tokens, subjects = [], []
    for i, b in enumerate(boxes):
        if i:
            tokens.append({"text": "and", "embedding_id": TOKEN_ID["and"], "role": "excluded"})
        tokens.append({"text": "a", "embedding_id": TOKEN_ID["a"], "role": "background"})
        tokens.append({"text": colors[i], "embedding_id": TOKEN_ID[colors[i]], "role": "modifier"})
        tokens.append({"text": "square", "embedding_id": TOKEN_ID["square"], "role": "subject-noun"})
        subjects.append({"name": f"{colors[i]} square", "token_indices": [len(tokens) - 2, len(tokens) - 1],
                         "box": list(b)})
    tokens.append({"text": "<eot>", "embedding_id": TOKEN_ID["<eot>"], "role": "eot"})
    return parse_scene({"latent": {"height": H, "width": W}, "tokens": tokens, "subjects": subjects})


def iou(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    return (a & b).sum() / (a | b).sum()


def planted(seed, n, H=16, W=16, noise=1.0, cross_noise=0.3, margin=2, layers=(4, 5), heads=2):
    """Self/cross attention with planted communities.

    ``n`` rectangular blobs (separated by at least one pixel) plus the
    background form the self-attention communities: a pixel attends to its
    own community with weight 1 and to everything with uniform noise of
    amplitude ``noise``.  Blob pixels put cross attention on their subject's
    tokens, background pixels on the article and eot tokens.  Scene boxes
    are the blobs grown by ``margin`` pixels.  Returns
    ``(labels (H, W), scene, records)`` with label -1 for background.
    """
    rng = np.random.default_rng(seed)
    lab = np.full((H, W), -1)
    blobs = []
    while len(blobs) < n:
        h, w = rng.integers(4, 7, 2)
        r, c = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        if all(c + w + 1 <= b[1] or b[3] + 1 <= c or r + h + 1 <= b[0] or b[2] + 1 <= r for b in blobs):
            blobs.append((r, c, r + h, c + w))
            lab[r:r + h, c:c + w] = len(blobs) - 1
    f = lab.ravel()
    N = H * W
    colors = ["red", "green", "blue"]
    loose = [(max(0, r - margin), max(0, c - margin), min(H, r2 + margin), min(W, c2 + margin))
             for r, c, r2, c2 in blobs]
    scene = make_scene([(colors[i], "square", b) for i, b in enumerate(loose)], H, W)
    same = (f[:, None] == f[None, :]).astype(float)
    records = []
    for layer in layers:
        for head in range(heads):
            sa = same + noise * rng.random((N, N))
            sa /= sa.sum(1, keepdims=True)
            records.append(AttentionRecord(layer, head, "self", None, None, None, None, sa))
            ca = cross_noise * rng.random((N, len(scene.tokens)))
            for i, s in enumerate(scene.subjects):
                for j in s.token_indices:
                    ca[f == i, j] += 1.0
            for j, tok in enumerate(scene.tokens):
                if tok.role in ("background", "eot"):
                    ca[f == -1, j] += 1.0
            ca /= ca.sum(1, keepdims=True)
            records.append(AttentionRecord(layer, head, "cross", None, None, None, None, ca))
    return lab, scene, records
