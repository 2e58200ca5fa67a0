"""Scene descriptions: prompt tokens with explicit roles, subjects and boxes.

A scene document looks like::

    {
      "latent": {"height": 16, "width": 16},
      "tokens": [{"text": "a", "embedding_id": 2, "role": "background"}, ...],
      "subjects": [{"name": "kitten", "token_indices": [1, 2], "box": [x0, y0, x1, y1]}, ...]
    }

Boxes are normalised ``[x0, y0, x1, y1]``, x along the width axis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyBox, SchemaError, ValidationError

ROLES = ("subject-noun", "modifier", "background", "excluded", "eot")


@dataclass(frozen=True)
class TokenSpec:
    text: str
    embedding_id: int
    role: str


@dataclass(frozen=True)
class SubjectSpec:
    name: str
    token_indices: tuple
    box: tuple

    @property
    def noun_index(self):
        return self.token_indices[-1]


@dataclass(frozen=True)
class SceneSpec:
    tokens: tuple
    subjects: tuple
    latent_height: int = 16
    latent_width: int = 16

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def eot_index(self):
        return next(i for i, t in enumerate(self.tokens) if t.role == "eot")

    @property
    def token_ids(self):
        return np.array([t.embedding_id for t in self.tokens], dtype=np.int64)

    def to_dict(self):
        return {
            "latent": {"height": self.latent_height, "width": self.latent_width},
            "tokens": [{"text": t.text, "embedding_id": t.embedding_id, "role": t.role} for t in self.tokens],
            "subjects": [
                {"name": s.name, "token_indices": list(s.token_indices), "box": list(s.box)}
                for s in self.subjects
            ],
        }


def _require(d, key, kind, where):
    if not isinstance(d, dict) or key not in d:
        raise SchemaError(f"{where}: missing key {key!r}")
    val = d[key]
    if kind is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    elif kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    else:
        ok = isinstance(val, kind)
    if not ok:
        raise SchemaError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}")
    return val


def parse_scene(document) -> SceneSpec:
    """Parse a scene from a dict, a JSON string, or a path to a JSON file."""
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        document = Path(document).read_text()
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise SchemaError("scene document must be an object")

    latent = _require(document, "latent", dict, "scene")
    h = _require(latent, "height", int, "latent")
    w = _require(latent, "width", int, "latent")
    tokens = []
    for i, t in enumerate(_require(document, "tokens", list, "scene")):
        where = f"tokens[{i}]"
        tokens.append(TokenSpec(
            str(_require(t, "text", str, where)),
            _require(t, "embedding_id", int, where),
            _require(t, "role", str, where),
        ))
    subjects = []
    for i, s in enumerate(_require(document, "subjects", list, "scene")):
        where = f"subjects[{i}]"
        idx = _require(s, "token_indices", list, where)
        box = _require(s, "box", list, where)
        if not all(isinstance(j, int) and not isinstance(j, bool) for j in idx):
            raise SchemaError(f"{where}.token_indices: expected integers")
        if len(box) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box):
            raise SchemaError(f"{where}.box: expected four numbers")
        subjects.append(SubjectSpec(str(_require(s, "name", str, where)), tuple(idx), tuple(float(v) for v in box)))

    scene = SceneSpec(tuple(tokens), tuple(subjects), h, w)
    validate_scene(scene)
    return scene


def validate_scene(scene: SceneSpec):
    if scene.latent_height < 1 or scene.latent_width < 1:
        raise ValidationError("latent", "height and width must be >= 1")
    for i, t in enumerate(scene.tokens):
        if t.role not in ROLES:
            raise ValidationError(f"tokens[{i}].role", f"unknown role {t.role!r}")
        if t.embedding_id < 0:
            raise ValidationError(f"tokens[{i}].embedding_id", "must be non-negative")
    n_eot = sum(t.role == "eot" for t in scene.tokens)
    if n_eot != 1:
        raise ValidationError("eot", f"expected exactly one eot token, found {n_eot}")
    if not scene.subjects:
        raise ValidationError("subjects", "at least one subject is required")
    for i, s in enumerate(scene.subjects):
        if not s.token_indices:
            raise ValidationError(f"subjects[{i}].token_indices", "empty")
        for j in s.token_indices:
            if not 0 <= j < len(scene.tokens):
                raise ValidationError(f"subjects[{i}].token_indices", f"index {j} out of range")
            if scene.tokens[j].role not in ("subject-noun", "modifier"):
                raise ValidationError(
                    f"subjects[{i}].token_indices",
                    f"token {j} has role {scene.tokens[j].role!r}",
                )
        x0, y0, x1, y1 = s.box
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValidationError("box", f"subjects[{i}] has invalid box {s.box}")
        try:
            rasterize_box(s.box, scene.latent_height, scene.latent_width)
        except EmptyBox as exc:
            raise ValidationError("box", f"subjects[{i}]: {exc}") from exc


def box_mask(box, H, W):
    """Boolean (H, W) mask of pixels whose centres fall in the half-open box."""
    x0, y0, x1, y1 = box
    rows = (np.arange(H) + 0.5) / H
    cols = (np.arange(W) + 0.5) / W
    m = ((rows >= y0) & (rows < y1))[:, None] & ((cols >= x0) & (cols < x1))[None, :]
    if not m.any():
        raise EmptyBox(f"no pixel centre of a {H}x{W} grid falls inside {tuple(box)}")
    return m


def rasterize_box(box, H, W):
    """Flat pixel indices ``r * W + c`` covered by ``box``."""
    return set(np.flatnonzero(box_mask(box, H, W)).tolist())


def union_box_pixels(scene, H=None, W=None):
    H = scene.latent_height if H is None else H
    W = scene.latent_width if W is None else W
    out = set()
    for s in scene.subjects:
        out |= rasterize_box(s.box, H, W)
    return out


def background_pixels(scene, H=None, W=None):
    H = scene.latent_height if H is None else H
    W = scene.latent_width if W is None else W
    return set(range(H * W)) - union_box_pixels(scene, H, W)


def load_scene(path):
    return parse_scene(Path(path))


def save_scene(scene, path):
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n")
