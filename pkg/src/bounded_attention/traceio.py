"""On-disk attention records and run traces."""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .bounded import AttentionRecord
from .errors import NoRecords
from .numerics import load_tensors, save_tensors

_NAME = re.compile(r"s(\d+)_(\w+?)_L(\d+)_H(\d+)_(self|cross)\.battn$")


def record_filename(step, label, rec):
    return f"s{step:03d}_{label}_L{rec.layer:02d}_H{rec.head}_{rec.kind}.battn"


def save_record(path, rec: AttentionRecord):
    tensors = {"q": rec.q, "k": rec.k, "logits": rec.logits, "attn": rec.attn}
    if rec.mask is not None:
        tensors["mask"] = rec.mask
    save_tensors(path, {k: np.ascontiguousarray(v) for k, v in tensors.items()})


def load_record(path) -> AttentionRecord:
    m = _NAME.search(Path(path).name)
    if m is None:
        raise ValueError(f"not an attention record file name: {path}")
    t = load_tensors(path)
    return AttentionRecord(int(m.group(3)), int(m.group(4)), m.group(5), t["q"], t["k"], t["logits"],
                           t.get("mask"), t["attn"])


class RecordDumper:
    """``on_records`` callback writing selected steps' records into ``root``."""

    def __init__(self, root, steps=None, labels=("cond",)):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.steps = None if steps is None else set(steps)
        self.labels = set(labels) if labels is not None else None

    def __call__(self, step, label, records):
        if self.steps is not None and step not in self.steps:
            return
        if self.labels is not None and label not in self.labels:
            return
        for rec in records:
            save_record(self.root / record_filename(step, label, rec), rec)


def load_records(root, step=None, label="cond"):
    """Records of one step (default: the latest step present) and that step."""
    found = {}
    for p in sorted(Path(root).glob("*.battn")):
        m = _NAME.search(p.name)
        if m and m.group(2) == label:
            found.setdefault(int(m.group(1)), []).append(p)
    if not found:
        raise NoRecords(f"no {label!r} attention records under {root}")
    step = max(found) if step is None else step
    if step not in found:
        raise NoRecords(f"no {label!r} attention records for step {step} under {root}")
    return [load_record(p) for p in found[step]], step


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, type):
        return o.__name__
    return str(o)
