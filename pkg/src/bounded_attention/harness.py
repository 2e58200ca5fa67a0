"""Layout-fidelity evaluation, query analysis and A/B experiments.

Detection is colour based: every pixel is classified to its nearest palette
colour (or background when no colour is close), connected components of one
colour are candidate objects, and a component of at least 1% of the frame
counts as a detection.  This stands in for an object detector on the
coloured-shape testbed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .denoiser.dataset import PALETTE
from .errors import NoRecords, UnknownColor
from .numerics import pca2

DETECTION_NOTE = (
    "Counting/spatial metrics use nearest-palette-colour connected components on the "
    "synthetic coloured-shape testbed, not an object detector on natural images."
)


@dataclass
class Detection:
    color: str
    area: int
    bbox: tuple  # normalised (x0, y0, x1, y1), half-open
    subject: int | None = None  # index of the matched subject
    iou: float = 0.0


@dataclass
class SceneDetections:
    detections: list
    subject_colors: list
    subject_hits: list  # one bool per subject

    @property
    def expected_counts(self):
        out = {}
        for c in self.subject_colors:
            out[c] = out.get(c, 0) + 1
        return out

    @property
    def detected_counts(self):
        out = {}
        for d in self.detections:
            out[d.color] = out.get(d.color, 0) + 1
        return out

    def to_dict(self):
        return {
            "detections": [
                {"color": d.color, "area": d.area, "bbox": list(d.bbox), "subject": d.subject, "iou": d.iou}
                for d in self.detections
            ],
            "subject_colors": self.subject_colors,
            "subject_hits": self.subject_hits,
        }


@dataclass
class LayoutMetrics:
    precision: float
    recall: float
    f1: float
    spatial: float
    per_scene: list = field(default_factory=list)

    def to_dict(self, with_scenes=True):
        d = {"precision": self.precision, "recall": self.recall, "f1": self.f1, "spatial": self.spatial}
        if with_scenes:
            d["per_scene"] = [s.to_dict() for s in self.per_scene]
        return d


def subject_color(scene, subject, palette=PALETTE):
    for j in subject.token_indices:
        if scene.tokens[j].text in palette:
            return scene.tokens[j].text
    raise UnknownColor(f"subject {subject.name!r} has no colour token in the palette")


def classify_pixels(image, palette=PALETTE, max_dist=0.35):
    """(H, W) palette index per pixel, -1 where no palette colour is within ``max_dist``."""
    img = np.asarray(image, dtype=np.float64)
    cols = np.array(list(palette.values()))
    d = np.sqrt(((img[:, :, None, :] - cols[None, None]) ** 2).sum(-1))
    idx = np.argmin(d, axis=-1)
    idx[np.min(d, axis=-1) > max_dist] = -1
    return idx


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def detect_subjects(image, scene, palette=PALETTE, min_area_frac=0.01, iou_threshold=0.5, max_dist=0.35):
    """Colour-component detections matched one-to-one against the scene's subjects."""
    colors = [subject_color(scene, s, palette) for s in scene.subjects]
    img = np.asarray(image)
    H, W = img.shape[:2]
    labels = classify_pixels(img, palette, max_dist)
    names = list(palette)
    detections = []
    for ci, name in enumerate(names):
        comp, n = ndimage.label(labels == ci)
        for lab in range(1, n + 1):
            rr, cc = np.nonzero(comp == lab)
            if len(rr) < min_area_frac * H * W:
                continue
            bbox = (cc.min() / W, rr.min() / H, (cc.max() + 1) / W, (rr.max() + 1) / H)
            detections.append(Detection(name, int(len(rr)), tuple(float(v) for v in bbox)))

    hits = [False] * len(scene.subjects)
    for name in sorted(set(colors)):
        subj = [i for i, c in enumerate(colors) if c == name]
        dets = [j for j, d in enumerate(detections) if d.color == name]
        if not dets:
            continue
        iou = np.array([[box_iou(scene.subjects[i].box, detections[j].bbox) for j in dets] for i in subj])
        # maximise the number of spatial hits first, then total overlap
        score = np.where(iou >= iou_threshold, 1000.0, 0.0) + iou
        rows, cols = linear_sum_assignment(-score)
        for r, c in zip(rows, cols):
            d = detections[dets[c]]
            d.subject, d.iou = subj[r], float(iou[r, c])
            hits[subj[r]] = bool(iou[r, c] >= iou_threshold)
    return SceneDetections(detections, colors, hits)


def layout_metrics(batch, palette=PALETTE, **detect_kwargs) -> LayoutMetrics:
    """Counting precision/recall/F1 and spatial accuracy over ``(image, scene)`` pairs.

    Counting compares the expected and detected colour multisets per scene;
    precision is 0 when nothing at all is detected.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    tp = n_det = n_exp = n_hit = 0
    per_scene = []
    for image, scene in batch:
        det = image if isinstance(image, SceneDetections) else detect_subjects(image, scene, palette, **detect_kwargs)
        per_scene.append(det)
        exp, got = det.expected_counts, det.detected_counts
        tp += sum(min(v, got.get(c, 0)) for c, v in exp.items())
        n_det += sum(got.values())
        n_exp += sum(exp.values())
        n_hit += sum(det.subject_hits)
    precision = tp / n_det if n_det else 0.0
    recall = tp / n_exp if n_exp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    spatial = n_hit / n_exp if n_exp else 0.0
    return LayoutMetrics(precision, recall, f1, spatial, per_scene)


# -- query analysis -----------------------------------------------------------

@dataclass
class QueryScatter:
    points: np.ndarray  # (N, 2)
    labels: np.ndarray  # (N,) subject index, -1 for background
    explained_variance: np.ndarray
    subject_names: list = field(default_factory=list)

    def class_points(self, label):
        return self.points[self.labels == label]

    def to_csv(self, path):
        names = {i: n for i, n in enumerate(self.subject_names)}
        lines = ["x,y,subject_label"]
        for (x, y), lab in zip(self.points, self.labels):
            lines.append(f"{x:.10g},{y:.10g},{names.get(int(lab), 'background')}")
        Path(path).write_text("\n".join(lines) + "\n")


def subject_masks_from_cross(records, scene, layers=None, floor=0.3):
    """Label pixels by the argmax of per-subject averaged cross-attention maps.

    Each subject map averages its token columns over heads and layers and is
    scaled to a peak of 1; pixels whose best score is below ``floor`` are
    background (-1).
    """
    sel = [r for r in records if r.kind == "cross" and (layers is None or r.layer in layers)]
    if not sel:
        raise NoRecords("no cross-attention records")
    mean = np.mean([np.asarray(r.attn, dtype=np.float64) for r in sel], axis=0)
    maps = np.stack([mean[:, list(s.token_indices)].mean(axis=1) for s in scene.subjects])
    maps = maps / np.maximum(maps.max(axis=1, keepdims=True), 1e-300)
    labels = np.argmax(maps, axis=0)
    labels[maps.max(axis=0) < floor] = -1
    return labels


def cross_queries(records, layer=None):
    """(HW, C) cross-attention queries of one layer with heads concatenated."""
    cross = [r for r in records if r.kind == "cross"]
    if not cross:
        raise NoRecords("no cross-attention records")
    layer = max(r.layer for r in cross) if layer is None else layer
    heads = sorted((r for r in cross if r.layer == layer), key=lambda r: r.head)
    if not heads:
        raise NoRecords(f"no cross-attention records at layer {layer}")
    return np.concatenate([np.asarray(r.q, dtype=np.float64) for r in heads], axis=-1)


def analyze_queries(records, labels, subject_names=None, layer=None) -> QueryScatter:
    """Project the pooled cross-attention queries onto two principal axes."""
    q = cross_queries(records, layer)
    labels = np.asarray(labels)
    if labels.shape != (q.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {q.shape[0]} queries")
    res = pca2(q)
    return QueryScatter(res.projections, labels.copy(), res.explained_variance_ratio, list(subject_names or []))


def separation(scatter: QueryScatter, a=0, b=1):
    """Distance between two class centroids over the pooled within-class std."""
    pa, pb = scatter.class_points(a), scatter.class_points(b)
    if len(pa) < 2 or len(pb) < 2:
        return float("nan")
    d = np.linalg.norm(pa.mean(0) - pb.mean(0))
    within = np.concatenate([pa - pa.mean(0), pb - pb.mean(0)])
    std = np.sqrt((within ** 2).sum(1).mean())
    if std == 0:
        return 0.0 if d == 0 else float("inf")
    return float(d / std)


# -- experiments ----------------------------------------------------------------

def ab_experiment(model, scenes, seeds, configs, palette=PALETTE, out_dir=None, sampler=None):
    """Run every config arm on every (scene, seed) pair and score the layouts.

    ``scenes`` is a list of ``(name, SceneSpec)``; ``configs`` maps arm name
    to a :class:`SamplerConfig` whose seed is overridden per run.  Images are
    written to ``out_dir/<arm>/<scene>_seed<k>.ppm`` when ``out_dir`` is set.
    """
    from dataclasses import replace

    from .imageio import write_ppm
    from .sampler import sample as default_sample

    sampler = sampler or default_sample
    if not scenes or not seeds:
        raise ValueError("need at least one scene and one seed")
    report = {"note": DETECTION_NOTE, "seeds": list(seeds), "scenes": [n for n, _ in scenes], "arms": {}}
    images = {}
    for arm in sorted(configs):
        runs, batch = [], []
        for name, scene in scenes:
            for seed in seeds:
                image, _ = sampler(model, scene, replace(configs[arm], seed=seed))
                images[(arm, name, seed)] = image
                det = detect_subjects(image, scene, palette)
                batch.append((det, scene))
                runs.append({"scene": name, "seed": seed, **det.to_dict()})
                if out_dir is not None:
                    path = Path(out_dir) / arm / f"{name}_seed{seed}.ppm"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    write_ppm(path, image)
        metrics = layout_metrics(batch, palette)
        report["arms"][arm] = {"metrics": metrics.to_dict(with_scenes=False), "runs": runs,
                               "config": configs[arm].to_dict()}
    return report, images


def write_report(report, path):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
