"""Command line entry points: train, generate, eval, analyze."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .denoiser.dataset import synth_dataset
from .denoiser.model import Checkpoint, Denoiser, DenoiserConfig
from .denoiser.train import train
from .guidance import GuidanceConfig
from .harness import ab_experiment, analyze_queries, separation, subject_masks_from_cross, write_report
from .imageio import write_pgm, write_png, write_ppm
from .refinement import RefinementConfig
from .sampler import SamplerConfig, sample
from .scene import load_scene, save_scene
from .traceio import RecordDumper, load_records, write_json

log = logging.getLogger("bounded_attention")


def parse_seeds(text):
    """``"0..7"`` (inclusive) or ``"0,3,5"``."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def _write_image(path, image, png_scale=1):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        write_png(path, image, png_scale)
    else:
        write_ppm(path, image)


def _guidance_from(args):
    kw = {}
    for name in ("alpha", "beta_start", "beta_end", "early_stop", "t_guidance"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if getattr(args, "guidance_iters", None) is not None:
        kw["iterations"] = args.guidance_iters
    return GuidanceConfig(**kw)


def _add_guidance_flags(p):
    g = p.add_argument_group("guidance")
    g.add_argument("--alpha", type=float, help="outside-attention weight (default: number of subjects)")
    g.add_argument("--beta-start", type=float)
    g.add_argument("--beta-end", type=float)
    g.add_argument("--guidance-iters", type=int)
    g.add_argument("--early-stop", type=float)
    g.add_argument("--t-guidance", type=float)


def _load_model(path, dtype):
    return Denoiser.from_checkpoint(Checkpoint.load(path), np.dtype(dtype))


def cmd_train(args):
    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    model_cfg = DenoiserConfig(**cfg.get("model", {}))
    data = cfg.get("data", {})
    tr = cfg.get("train", {})
    ds = synth_dataset(data.get("seed", 0), data.get("count", 20000), H=model_cfg.latent_height,
                       W=model_cfg.latent_width)
    ckpt = train(model_cfg, ds, args.steps, cond_dropout=tr.get("cond_dropout", 0.1), seed=args.seed,
                 batch_size=tr.get("batch_size", 32), dtype=np.dtype(tr.get("dtype", "float32")),
                 optimizer=tr.get("optimizer"), log_every=tr.get("log_every", 100))
    ckpt.metadata["data"] = {"seed": data.get("seed", 0), "count": data.get("count", 20000)}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out)
    print(f"saved {args.out} (final loss {ckpt.metadata['loss_history'][-1]:.4f})")


def cmd_generate(args):
    model = _load_model(args.ckpt, args.dtype)
    scene = load_scene(args.scene)
    config = SamplerConfig(steps=args.steps, cfg_scale=args.cfg_scale, seed=args.seed, vanilla=args.vanilla,
                           use_guidance=not args.no_guidance, use_refinement=not args.no_refinement,
                           check_records=args.check_records, guidance=_guidance_from(args),
                           refinement=RefinementConfig())
    dumpers = []
    if args.dump_attention:
        dumpers.append(RecordDumper(args.dump_attention, labels=None))
    if args.trace:
        trace_dir = Path(args.trace)
        dumpers.append(RecordDumper(trace_dir / "attention", steps=[args.analysis_step or args.steps]))
    on_records = None
    if dumpers:
        def on_records(k, label, recs):
            for d in dumpers:
                d(k, label, recs)

    image, trace = sample(model, scene, config, on_records=on_records)
    _write_image(args.out, image, args.png_scale)
    if args.png:
        _write_image(args.png, image, args.png_scale)
    metrics = {"guided_steps": trace.guided_steps, "refinement_steps": trace.refinement_steps,
               "loss_history": [{"step": s.index, "beta": s.beta, "iterations": s.guidance}
                                for s in trace.steps if s.phase == "guidance"]}
    if args.metrics:
        write_json(args.metrics, metrics)
    if args.dump_masks:
        d = Path(args.dump_masks)
        d.mkdir(parents=True, exist_ok=True)
        for s in trace.steps:
            if s.masks is not None:
                for i, m in enumerate(s.masks):
                    write_pgm(d / f"step{s.index:03d}_subject{i}.pgm", m)
    if args.trace:
        trace_dir = Path(args.trace)
        trace_dir.mkdir(parents=True, exist_ok=True)
        write_json(trace_dir / "trace.json", trace.to_dict())
        write_json(trace_dir / "metrics.json", metrics)
        save_scene(scene, trace_dir / "scene.json")
        write_ppm(trace_dir / "image.ppm", image)
        if trace.masks_final is not None:
            for i, m in enumerate(trace.masks_final):
                write_pgm(trace_dir / f"mask_subject{i}.pgm", m)
    print(f"wrote {args.out}")


def cmd_eval(args):
    model = _load_model(args.ckpt, args.dtype)
    paths = sorted(Path(args.scenes).glob("*.json"))
    if not paths:
        raise SystemExit(f"no scene files in {args.scenes}")
    scenes = [(p.stem, load_scene(p)) for p in paths]
    seeds = parse_seeds(args.seeds)
    common = dict(steps=args.steps, cfg_scale=args.cfg_scale, guidance=_guidance_from(args))
    configs = {"bounded": SamplerConfig(**common), "vanilla": SamplerConfig(vanilla=True, **common)}
    report, _ = ab_experiment(model, scenes, seeds, configs, out_dir=args.images)
    report["checkpoint"] = Path(args.ckpt).name
    write_report(report, args.out)
    for arm, body in sorted(report["arms"].items()):
        m = body["metrics"]
        print(f"{arm:8s} P={m['precision']:.3f} R={m['recall']:.3f} F1={m['f1']:.3f} spatial={m['spatial']:.3f}")


def cmd_analyze(args):
    trace_dir = Path(args.trace)
    scene = load_scene(trace_dir / "scene.json")
    records, step = load_records(trace_dir / "attention", args.step)
    labels = subject_masks_from_cross(records, scene, floor=args.floor)
    scatter = analyze_queries(records, labels, [s.name for s in scene.subjects], layer=args.layer)
    scatter.to_csv(args.out)
    sep = separation(scatter, 0, 1) if scene.n_subjects >= 2 else float("nan")
    print(f"step {step}: {len(labels)} queries, explained variance "
          f"{scatter.explained_variance[0]:.3f}/{scatter.explained_variance[1]:.3f}, separation {sep:.3f}")


def build_parser():
    p = argparse.ArgumentParser(prog="bounded-attention", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy denoiser on synthetic coloured shapes")
    t.add_argument("--config", help="JSON with optional 'model', 'data' and 'train' sections")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=4000)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample one image for a scene file")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--scene", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=50)
    g.add_argument("--cfg-scale", type=float, default=3.0)
    g.add_argument("--out", required=True, help=".ppm (P6) or .png")
    g.add_argument("--png", help="also write a PNG copy here")
    g.add_argument("--png-scale", type=int, default=1, help="nearest-neighbour upscaling for PNG output")
    g.add_argument("--vanilla", action="store_true", help="disable all bounding")
    g.add_argument("--no-guidance", action="store_true")
    g.add_argument("--no-refinement", action="store_true")
    g.add_argument("--check-records", action="store_true", help="record masked-zero and row-sum statistics")
    g.add_argument("--trace", help="directory for trace.json, metrics, masks and analysis-step records")
    g.add_argument("--analysis-step", type=int, help="step whose records go into the trace (default: last)")
    g.add_argument("--metrics", help="write the guidance loss history here")
    g.add_argument("--dump-attention", help="write every attention record of every step here")
    g.add_argument("--dump-masks", help="write refined masks as PGM images here")
    g.add_argument("--dtype", default="float64", choices=["float32", "float64"])
    _add_guidance_flags(g)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="bounded vs vanilla layout metrics over a scene directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--seeds", default="0..7")
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--cfg-scale", type=float, default=3.0)
    e.add_argument("--out", required=True)
    e.add_argument("--images", help="write per-run images under this directory")
    e.add_argument("--dtype", default="float64", choices=["float32", "float64"])
    _add_guidance_flags(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="PCA of cross-attention queries from a generate --trace directory")
    a.add_argument("--trace", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--step", type=int)
    a.add_argument("--layer", type=int, help="cross-attention layer (default: deepest)")
    a.add_argument("--floor", type=float, default=0.3, help="background floor for subject labelling")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
