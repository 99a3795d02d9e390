"""Command-line entry point: ``pnpt <command> [flags] [section.key=value ...]``.

Typical workflow::

    pnpt synth --out data/synth
    pnpt build-pool --data-root data/synth --out runs/pool.safetensors
    pnpt train --data-root data/synth --pool runs/pool.safetensors --out runs/model.safetensors
    pnpt eval --data-root data/synth --pool runs/pool.safetensors --checkpoint runs/model.safetensors --out runs/eval
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .archive import ArchiveError
from .backbone import preprocess
from .config import ConfigError, VARIANTS, load_config
from .data import DatasetError
from .datagen import SynthSpec, generate_dataset
from .evaluation import evaluate_dataset, load_test_features, prompt_swap_diagnostic
from .inference import Detector
from .objective import export_result
from .pool import bench_retrieval, load_pool, save_pool
from .training import Checkpoint, ConfigMismatchError, build_dataset_pool, resume, train

log = logging.getLogger("pnpt")

# sections that only change how a trained model is scored
SCORING_SECTIONS = ("score", "fusion")


class CommandError(Exception):
    pass


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _split_overrides(items: list[str], prefix: str) -> tuple[list[str], list[str]]:
    own = [i[len(prefix):] for i in items if i.startswith(prefix)]
    rest = [i for i in items if not i.startswith(prefix)]
    return own, rest


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _require(path, what: str) -> Path:
    if path is None:
        raise CommandError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} not found: {p}")
    return p


def _detector(args) -> Detector:
    ckpt = Checkpoint.load(_require(args.checkpoint, "--checkpoint"))
    if args.config is not None or args.overrides:
        # only scoring settings may differ from the stored training config
        cfg = load_config(args.config, args.overrides, base=ckpt.config)
        stored = ckpt.config.to_dict()
        conflicts = [s for s, v in cfg.to_dict().items() if v != stored[s] and s not in SCORING_SECTIONS]
        if conflicts:
            raise ConfigMismatchError(f"config conflicts with the checkpoint in section(s) {conflicts}; "
                                      f"only {list(SCORING_SECTIONS)} can change after training")
        ckpt.config = cfg
    pool = None
    if not ckpt.config.ablation.disable_pool:
        pool = load_pool(_require(args.pool, "--pool"))
        if ckpt.pool_hash and pool.digest() != ckpt.pool_hash:
            raise ConfigMismatchError("the pool differs from the one the checkpoint was trained with")
    return Detector(ckpt, pool, device=args.device)


def cmd_synth(args) -> int:
    synth_over, rest = _split_overrides(args.overrides, "synth.")
    if rest:
        raise ConfigError(f"synth only takes synth.* overrides, got {rest}")
    types = {f.name: f.type for f in dataclasses.fields(SynthSpec) if f.name != "recipes"}
    values = {}
    for item in synth_over:
        key, sep, value = item.partition("=")
        if not sep or key not in types:
            raise ConfigError(f"unknown synth override {item!r}; keys: {sorted(types)}")
        if key == "defects":
            values[key] = tuple(v.strip() for v in value.split(",") if v.strip())
        else:
            values[key] = float(value) if types[key] == "float" else int(value)
    if args.seed is not None:
        values["seed"] = args.seed
    spec = SynthSpec(**values)
    out = Path(args.out or "data/synth")
    manifest = generate_dataset(spec, out, force=args.force)
    n = len(manifest["files"])
    _emit(args, {"out": str(out), "files": n, "classes": spec.class_names},
          f"wrote {n} images for classes {', '.join(spec.class_names)} to {out}")
    return 0


def cmd_build_pool(args) -> int:
    cfg = _config(args)
    root = _require(args.data_root, "--data-root")
    pool = build_dataset_pool(cfg, root)
    out = Path(args.out or "pool.safetensors")
    save_pool(pool, out)
    _emit(args, {"out": str(out), "classes": pool.classes, "sample_counts": pool.sample_counts,
                 "digest": pool.digest()},
          f"pool with {len(pool.classes)} classes written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.variant:
        cfg = cfg.with_variant(args.variant)
    root = _require(args.data_root, "--data-root")
    pool = None
    if not cfg.ablation.disable_pool:
        pool = load_pool(_require(args.pool, "--pool"))
    out = Path(args.out or "model.safetensors")
    log_csv = out.with_suffix(".loss.csv")
    if args.resume:
        start = Checkpoint.load(_require(args.resume, "--resume"))
        user_cfg = cfg if (args.config or args.overrides or args.seed is not None or args.variant) else None
        ckpt = resume(start, root, pool, config=user_cfg, max_steps=args.max_steps, checkpoint_path=out,
                      log_csv=log_csv, device=args.device)
        if ckpt is start:
            ckpt.save(out)
    else:
        ckpt = train(cfg, root, pool, max_steps=args.max_steps, checkpoint_path=out, log_csv=log_csv,
                     device=args.device)
    last = ckpt.loss_log[-1][2] if ckpt.loss_log else float("nan")
    _emit(args, {"out": str(out), "epoch": ckpt.epoch, "step": ckpt.step, "finished": ckpt.finished,
                 "final_loss": last, "loss_log": str(log_csv)},
          f"checkpoint at epoch {ckpt.epoch}, step {ckpt.step} (loss {last:.5f}) written to {out}")
    return 0


def cmd_eval(args) -> int:
    det = _detector(args)
    root = _require(args.data_root, "--data-root")
    report = evaluate_dataset(det, root, out_dir=args.out, save_maps=args.save_maps)
    summary = report.summary()
    lines = [f"{c}: image {report.class_image_auroc[c]:.4f}  pixel {report.class_pixel_auroc[c]:.4f}"
             for c in report.class_image_auroc]
    lines.append(f"mean: image {report.mean_image_auroc:.4f}  pixel {report.mean_pixel_auroc:.4f}")
    _emit(args, summary, "\n".join(lines))
    return 0


def cmd_score(args) -> int:
    det = _detector(args)
    image = _require(args.image, "image")
    if args.forced_class is not None and det.pool is not None:
        det.pool.index(args.forced_class)
    batch = preprocess(image, det.config.backbone.input_size)[None]
    result = det.score_images(batch, forced_class=args.forced_class)[0]
    out = Path(args.out) if args.out else image.with_name(image.stem + "_score")
    record = export_result(result, out, num_scales=len(det.model.scale_index), class_id=result.class_id)
    record["map"] = str(out.with_suffix(".png"))
    _emit(args, record, f"{image}: score {result.image_score:.5f} (class {result.class_id}); map {out}.png")
    return 0


def cmd_bench_retrieval(args) -> int:
    rows = bench_retrieval(args.pool_sizes, args.image_counts, coding_dim=args.coding_dim, queries=args.queries,
                           repeats=args.repeats, seed=args.seed or 0, out_csv=args.out)
    text = "\n".join(f"K={r['num_classes']:>4} N={r['num_images']:>6}  pool {r['pool_latency_us']:.3f} us  "
                     f"scan {r['sample_scan_latency_us']:.3f} us" for r in rows)
    _emit(args, {"rows": rows}, text)
    return 0


def cmd_prompt_swap(args) -> int:
    det = _detector(args)
    if det.pool is None:
        raise CommandError("prompt-swap needs a model trained with the pool")
    root = _require(args.data_root, "--data-root")
    samples, feats = load_test_features(det, root, normal_only=not args.all_images)
    truth = [s.class_id for s in samples]
    forced = args.forced_class
    reports = []
    for cls in ([forced] if forced else det.pool.classes):
        keep = [i for i, t in enumerate(truth) if t != cls]
        if not keep:
            continue
        rep = prompt_swap_diagnostic(det, feats.select(torch.tensor(keep)), [truth[i] for i in keep], cls)
        reports.append(rep)
    if not reports:
        raise CommandError("no test images from a class other than the forced one")
    d_c = np.concatenate([r.d_correct for r in reports])
    d_f = np.concatenate([r.d_forced for r in reports])
    change = np.concatenate([r.prior_change for r in reports])
    drift = np.concatenate([r.self_drift for r in reports])
    payload = {
        "forced_classes": [r.forced_class for r in reports],
        "num_pairs": int(len(d_c)),
        "mean_d_correct": float(d_c.mean()),
        "mean_d_forced": float(d_f.mean()),
        "fraction_forced_farther": float(np.mean(d_f > d_c)),
        "mean_prior_change": float(change.mean()),
        "mean_self_drift": float(drift.mean()),
    }
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit(args, payload, "\n".join(f"{k}: {v}" for k, v in payload.items()))
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; dotted overrides win over it")
    p.add_argument("--seed", type=int, help="seed for every random choice of the command")
    p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    p.add_argument("--device", default="cpu", help="torch device, e.g. cpu or cuda:0")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("overrides", nargs="*", metavar="section.key=value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnpt", description="Prior-prompted reconstruction anomaly detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic texture corpus")
    _common(p)
    p.add_argument("--out", help="output dataset root (default data/synth)")
    p.add_argument("--force", action="store_true", help="replace a previously generated corpus")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-pool", help="build the class prototype pool")
    _common(p)
    p.add_argument("--data-root", required=True)
    p.add_argument("--out", help="pool file (default pool.safetensors)")
    p.set_defaults(func=cmd_build_pool)

    p = sub.add_parser("train", help="train the reconstruction model")
    _common(p)
    p.add_argument("--data-root", required=True)
    p.add_argument("--pool")
    p.add_argument("--out", help="checkpoint file (default model.safetensors)")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="ablation preset")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps (resumable)")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="image and pixel AUROC over the test split")
    _common(p)
    p.add_argument("--data-root", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool")
    p.add_argument("--out", help="report directory")
    p.add_argument("--save-maps", action="store_true", help="also write every anomaly map as .npy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score one image and write its anomaly map")
    _common(p)
    p.add_argument("image", type=Path)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool")
    p.add_argument("--class", dest="forced_class", help="force this class's prototype instead of retrieval")
    p.add_argument("--out", help="output stem for .png/.npy/.json (default next to the image)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench-retrieval", help="time pool retrieval against a per-sample scan")
    _common(p)
    p.add_argument("--pool-sizes", type=int, nargs="+", default=[15, 50, 150])
    p.add_argument("--image-counts", type=int, nargs="+", default=[100, 1000])
    p.add_argument("--coding-dim", type=int, default=1792)
    p.add_argument("--queries", type=int, default=64)
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--out", help="CSV file")
    p.set_defaults(func=cmd_bench_retrieval)

    p = sub.add_parser("prompt-swap", help="reconstruct with a wrong class prototype")
    _common(p)
    p.add_argument("--data-root", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pool")
    p.add_argument("--class", dest="forced_class", help="class to force (default: each class in turn)")
    p.add_argument("--all-images", action="store_true", help="include anomalous test images")
    p.add_argument("--out", help="JSON report file")
    p.set_defaults(func=cmd_prompt_swap)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, ConfigMismatchError, DatasetError, ArchiveError, FileExistsError,
            FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"pnpt {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
