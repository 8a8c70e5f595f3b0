"""Command-line entry point: ``dagman <command> ...``.

Every command writes its artifacts plus a ``manifest.json`` under ``--out``.
Exit codes: 0 ok, 2 usage, 3 validation, 4 I/O, 5 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import STRATEGIES, load_config
from .errors import DagmanError, ValidationError, VolumeFormatError

log = logging.getLogger("dagman")

MANIFEST = "manifest.json"


# --- helpers -----------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tensor_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise VolumeFormatError(f"unwritable output directory: {out} ({exc.strerror or exc})") from exc
    return out


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_manifest(out: Path, command: str, argv: list[str], artifacts: list[Path], config=None, seed=None, started=None):
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "deterministic": os.environ.get("DAGMAN_DETERMINISTIC", "") == "1",
        "artifacts": {p.name: {"path": str(p), "sha256": sha256_file(p)} for p in artifacts},
        "wall_clock_s": None if started is None else round(time.time() - started, 3),
    }
    return _write_json(out / MANIFEST, manifest)


def _load_dataset(data, labels=None, need_labels=False):
    from .volume_data import VolumeDataset

    ds = VolumeDataset.from_dir(data, labels)
    if need_labels and len(ds.labels) != len(ds.paths):
        raise ValidationError("labels: no labels.csv found for the data directory", field="labels")
    return ds, [ds.load(i) for i in range(len(ds))]


def _load_model(args):
    """Teacher network of a checkpoint, optionally checked against ``--config``."""
    from .checkpoint import load_checkpoint

    expected = load_config(args.config) if getattr(args, "config", None) else None
    trainer = load_checkpoint(args.ckpt, expected)
    return trainer, trainer.teacher


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> tuple[list[Path], dict, int]:
    from .volume_data import SyntheticSpec, generate_synthetic_volume, save_volume, seeded_rng

    if args.count < 0:
        raise ValidationError(f"count: must be >= 0, got {args.count}", field="count")
    spec_dict = json.loads(Path(args.spec).read_text()) if args.spec else {}
    base = SyntheticSpec.from_dict(spec_dict)
    out = _out_dir(args.out)
    rows = []
    for i in range(args.count):
        spec = SyntheticSpec.from_dict({**spec_dict, "class_id": i % base.num_classes})
        vol_seed = int(seeded_rng(args.seed, i).integers(2**62))
        name = f"vol_{i:04d}.vol"
        save_volume(generate_synthetic_volume(spec, vol_seed), out / name)
        rows.append((name, spec.class_id))
    labels = out / "labels.csv"
    with open(labels, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "class_id"])
        w.writerows(rows)
    cfg = {"spec": {k: v for k, v in vars(base).items()}, "count": args.count}
    return [labels] + [out / r[0] for r in rows], json.loads(json.dumps(cfg)), args.seed


def cmd_pretrain(args):
    from .plotting import plot_loss_curves
    from .trainer import pretrain, read_loss_csv

    overrides = {"masking_strategy": args.strategy, "steps": args.steps, "seed": args.seed}
    if args.steps is not None and args.warmup_steps is None:
        # keep the preset's warmup fraction when only the length changes
        base = load_config(args.config)
        overrides["warmup_steps"] = round(base.warmup_steps * args.steps / max(base.steps, 1))
    else:
        overrides["warmup_steps"] = args.warmup_steps
    if args.no_noisy_teacher:
        overrides["noisy_teacher"] = False
    cfg = load_config(args.config, **overrides)
    _, vols = _load_dataset(args.data)
    if not vols:
        raise ValidationError(f"data: no .vol files in {args.data}", field="data")
    out = _out_dir(args.out)
    trainer = pretrain(cfg, vols, out)
    fig = plot_loss_curves(read_loss_csv(out / "loss.csv"), out / "loss.png")
    counters = _write_json(out / "counters.json", dict(sorted(trainer.counters.items())))
    return [out / "checkpoint.dgmn", out / "loss.csv", counters, fig], cfg.to_dict(), cfg.seed


def cmd_probe(args):
    from .plotting import plot_probe
    from .probe import fine_tune, linear_probe, stratified_split

    trainer, model = _load_model(args)
    ds, vols = _load_dataset(args.data, args.labels, need_labels=True)
    train_idx, test_idx = stratified_split(ds.labels, test_frac=args.test_frac, train_frac=args.train_frac, seed=args.seed)
    before = tensor_hash(model.encoder)
    if args.mode == "lp":
        res = linear_probe(model, vols, ds.labels, train_idx, test_idx, seed=args.seed)
    else:
        res = fine_tune(model, vols, ds.labels, train_idx, test_idx, epochs=args.epochs, seed=args.seed)
    out = _out_dir(args.out)
    metrics = {**res.to_dict(), "train_frac": args.train_frac, "encoder_sha256_before": before, "encoder_sha256_after": tensor_hash(model.encoder)}
    path = _write_json(out / "metrics.json", metrics)
    fig = plot_probe(res, out / "probe.png")
    return [path, fig], trainer.cfg.to_dict(), args.seed


def cmd_attn_entropy(args):
    from .diagnostics import attention_distance_entropy
    from .plotting import plot_entropy

    trainer, model = _load_model(args)
    _, vols = _load_dataset(args.data)
    if not vols:
        raise ValidationError(f"data: no .vol files in {args.data}", field="data")
    report = attention_distance_entropy(model, vols, bins=args.bins)
    out = _out_dir(args.out)
    path = out / "entropy.json"
    report.to_json(path)
    return [path, plot_entropy(report, out / "entropy.png")], trainer.cfg.to_dict(), None


def cmd_attn_map(args):
    from .diagnostics import extract_attention_map, fit_to_input
    from .plotting import plot_attention_map

    trainer, model = _load_model(args)
    ds, vols = _load_dataset(args.data)
    out = _out_dir(args.out)
    artifacts = []
    for path, vol in list(zip(ds.paths, vols))[: args.limit]:
        amap = extract_attention_map(model, vol)
        target = out / f"attn_{path.stem}.vol"
        amap.save(target)
        artifacts.append(target)
        if args.figures:
            artifacts.append(plot_attention_map(amap.values, out / f"attn_{path.stem}.png", fit_to_input(vol, model.encoder)))
    return artifacts, trainer.cfg.to_dict(), None


def cmd_cluster(args):
    from .diagnostics import cluster_metrics, extract_features
    from .plotting import plot_cluster

    trainer, model = _load_model(args)
    ds, vols = _load_dataset(args.data, args.labels, need_labels=True)
    report = cluster_metrics(extract_features(model, vols), ds.labels)
    out = _out_dir(args.out)
    path = _write_json(out / "cluster.json", report.to_dict())
    return [path, plot_cluster(report, out / "cluster.png")], trainer.cfg.to_dict(), None


def cmd_replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if args.out is not None:
        i = argv.index("--out")
        argv[i + 1] = args.out
    code = main(argv)
    if code:
        raise SystemExit(code)
    out = Path(argv[argv.index("--out") + 1])
    return [out / MANIFEST], {"replayed": args.manifest}, manifest.get("seed")


# --- parser ------------------------------------------------------------------


def _ckpt_args(p, labels=False):
    p.add_argument("--ckpt", required=True, help="checkpoint written by 'pretrain'")
    p.add_argument("--data", required=True, help="directory of .vol files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="expected config; the checkpoint's encoder must match it")
    if labels:
        p.add_argument("--labels", help="labels CSV (default: <data>/labels.csv)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagman", description="Attention-guided masked pretraining for 3D Swin encoders.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic .vol volumes and labels.csv")
    p.add_argument("--spec", help="JSON synthetic spec (default: built-in)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("--config", default="desk", help="preset name (desk, paper) or JSON path")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory (checkpoint.dgmn, loss.csv)")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--no-noisy-teacher", action="store_true", help="teacher sees clean views")
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    for name, mode in (("probe", "lp"), ("finetune", "ft")):
        p = sub.add_parser(name, help="linear probe or fine-tune evaluation")
        _ckpt_args(p, labels=True)
        p.add_argument("--mode", choices=("lp", "ft"), default=mode)
        p.add_argument("--train-frac", type=float, default=1.0, help="fraction of the train split kept per class")
        p.add_argument("--test-frac", type=float, default=0.3)
        p.add_argument("--epochs", type=int, default=10, help="fine-tuning epochs")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=cmd_probe)

    p = sub.add_parser("attn-entropy", help="attention-distance entropy per stage/layer/head")
    _ckpt_args(p)
    p.add_argument("--bins", type=int, default=16)
    p.set_defaults(func=cmd_attn_entropy)

    p = sub.add_parser("attn-map", help="export semantic attention maps as .vol")
    _ckpt_args(p)
    p.add_argument("--limit", type=int, default=None, help="only the first N volumes")
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("cluster", help="inter/intra cluster distances of pooled features")
    _ckpt_args(p, labels=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write to this directory instead of the recorded one")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .trainer import configure_determinism

    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    configure_determinism()
    started = time.time()
    try:
        artifacts, config, seed = args.func(args)
        if args.command != "replay":
            write_manifest(Path(args.out), args.command, argv, artifacts, config, seed, started)
    except DagmanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 3
    print(json.dumps({"command": args.command, "out": getattr(args, "out", None), "artifacts": [str(a) for a in artifacts]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
