"""Command-line entry point: ``hgmamba <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from . import gradsuite, metrics, numeric
from .autodiff import load_checkpoint, read_checkpoint
from .autodiff.checkpoint import CheckpointError
from .model import PRESETS, TABLE1_PARAMS, HGMamba, ModelConfig, parameter_table, preset
from .train import Trainer, TrainConfig, evaluate_windows, run_directory, train_preset

log = logging.getLogger("hgmamba")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# ---------------------------------------------------------------- config assembly


def _load_config_file(path) -> tuple[dict, dict]:
    d = json.loads(Path(path).read_text())
    if "model" in d or "train" in d:
        return d.get("model", {}), d.get("train", {})
    return d, {}


def build_configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_d, train_d = {}, {}
    name = getattr(args, "preset", None) or "tiny"
    if getattr(args, "config", None):
        model_d, train_d = _load_config_file(args.config)
    model_over = {k: v for k, v in {
        "seed": getattr(args, "seed", None),
        "shuffle_p": getattr(args, "shuffle_p", None),
        "velocity_weight": getattr(args, "velocity_weight", None),
        "mlp_ratio": getattr(args, "mlp_ratio", None),
    }.items() if v is not None}
    mcfg = preset(name, **{**model_d, **model_over})
    train_over = {k: v for k, v in {
        "batch_size": getattr(args, "batch_size", None),
        "epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "lr_decay": getattr(args, "lr_decay", None),
        "weight_decay": getattr(args, "weight_decay", None),
        "max_steps": getattr(args, "max_steps", None),
        "workers": getattr(args, "workers", None),
        "eval_every": getattr(args, "eval_every", None),
    }.items() if v is not None}
    if getattr(args, "no_flip", False):
        train_over["flip_augment"] = False
    tcfg = train_preset(name, **{**train_d, **train_over})
    return mcfg, tcfg


def model_from_checkpoint(path) -> tuple[HGMamba, dict]:
    header, _ = read_checkpoint(path)
    meta = header["meta"]
    if "model" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no model config")
    model = HGMamba(ModelConfig.from_dict(meta["model"]))
    load_checkpoint(path, model.store)
    return model, meta


# ---------------------------------------------------------------- commands


def cmd_params(args) -> int:
    names = args.preset or ["xs", "s", "b"]
    for name in names:
        cfg = preset(name) if not args.config else ModelConfig.from_dict(_load_config_file(args.config)[0])
        model = HGMamba(cfg)
        total = model.num_parameters()
        print(f"[{name}] depth={cfg.depth} dim={cfg.dim} frames={cfg.frames} expand={cfg.expand} "
              f"d_state={cfg.d_state} mlp_ratio={cfg.mlp_ratio}")
        for group, count in parameter_table(model):
            print(f"  {group:<28} {count:>12,}")
        line = f"  {'total':<28} {total:>12,}"
        ref = TABLE1_PARAMS.get(name)
        if ref:
            ratio = total / ref
            line += f"   reference {ref / 1e6:.1f}M  ratio {ratio:.3f}  {'within' if abs(ratio - 1) <= 0.15 else 'outside'} 15%"
        print(line)
    return EXIT_OK


def _training_data(args, mcfg: ModelConfig) -> data_mod.PoseDataset:
    if args.data:
        return data_mod.load_dataset(args.data)
    return data_mod.generate_synthetic(args.data_seed, args.synthetic, mcfg.frames)


def cmd_train(args) -> int:
    mcfg, tcfg = build_configs(args)
    dataset = _training_data(args, mcfg)
    val = None
    if args.val_fraction > 0:
        dataset, val = data_mod.split_by_sequence(dataset, args.val_fraction, seed=mcfg.seed)
    windows = data_mod.make_windows(dataset, mcfg.frames)
    run_dir = run_directory(args.runs, mcfg, tcfg, dataset.content_hash())
    model = HGMamba(mcfg)
    trainer = Trainer(model, tcfg, windows, run_dir, dataset.content_hash())
    if args.resume and trainer.resume():
        log.info("resumed %s at epoch %d (step %d)", run_dir, trainer.epoch, model.store.step)
    elif (run_dir / "checkpoint.hgm").exists() and not args.resume:
        raise ValueError(f"run directory {run_dir} already holds a checkpoint; pass --resume to continue it")
    log.info("run directory %s", run_dir)
    log.info("model config %s", json.dumps(mcfg.to_dict(), sort_keys=True))
    log.info("train config %s", json.dumps(dataclasses.asdict(tcfg), sort_keys=True))
    manifest = trainer.fit()
    if val is not None and len(val):
        report = evaluate_windows(model, data_mod.make_windows(val, mcfg.frames))
        manifest.history[-1]["val"] = dataclasses.asdict(report)
        (run_dir / "manifest.json").write_text(manifest.to_json())
    last = manifest.history[-1] if manifest.history else {}
    print(json.dumps({"run_dir": str(run_dir), "manifest_hash": manifest.identity(), **last}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = model_from_checkpoint(args.checkpoint)
    dataset = data_mod.load_dataset(args.data)
    windows = data_mod.make_windows(dataset, model.config.frames, args.stride)
    if windows.targets is None:
        raise ValueError(f"{args.data} has no 3D ground truth")
    pred = model.predict(windows.inputs, flip_test=args.flip_test)
    report = metrics.evaluate(pred, windows.targets, groups=windows.sequence if args.per_sequence else None,
                              strict_rigid=args.strict_rigid, root=model.skeleton.root)
    report.extra = {"config_hash": meta.get("manifest_hash", ""), "git": git_describe(),
                    "dataset_hash": dataset.content_hash(), "flip_test": args.flip_test,
                    "strict_rigid": args.strict_rigid, "checkpoint": str(args.checkpoint)}
    text = report.to_json()
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{dataset.content_hash()}.json"
    out.write_text(text)
    print(text)
    return EXIT_OK


def predict_sequences(model: HGMamba, dataset: data_mod.PoseDataset, stride: int | None = None,
                      flip_test: bool = False) -> list[np.ndarray]:
    """Per-frame 3D predictions (root-relative mm), averaging overlapping windows."""
    windows = data_mod.make_windows(dataset, model.config.frames, stride, dtype=model.dtype)
    pred = model.predict(windows.inputs, flip_test=flip_test)
    T = model.config.frames
    outs = []
    for i, n in enumerate(dataset.frame_counts):
        acc = np.zeros((n, model.config.joints, 3))
        cnt = np.zeros((n, 1, 1))
        for w in np.flatnonzero(windows.sequence == i):
            s = windows.start[w]
            acc[s:s + T] += pred[w]
            cnt[s:s + T] += 1
        outs.append((acc / cnt).astype(np.float32))
    return outs


def cmd_infer(args) -> int:
    model, _ = model_from_checkpoint(args.checkpoint)
    dataset = data_mod.load_dataset(args.input)
    if dataset.poses_2d is None:
        raise ValueError(f"{args.input} has no 2D block")
    seqs = predict_sequences(model, dataset, args.stride, args.flip_test)
    meta = {"source": str(args.input), "units": "mm, root-relative", "flip_test": args.flip_test}
    data_mod.save_dataset(args.output, data_mod.PoseDataset(seqs, None, dataset.skeleton, dataset.split,
                                                            dataset.stride, meta))
    print(f"wrote {len(seqs)} sequence(s), {sum(len(s) for s in seqs)} frames to {args.output}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(seed=args.seed, n_coords=args.coords, include_model=not args.no_model)
    print(gradsuite.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} cases passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = bench_mod.run_bench(args.lengths, args.states, args.channels, args.modes, args.repeats, args.seed)
    text = bench_mod.to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_data_gen(args) -> int:
    ds = data_mod.generate_synthetic(args.seed, args.sequences, args.frames)
    if args.sigma > 0 or args.outlier_rate > 0:
        ds.poses_2d = [data_mod.add_noise(p, args.sigma, args.outlier_rate, args.seed + i).astype(np.float32)
                       for i, p in enumerate(ds.poses_2d)]
        ds.meta["noise"] = {"sigma": args.sigma, "outlier_rate": args.outlier_rate}
    ds.stride = args.stride
    data_mod.save_dataset(args.out, ds)
    print(f"wrote {len(ds)} sequences x {args.frames} frames to {args.out} (hash {ds.content_hash()})")
    return EXIT_OK


def cmd_data_inspect(args) -> int:
    ds = data_mod.load_dataset(args.file)
    counts = ds.frame_counts
    info = {
        "file": str(args.file),
        "skeleton": ds.skeleton.name,
        "joints": ds.skeleton.num_joints,
        "sequences": len(ds),
        "frames_total": int(sum(counts)),
        "frames_min": int(min(counts)),
        "frames_max": int(max(counts)),
        "has_2d": ds.poses_2d is not None,
        "has_3d": ds.poses_3d is not None,
        "stride": ds.stride,
        "split": ds.split,
        "hash": ds.content_hash(),
        "meta": ds.meta,
    }
    if ds.poses_3d is not None:
        P = np.concatenate(ds.poses_3d)
        info["shape_3d_first"] = list(ds.poses_3d[0].shape)
        info["range_3d_mm"] = [float(P.min()), float(P.max())]
    if ds.poses_2d is not None:
        Q = np.concatenate(ds.poses_2d)
        info["range_2d"] = [float(Q.min()), float(Q.max())]
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_data_convert(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    if src.suffix.lower() == ".json":
        ds = data_mod.dataset_from_json(json.loads(src.read_text()))
        data_mod.save_dataset(dst, ds)
    else:
        ds = data_mod.load_dataset(src)
        dst.write_text(json.dumps(data_mod.dataset_to_json(ds)))
    print(f"converted {src} -> {dst} ({len(ds)} sequences)")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _model_flags(p: argparse.ArgumentParser, presets_multi: bool = False) -> None:
    if presets_multi:
        p.add_argument("--preset", nargs="+", choices=sorted(PRESETS))
    else:
        p.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    p.add_argument("--config", help="JSON file with model (and optionally train) fields")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hgmamba", description="2D-to-3D pose lifting with Mamba and HyperGCN streams")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="per-module parameter counts vs reference sizes")
    _model_flags(p, presets_multi=True)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("train", help="train a model; writes checkpoint and manifest under --runs/<hash>")
    _model_flags(p)
    p.add_argument("--data", help="HGPOSE1 dataset (default: synthetic)")
    p.add_argument("--synthetic", type=int, default=64, help="number of synthetic sequences when --data is absent")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--runs", default="runs")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--shuffle-p", type=float)
    p.add_argument("--velocity-weight", type=float)
    p.add_argument("--mlp-ratio", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--workers", type=int, help="batch shards per step (run sequentially, per-shard RNG streams)")
    p.add_argument("--no-flip", action="store_true", help="disable horizontal-flip augmentation")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset; prints a JSON report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--flip-test", action="store_true", help="average with the prediction for the mirrored input")
    p.add_argument("--strict-rigid", action="store_true", help="Procrustes without scale")
    p.add_argument("--per-sequence", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="lift a 2D HGPOSE1 file to a 3D-only HGPOSE1 file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--flip-test", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=100)
    p.add_argument("--no-model", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="time recurrent / chunked / FFT / direct SSM evaluation; CSV out")
    p.add_argument("--lengths", type=int, nargs="+", default=[64, 256, 1024, 4096])
    p.add_argument("--states", type=int, nargs="+", default=[16])
    p.add_argument("--channels", type=int, nargs="+", default=[4])
    p.add_argument("--modes", nargs="+", choices=bench_mod.MODES, default=list(bench_mod.MODES))
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("data", help="dataset utilities")
    dsub = p.add_subparsers(dest="data_command", required=True)
    q = dsub.add_parser("gen", help="generate a synthetic HGPOSE1 dataset")
    q.add_argument("--sequences", type=int, default=64)
    q.add_argument("--frames", type=int, default=243)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--sigma", type=float, default=0.0, help="2D jitter std (normalized image units)")
    q.add_argument("--outlier-rate", type=float, default=0.0)
    q.add_argument("--stride", type=int, default=1, help="window stride recorded in the header")
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_data_gen)
    q = dsub.add_parser("inspect", help="print a summary of an HGPOSE1 file")
    q.add_argument("file")
    q.set_defaults(fn=cmd_data_inspect)
    q = dsub.add_parser("convert-json", help="convert JSON <-> HGPOSE1 (direction from the input suffix)")
    q.add_argument("input")
    q.add_argument("output")
    q.set_defaults(fn=cmd_data_convert)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose or args.command == "train" else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        numeric.default_dtype()
        return args.fn(args)
    except numeric.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
