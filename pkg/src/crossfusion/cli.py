"""Command-line entry point.

Subcommands: synth, corrupt, train, eval, robustness, ablate, gradcheck.
Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
Every run writes a line-delimited JSON log carrying the configuration
fingerprint, the seed, and per-step metrics, so result tables can be
rebuilt from logs alone.

Dataset compatibility: artifacts embed two fingerprints -- the full
configuration fingerprint and a split-invariant dataset identity (the
synthesis section minus scene count and seed). ``eval`` refuses to pair a
checkpoint with a dataset whose identity differs unless --force is given.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, fingerprint_of, load_run_config
from .corruption import BeamMode, CorruptionSpec
from .evalkit import (
    default_protocols,
    evaluate_model,
    plot_bev,
    robustness_suite,
    robustness_table,
    ablation_suite,
)
from .scene_synth import SynthConfig, generate_dataset, load_dataset, save_dataset
from .trainer import load_checkpoint, save_checkpoint, train_both, train_stage1, train_stage2


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit 1)."""

    def error(self, message):
        raise ConfigError(f"{message}\n{self.format_usage()}")


class JsonlLogger:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, record: dict):
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


def dataset_identity(synth_cfg: SynthConfig) -> str:
    """Split-invariant dataset identity: the synthesis config without the
    scene count and seed."""
    d = synth_cfg.to_dict()
    d.pop("n_scenes")
    d.pop("seed")
    return fingerprint_of(d)


def _build_parser() -> _Parser:
    p = _Parser(prog="crossfusion", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic mode")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, help="override synth.n_scenes")
    s.add_argument("--seed", type=int, help="override synth.seed")

    c = sub.add_parser("corrupt", help="apply a LiDAR corruption to a dataset")
    c.add_argument("--kind", required=True, choices=["beams", "ratio", "fov"])
    c.add_argument("--param", required=True,
                   help="beams: full|beam16|beam4; ratio: keep ratio; fov: half-angle rad")
    c.add_argument("--in", dest="src", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--by-beam-index", action="store_true")

    t = sub.add_parser("train", help="train stage 1, stage 2, or both")
    t.add_argument("--stage", choices=["1", "2", "both"], default="both")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--out", required=True)
    t.add_argument("--stage1-ckpt", help="required for --stage 2")
    t.add_argument("--log", help="JSONL metrics log (default <out>.log.jsonl)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="write the report JSON here")
    e.add_argument("--mode", choices=["fusion", "proposal"], default="fusion")
    e.add_argument("--force", action="store_true",
                   help="ignore dataset/checkpoint fingerprint mismatch")
    e.add_argument("--plots", help="write BEV plot images into this directory")

    r = sub.add_parser("robustness", help="run the corruption protocol suite")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="train/evaluate the ablation variants")
    a.add_argument("--data", required=True)
    a.add_argument("--val-data", required=True)
    a.add_argument("--out")
    a.add_argument("--log")

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--tol", type=float, default=1e-4)
    return p


def _load_cfg(args) -> RunConfig:
    cfg = load_run_config(args.config, args.overrides)
    if args.deterministic:
        cfg.train.deterministic = True
    return cfg


def _load_dataset_checked(path: str):
    root = Path(path)
    if not root.exists():
        raise ConfigError(f"dataset directory {path!r} does not exist (--data/--in)")
    return load_dataset(root)


def _cmd_synth(args, cfg: RunConfig) -> int:
    if args.scenes is not None:
        cfg.synth.n_scenes = args.scenes
    if args.seed is not None:
        cfg.synth.seed = args.seed
    samples = generate_dataset(cfg.synth)
    save_dataset(samples, Path(args.out), cfg.synth, fingerprint=dataset_identity(cfg.synth))
    print(f"wrote {len(samples)} scenes to {args.out}")
    return 0


def _cmd_corrupt(args, cfg: RunConfig) -> int:
    samples, meta = _load_dataset_checked(args.src)
    if args.kind == "beams":
        mode = {"full": BeamMode.FULL, "beam16": BeamMode.BEAM16, "beam4": BeamMode.BEAM4,
                "16": BeamMode.BEAM16, "4": BeamMode.BEAM4}.get(args.param.lower())
        if mode is None:
            raise ConfigError(f"bad beams parameter {args.param!r}")
        spec = CorruptionSpec(kind="beams", beam_mode=mode,
                              by_beam_index=args.by_beam_index, seed=args.seed)
    elif args.kind == "ratio":
        spec = CorruptionSpec(kind="ratio", keep_ratio=float(args.param), seed=args.seed)
    else:
        spec = CorruptionSpec(kind="fov", half_angle=float(args.param), seed=args.seed)

    n_beams = meta.get("config", {}).get("beam_count")
    for s in samples:
        s.cloud = spec.apply(s.cloud, seed=(args.seed, s.index), total_beams=n_beams)
    synth = SynthConfig.from_dict(meta["config"])
    out = Path(args.out)
    save_dataset(samples, out, synth, fingerprint=meta.get("fingerprint", ""))
    doc = json.loads((out / "meta.json").read_text())
    doc["corruption"] = {"kind": args.kind, "param": args.param, "seed": args.seed,
                         "by_beam_index": args.by_beam_index}
    (out / "meta.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    print(f"wrote corrupted dataset ({spec.label()}) to {args.out}")
    return 0


def _cmd_train(args, cfg: RunConfig) -> int:
    samples, meta = _load_dataset_checked(args.data)
    log = JsonlLogger(args.log or (args.out + ".log.jsonl"))
    fp = cfg.fingerprint()
    log({"event": "start", "command": "train", "stage": args.stage,
         "fingerprint": fp, "seed": cfg.train.seed})
    n_beams = meta.get("config", {}).get("beam_count")
    dump = args.out + ".diverged.json"

    if args.stage == "1":
        model, trace = train_stage1(samples, cfg.train, cfg.model, cfg.voxel, cfg.cost,
                                    log=log, dump_path=dump)
        stage = 1
    elif args.stage == "2":
        if not args.stage1_ckpt:
            raise ConfigError("--stage 2 requires --stage1-ckpt")
        model, payload = load_checkpoint(args.stage1_ckpt)
        model, trace = train_stage2(samples, model, cfg.train, cfg.cost,
                                    log=log, dump_path=dump, n_beams=n_beams)
        stage = 2
    else:
        model, trace = train_both(samples, cfg.train, cfg.model, cfg.voxel, cfg.cost,
                                  log=log, dump_path=dump, n_beams=n_beams)
        stage = 2

    save_checkpoint(args.out, model, cfg.train, cfg.cost, stage=stage, step=len(trace),
                    dataset_fingerprint=meta.get("fingerprint", ""), config_fingerprint=fp)
    print(f"trained stage {args.stage}: {len(trace)} steps, final loss {trace[-1]:.4f}")

    if args.val_data:
        val, _ = _load_dataset_checked(args.val_data)
        report = evaluate_model(model, val, label="val", fingerprint=fp)
        log({"event": "val", "mean_ap": report.mean_ap,
             "map_by_threshold": {str(k): v for k, v in report.map_by_threshold.items()}})
        print(f"validation mAP {report.mean_ap:.3f} (mAP@2m {report.map_at(2.0):.3f})")
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    if not Path(args.ckpt).exists():
        raise ConfigError(f"checkpoint {args.ckpt!r} does not exist (--ckpt)")
    model, payload = load_checkpoint(args.ckpt)
    samples, meta = _load_dataset_checked(args.data)
    ds_fp = meta.get("fingerprint", "")
    ck_fp = payload.get("dataset_fingerprint", "")
    if ds_fp and ck_fp and ds_fp != ck_fp and not args.force:
        raise ConfigError(
            f"dataset fingerprint {ds_fp} does not match checkpoint's {ck_fp}; "
            "pass --force to evaluate anyway"
        )
    report = evaluate_model(model, samples, mode=args.mode, label=args.mode,
                            fingerprint=payload.get("config_fingerprint", ""))
    text = json.dumps(report.to_dict(), sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(f"mAP {report.mean_ap:.4f}  mAP@2m {report.map_at(2.0):.4f}  "
          f"mATE {report.mate if report.mate is not None else float('nan'):.3f}")
    if args.plots:
        plot_dir = Path(args.plots)
        plot_dir.mkdir(parents=True, exist_ok=True)
        for s in samples[:8]:
            dets = (model.predict_proposal_only(s.cloud) if args.mode == "proposal"
                    else model.predict(s.cloud, s.images, s.calibs))
            plot_bev(s, dets, plot_dir / f"scene{s.index:05d}.png")
    return 0


def _cmd_robustness(args, cfg: RunConfig) -> int:
    model, payload = load_checkpoint(args.ckpt)
    samples, meta = _load_dataset_checked(args.data)
    n_beams = meta.get("config", {}).get("beam_count")
    rows = robustness_suite(model, samples, seed=args.seed, n_beams=n_beams,
                            fingerprint=payload.get("config_fingerprint", ""))
    table = robustness_table(rows)
    print(table)
    if args.out:
        doc = [{"protocol": r["protocol"], "model": r["model"],
                "report": r["report"].to_dict()} for r in rows]
        Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=1))
    return 0


def _cmd_ablate(args, cfg: RunConfig) -> int:
    train_set, _ = _load_dataset_checked(args.data)
    val_set, _ = _load_dataset_checked(args.val_data)
    log = JsonlLogger(args.log)
    rows = ablation_suite(train_set, val_set, cfg.model, cfg.voxel, cfg.train, cfg.cost,
                          log=log)
    print(f"{'variant':<28} {'order':<8} {'mAP':>7} {'mAP@2m':>7} finite")
    for r in rows:
        print(f"{r['variant']:<28} {r['order']:<8} {r['mAP']:7.3f} {r['mAP@2m']:7.3f} "
              f"{r['finite']}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, sort_keys=True, indent=1))
    return 0


def _cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import run_gradcheck

    torch.set_num_threads(1)
    res = run_gradcheck()
    print(f"max relative error {res.max_rel_err:.3e} over {res.n_scalars} scalars "
          f"(worst {res.worst}) in {res.elapsed_s:.0f}s")
    return 0 if res.passed(args.tol) else 2


_COMMANDS = {
    "synth": _cmd_synth,
    "corrupt": _cmd_corrupt,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "robustness": _cmd_robustness,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_cfg(args)
        if cfg.train.deterministic:
            torch.set_num_threads(1)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
