"""Command-line entry point.

Subcommands: synth, train, eval, ablate, sweep, sdf.  Every run writes a
manifest.json (resolved config, seeds, artifact paths, code version,
timestamps) into --out before doing any work, so a job can be re-run exactly.
Config precedence: built-in defaults < --config JSON file < command-line
flags.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

import argparse
import datetime
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

import mcseg
from mcseg import data as data_mod
from mcseg import evaluation as eval_mod
from mcseg import geometry
from mcseg.errors import NumericalError, VolumeIOError
from mcseg.model import NetConfig
from mcseg.trainer import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("mcseg")


def _write_manifest(out_dir: Path, command: str, config: dict, artifacts: dict, seeds) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "code_version": mcseg.__version__,
        "resolved_config": config,
        "artifacts": artifacts,
        "seeds": seeds,
        "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "finished_at": None,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _finish_manifest(path: Path) -> None:
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest["finished_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(args) -> TrainConfig:
    """defaults < config file < explicit flags."""
    cfg_dict = TrainConfig().to_dict()
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        net = cfg_dict["net"]
        net.update(file_cfg.pop("net", {}))
        cfg_dict.update(file_cfg)
        cfg_dict["net"] = net
    flag_map = {
        "iters": "max_iters",
        "beta": "beta",
        "k": "k",
        "alpha": "alpha",
        "mc_passes": "mc_passes",
        "seed": "seed",
        "w_max": "w_max",
        "lr0": "lr0",
        "lr_decay_every": "lr_decay_every",
        "checkpoint_every": "checkpoint_every",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg_dict[key] = val
    for flag, key in (("width", "base_width"), ("depth", "depth"), ("dropout", "dropout_rate")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg_dict["net"][key] = val
    if getattr(args, "patch", None) is not None:
        cfg_dict["patch"] = [args.patch] * cfg_dict["net"]["dims"]
    if getattr(args, "ablate", None):
        known = {"dis": "use_dis_supervision", "itc": "use_itc", "ctc": "use_ctc", "mask": "use_uncertainty_mask"}
        for item in args.ablate.split(","):
            item = item.strip()
            if item not in known:
                raise SystemExit(f"--ablate accepts {sorted(known)}, got {item!r}")
            cfg_dict[known[item]] = False
    if getattr(args, "eval_teacher", False):
        cfg_dict["eval_use_teacher"] = True
    return TrainConfig.from_dict(cfg_dict)


def _load_split(args, cfg: TrainConfig):
    data_root = Path(args.data)
    train_path = data_root / "train" if (data_root / "train").is_dir() else data_root
    full_train = data_mod.load_dataset(train_path)
    test_ds = None
    test_path = Path(args.test_data) if getattr(args, "test_data", None) else data_root / "test"
    if (test_path / data_mod.DATASET_MANIFEST).exists() or test_path.suffix == ".json":
        test_ds = data_mod.load_dataset(test_path)
    fraction = getattr(args, "labeled_fraction", None)
    if fraction is not None and fraction < 1.0:
        split_seed = args.split_seed if getattr(args, "split_seed", None) is not None else cfg.seed
        train_ds = data_mod.split_labeled(full_train, fraction, seed=split_seed)
    else:
        train_ds = full_train
    return full_train, train_ds, test_ds


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        log.error("output directory %s is not empty (use --force)", out_dir)
        return EXIT_DATA
    extents = (args.size,) * args.dims
    cfg = data_mod.SynthConfig(
        num_cases=args.cases,
        extents=extents,
        noise_sigma=args.noise,
        shape_family=args.shape_family,
        seed=args.seed,
    )
    manifest = _write_manifest(
        out_dir,
        "synth",
        {
            "cases": args.cases,
            "test_cases": args.test_cases,
            "size": args.size,
            "dims": args.dims,
            "noise": args.noise,
            "shape_family": args.shape_family,
        },
        {"train": "train/", "test": "test/" if args.test_cases else None},
        [args.seed],
    )
    train_ds = data_mod.generate_synthetic(cfg)
    data_mod.save_dataset(train_ds, out_dir / "train")
    if args.test_cases:
        test_cfg = replace(cfg, num_cases=args.test_cases, seed=args.seed + 1)
        data_mod.save_dataset(data_mod.generate_synthetic(test_cfg), out_dir / "test")
    _finish_manifest(manifest)
    log.info("wrote %d train / %d test cases to %s", args.cases, args.test_cases, out_dir)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out_dir = Path(args.out)
    manifest = _write_manifest(
        out_dir,
        "train",
        cfg.to_dict(),
        {"checkpoint": "checkpoint.json", "history": "history.csv", "report": "report.csv"},
        [cfg.seed],
    )
    _, train_ds, test_ds = _load_split(args, cfg)
    _, report = train(cfg, train_ds, test_ds=test_ds, out_dir=out_dir, resume_from=args.resume)
    if report is not None:
        log.info("final mean dice %.4f", report.mean("dice"))
    _finish_manifest(manifest)
    return EXIT_OK


def cmd_eval(args) -> int:
    out_dir = Path(args.out)
    manifest = _write_manifest(
        out_dir, "eval", {"checkpoint": args.checkpoint, "teacher": args.teacher},
        {"report": "report.csv"}, [],
    )
    from mcseg.model import load_checkpoint

    bundle = load_checkpoint(args.checkpoint)
    net = bundle.pair.teacher if args.teacher else bundle.pair.student
    test_ds = data_mod.load_dataset(args.data)
    train_cfg = TrainConfig.from_dict(bundle.train_config) if bundle.train_config else TrainConfig()
    infer = eval_mod.InferConfig(patch=train_cfg.patch, stride=train_cfg.eval_stride)
    report = eval_mod.evaluate(net, test_ds, infer, config_fingerprint=train_cfg.fingerprint())
    eval_mod.write_report_csv(report, out_dir / "report.csv")
    log.info("mean dice %.4f over %d cases", report.mean("dice"), len(report.per_case))
    _finish_manifest(manifest)
    return EXIT_OK


def _seed_list(args, cfg) -> list:
    return [cfg.seed + i for i in range(args.seeds)]


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    out_dir = Path(args.out)
    seeds = _seed_list(args, cfg)
    manifest = _write_manifest(out_dir, "ablate", cfg.to_dict(), {"grid": "grid.csv"}, seeds)
    _, train_ds, test_ds = _load_split(args, cfg)
    if test_ds is None:
        log.error("ablation needs a test set (data/test or --test-data)")
        return EXIT_DATA
    grid = eval_mod.run_ablation(cfg, train_ds, test_ds, seeds, out_dir=out_dir)
    for row in grid.rows:
        log.info("row %-12s mean dice %.4f", row.name, row.mean("dice"))
    _finish_manifest(manifest)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _train_config(args)
    out_dir = Path(args.out)
    seeds = _seed_list(args, cfg)
    manifest = _write_manifest(
        out_dir, "sweep",
        {"mode": "beta" if args.beta_sweep else "fraction", **cfg.to_dict()},
        {"grid": "grid.csv", "plot": "grid.png"}, seeds,
    )
    full_train, train_ds, test_ds = _load_split(args, cfg)
    if test_ds is None:
        log.error("sweep needs a test set (data/test or --test-data)")
        return EXIT_DATA
    if args.beta_sweep:
        grid = eval_mod.sweep_beta(cfg, train_ds, test_ds, seeds, out_dir=out_dir)
    else:
        split_seed = args.split_seed if args.split_seed is not None else cfg.seed
        grid = eval_mod.sweep_fraction(
            cfg, full_train, test_ds, seeds, out_dir=out_dir, split_seed=split_seed
        )
    for row in grid.rows:
        log.info("row %-14s mean dice %.4f", row.name, row.mean("dice"))
    _finish_manifest(manifest)
    return EXIT_OK


def cmd_sdf(args) -> int:
    obj = data_mod.load_volume(args.infile)
    out_path = Path(args.out)
    if args.invert:
        if isinstance(obj, data_mod.LabelMask):
            log.error("--invert expects an f32 signed-distance volume, got a mask")
            return EXIT_DATA
        probs = geometry.inverse_sdf(obj.data, k=args.k)
        mask = data_mod.LabelMask((probs >= 0.5).astype(np.uint8), obj.spacing, obj.id)
        data_mod.save_volume(out_path, mask)
    else:
        if not isinstance(obj, data_mod.LabelMask):
            log.error("expected a u8 mask volume to transform, got f32")
            return EXIT_DATA
        sdf = geometry.sdf_transform(obj.data, foreground=args.foreground)
        if args.normalize:
            sdf = geometry.sdf_normalize(sdf)
        vol = data_mod.Volume(sdf.astype(np.float32), obj.spacing, obj.id)
        data_mod.save_volume(out_path, vol)
    return EXIT_OK


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset dir (train/ + test/) or manifest path")
    p.add_argument("--test-data", dest="test_data", help="separate test dataset dir/manifest")
    p.add_argument("--labeled-fraction", dest="labeled_fraction", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--config", help="JSON config file (same schema as manifest resolved_config)")
    p.add_argument("--iters", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mc-passes", dest="mc_passes", type=int)
    p.add_argument("--w-max", dest="w_max", type=float)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lr-decay-every", dest="lr_decay_every", type=int)
    p.add_argument("--width", type=int, help="base channel width")
    p.add_argument("--depth", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--patch", type=int, help="square/cubic patch edge")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--ablate", help="comma list from {dis,itc,ctc,mask} to disable")
    p.add_argument("--eval-teacher", dest="eval_teacher", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcseg",
        description="Semi-supervised segmentation with mutual consistency learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--test-cases", dest="test_cases", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--dims", type=int, default=2, choices=(2, 3))
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--shape-family", dest="shape_family", default="ellipse",
                   choices=("ellipse", "two_lobe"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the teacher-student pair")
    _add_train_flags(p)
    p.add_argument("--resume", help="checkpoint JSON to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", action="store_true", help="evaluate the teacher weights")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the six-row ablation grid")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (cfg.seed + i)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="balance-weight or labeled-fraction sweep")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, default=1)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--beta-sweep", dest="beta_sweep", action="store_true",
                      help="sweep the consistency balance weight")
    mode.add_argument("--fraction-sweep", dest="fraction_sweep", action="store_true",
                      help="sweep the labeled fraction")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sdf", help="mask -> signed distance volume (or back with --invert)")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--invert", action="store_true")
    p.add_argument("--k", type=float, default=geometry.DEFAULT_STEEPNESS)
    p.add_argument("--foreground", type=int, default=1)
    p.add_argument("--normalize", action="store_true", help="scale the SDF into [-1, 1]")
    p.set_defaults(func=cmd_sdf)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VolumeIOError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
