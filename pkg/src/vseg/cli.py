"""Command-line entry points orchestrating the segmentation pipeline.

One binary, subcommand style. Flag values override config-file values, which
override defaults; every run echoes its effective configuration into the
output directory. Exit codes: 0 success, 2 usage, 3 missing file, 4 schema
or format mismatch, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (CLASS_NAMES, ManifestError, load_split, load_subject,
                   read_manifest, save_subject, write_manifest)
from .ensemble import (DEFAULT_MIN_SIZE, DEFAULT_THRESHOLD, EnsembleConfig,
                       EnsembleError, segment_subject, suggest_corrections,
                       suggestions_to_json, train_ensemble)
from .metrics import MetricError, evaluate
from .network import (CheckpointError, ConfigError, NetworkConfig, build_network,
                      load_checkpoint, save_checkpoint)
from .phantom import PhantomConfig, generate_phantom
from .training import TrainConfig, TrainingError, train
from .volume import Volume, VolumeFormatError, read_volume, write_volume

log = logging.getLogger("vseg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_RUNTIME = 5


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load_config_file(path):
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_MISSING, f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib  # py >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except Exception as exc:
            raise CliError(EXIT_SCHEMA, f"config file {path}: {exc}")
    if path.suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_SCHEMA, f"config file {path}: {exc}")
    raise CliError(EXIT_SCHEMA, f"config file {path}: expected .toml or .json")


def effective_config(args, defaults, command):
    """defaults <- config file values <- explicitly set flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        file_values = _load_config_file(args.config)
        scoped = file_values.get(command, file_values)
        unknown = [k for k in scoped if k not in defaults and k != command]
        if unknown:
            raise CliError(EXIT_SCHEMA,
                           f"config file has unknown keys for '{command}': {unknown}")
        merged.update({k: v for k, v in scoped.items() if k in defaults})
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def echo_config(cfg, out_dir, command):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **cfg}
    (out_dir / "run_config.json").write_text(json.dumps(doc, indent=1))
    log.info("effective config: %s", json.dumps(doc, sort_keys=True))
    return out_dir


def _require(path, what):
    if not Path(path).exists():
        raise CliError(EXIT_MISSING, f"{what} not found: {path}")
    return Path(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

PHANTOM_DEFAULTS = {
    "n": 10, "dims": 48, "seed": 7, "noise_std": 25.0, "smoothness": 7.0,
    "train_count": 8, "val_count": 2, "format": "nii",
}


def cmd_phantom(args):
    cfg = effective_config(args, PHANTOM_DEFAULTS, "phantom")
    out = echo_config(cfg, args.out, "phantom")
    side = int(cfg["dims"])
    pcfg = PhantomConfig(dims=(side, side, side), noise_std=float(cfg["noise_std"]),
                         smoothness=float(cfg["smoothness"]))
    entries = []
    for i in range(int(cfg["n"])):
        subject = generate_phantom(pcfg, seed=int(cfg["seed"]) + i, subject_id=f"phantom_{i:03d}")
        entry = save_subject(subject, out / subject.id, fmt=cfg["format"])
        entry = {k: (v if k == "id" else f"{subject.id}/{v}") for k, v in entry.items()}
        if i < int(cfg["train_count"]):
            entry["split"] = "train"
        elif i < int(cfg["train_count"]) + int(cfg["val_count"]):
            entry["split"] = "val"
        else:
            entry["split"] = "test"
        entries.append(entry)
    write_manifest(out / "manifest.json", entries)
    (out / "phantom_config.json").write_text(json.dumps({
        "dims": list(pcfg.dims), "t1_means": list(pcfg.t1_means),
        "t2_means": list(pcfg.t2_means), "noise_std": pcfg.noise_std,
        "smoothness": pcfg.smoothness, "seed": int(cfg["seed"])}, indent=1))
    print(f"wrote {len(entries)} phantoms to {out}")
    return EXIT_OK


TRAIN_DEFAULTS = {
    "seed": 0, "scale": 1.0, "fusion": "early", "epochs": 30, "subepochs": 20,
    "samples": 1000, "batch_size": 20, "lr": 0.001, "momentum": 0.6,
    "foreground_fraction": 0.5, "val_samples": 200,
}


def _train_configs(cfg):
    net_cfg = NetworkConfig(fusion=cfg["fusion"], scale_factor=float(cfg["scale"]))
    train_cfg = TrainConfig(
        epochs=int(cfg["epochs"]), subepochs_per_epoch=int(cfg["subepochs"]),
        samples_per_subepoch=int(cfg["samples"]), batch_size=int(cfg["batch_size"]),
        lr0=float(cfg["lr"]), momentum=float(cfg["momentum"]),
        foreground_center_fraction=float(cfg["foreground_fraction"]),
        val_samples=int(cfg["val_samples"]), seed=int(cfg["seed"]))
    return net_cfg, train_cfg


def cmd_train(args):
    manifest = _require(args.manifest, "manifest")
    cfg = effective_config(args, TRAIN_DEFAULTS, "train")
    out = echo_config(cfg, args.out, "train")
    train_subjects = load_split(manifest, "train")
    val_subjects = load_split(manifest, "val")
    if not train_subjects:
        raise CliError(EXIT_SCHEMA, f"manifest {manifest} has no 'train' subjects")
    net_cfg, train_cfg = _train_configs(cfg)
    net = build_network(net_cfg, np.random.default_rng(train_cfg.seed))
    history = train(net, train_subjects, val_subjects, train_cfg)
    ckpt = out / "model.vseg"
    save_checkpoint(net, ckpt)
    history.to_csv(out / "history.csv")
    print(f"trained 1 model: final loss {history.final_train_loss():.4f}, checkpoint {ckpt}")
    return EXIT_OK


ENSEMBLE_DEFAULTS = {**TRAIN_DEFAULTS, "k": 10, "train_per_model": 8, "val_per_model": 2,
                     "master_seed": 0}
del ENSEMBLE_DEFAULTS["seed"]


def cmd_train_ensemble(args):
    manifest = _require(args.manifest, "manifest")
    cfg = effective_config(args, ENSEMBLE_DEFAULTS, "train-ensemble")
    out = echo_config(cfg, args.out, "train-ensemble")
    pool = [s for s in load_split(manifest, None)]
    pool = [s for s, e in zip(pool, read_manifest(manifest)) if e.get("split") != "test"]
    cfg_seeded = dict(cfg, seed=0)
    net_cfg, base_cfg = _train_configs(cfg_seeded)
    ens_cfg = EnsembleConfig(
        k=int(cfg["k"]), train_per_model=int(cfg["train_per_model"]),
        val_per_model=int(cfg["val_per_model"]), base=base_cfg, network=net_cfg,
        master_seed=int(cfg["master_seed"]))
    nets, split_manifest = train_ensemble(pool, ens_cfg)
    for i, net in enumerate(nets):
        save_checkpoint(net, out / f"model_{i:02d}.vseg")
    (out / "splits.json").write_text(json.dumps(split_manifest, indent=1))
    print(f"trained {len(nets)} models into {out}")
    return EXIT_OK


SEGMENT_DEFAULTS = {"threshold": DEFAULT_THRESHOLD}


def cmd_segment(args):
    manifest = _require(args.manifest, "manifest")
    cfg = effective_config(args, SEGMENT_DEFAULTS, "segment")
    out = echo_config(cfg, args.out, "segment")
    entries = {e["id"]: e for e in read_manifest(manifest)}
    if args.subject not in entries:
        raise CliError(EXIT_SCHEMA, f"subject {args.subject!r} not in manifest")
    subject = load_subject(entries[args.subject], Path(manifest).parent)
    nets = [load_checkpoint(_require(p, "checkpoint")) for p in args.checkpoints]
    fused, agreement, mean_probs, _ = segment_subject(nets, subject)

    write_volume(Volume(fused, spacing=subject.spacing), out / "fused.nii")
    write_volume(Volume(agreement.agreement, spacing=subject.spacing), out / "agreement.nii")
    for cls, name in enumerate(CLASS_NAMES):
        write_volume(Volume(mean_probs[cls], spacing=subject.spacing),
                     out / f"prob_{name}.nii")
    for key in ("t1", "t2", "mask"):
        write_volume(getattr(subject, key), out / f"{key}.nii")
    write_volume(subject.labels, out / "truth.nii")
    case = {
        "id": subject.id, "dims": list(subject.dims), "spacing": list(subject.spacing),
        "classes": list(CLASS_NAMES), "k": len(nets), "threshold": float(cfg["threshold"]),
        "files": {"t1": "t1.nii", "t2": "t2.nii", "mask": "mask.nii", "fused": "fused.nii",
                  "agreement": "agreement.nii", "truth": "truth.nii"},
    }
    (out / "case.json").write_text(json.dumps(case, indent=1))
    print(f"segmented {subject.id} with K={len(nets)}: case dir {out}")
    return EXIT_OK


EVALUATE_DEFAULTS = {"mhd_mode": "per_direction"}


def cmd_evaluate(args):
    pred = read_volume(_require(args.pred, "prediction volume"))
    truth = read_volume(_require(args.truth, "truth volume"))
    cfg = effective_config(args, EVALUATE_DEFAULTS, "evaluate")
    out = echo_config(cfg, args.out, "evaluate")
    report = evaluate(pred.data, truth.data, spacing=truth.spacing, mhd_mode=cfg["mhd_mode"])
    report.to_csv(out / "metrics.csv")
    report.to_json(out / "metrics.json")
    for c in report.classes:
        print(f"{c.class_name}: dsc {c.dsc:.4f}"
              + (f", mhd {c.mhd:.3f} mm, asd {c.asd:.3f} mm" if c.mhd is not None
                 else f" ({c.flags})"))
    return EXIT_OK


SUGGEST_DEFAULTS = {"threshold": DEFAULT_THRESHOLD, "min_size": DEFAULT_MIN_SIZE, "k": 0,
                    "volume_id": ""}


def cmd_suggest(args):
    agreement = read_volume(_require(args.agreement, "agreement volume"))
    fused = read_volume(_require(args.fused, "fused label volume"))
    cfg = effective_config(args, SUGGEST_DEFAULTS, "suggest")
    out = echo_config(cfg, args.out, "suggest")
    mask = None
    if args.mask:
        mask = read_volume(_require(args.mask, "mask volume")).data
    suggestions = suggest_corrections(agreement.data, fused.data,
                                      threshold=float(cfg["threshold"]),
                                      min_size=int(cfg["min_size"]), mask=mask)
    k = int(cfg["k"]) or int(round(1.0 / max(np.min(agreement.data[agreement.data > 0]), 1e-6)))
    volume_id = cfg["volume_id"] or Path(args.fused).stem
    suggestions_to_json(suggestions, volume_id, k, float(cfg["threshold"]),
                        path=out / "suggestions.json")
    print(f"{len(suggestions)} suggestions written to {out / 'suggestions.json'}")
    return EXIT_OK


SERVE_DEFAULTS = {"port": 8000, "host": "127.0.0.1"}


def cmd_serve(args):
    from .server import CaseState, serve_case
    case_dir = _require(args.case, "case directory")
    cfg = effective_config(args, SERVE_DEFAULTS, "serve")
    state = CaseState(case_dir)
    ui_dir = Path(args.ui) if args.ui else None
    if ui_dir is not None and not ui_dir.exists():
        raise CliError(EXIT_MISSING, f"ui directory not found: {ui_dir}")
    print(f"serving case {state.meta['id']} on http://{cfg['host']}:{cfg['port']}")
    serve_case(state, host=cfg["host"], port=int(cfg["port"]), ui_dir=ui_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="vseg",
                                     description="semi-dense FCNN ensemble segmentation")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--dims", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--smoothness", type=float)
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("--val-count", dest="val_count", type=int)
    p.add_argument("--format", choices=["nii", "native"])
    p.set_defaults(func=cmd_phantom)

    def add_train_flags(q):
        q.add_argument("--config")
        q.add_argument("--scale", type=float)
        q.add_argument("--fusion", choices=["early", "late"])
        q.add_argument("--epochs", type=int)
        q.add_argument("--subepochs", type=int)
        q.add_argument("--samples", type=int)
        q.add_argument("--batch-size", dest="batch_size", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--momentum", type=float)
        q.add_argument("--foreground-fraction", dest="foreground_fraction", type=float)
        q.add_argument("--val-samples", dest="val_samples", type=int)

    p = sub.add_parser("train", help="train a single model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-ensemble", help="train K models on random subsets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--master-seed", dest="master_seed", type=int)
    p.add_argument("--train-per-model", dest="train_per_model", type=int)
    p.add_argument("--val-per-model", dest="val_per_model", type=int)
    add_train_flags(p)
    p.set_defaults(func=cmd_train_ensemble)

    p = sub.add_parser("segment", help="fuse checkpoint predictions on one subject")
    p.add_argument("--manifest", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--threshold", type=float)
    p.add_argument("checkpoints", nargs="+", metavar="CHECKPOINT")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="DSC / MHD / ASD against a truth volume")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mhd-mode", dest="mhd_mode", choices=["per_direction", "pooled"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("suggest", help="export ranked low-confidence regions")
    p.add_argument("--agreement", required=True)
    p.add_argument("--fused", required=True)
    p.add_argument("--mask")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-size", dest="min_size", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--volume-id", dest="volume_id")
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("serve", help="HTTP service for the review UI")
    p.add_argument("--case", required=True)
    p.add_argument("--port", type=int)
    p.add_argument("--host")
    p.add_argument("--ui", help="static directory with the built frontend")
    p.add_argument("--config")
    p.set_defaults(func=cmd_serve)
    return parser


_ERROR_CODES = (
    (FileNotFoundError, EXIT_MISSING),
    ((VolumeFormatError, ManifestError, CheckpointError, ConfigError,
      json.JSONDecodeError, KeyError), EXIT_SCHEMA),
    ((TrainingError, EnsembleError, MetricError, ValueError, RuntimeError), EXIT_RUNTIME),
)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f'error exit={exc.code} msg="{exc}"', file=sys.stderr)
        return exc.code
    except Exception as exc:  # map known failure classes to stable exit codes
        for types, code in _ERROR_CODES:
            if isinstance(exc, types):
                print(f'error exit={code} kind={type(exc).__name__} msg="{exc}"',
                      file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
