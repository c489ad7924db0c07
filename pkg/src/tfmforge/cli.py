"""Batch command-line front end.

Verbs: gen-data, train, infer, eval, sweep-scale, sweep-noise, plot.  Every
option is a flat dotted config key; the flag form replaces dots with dashes
(key ``max.epochs`` <-> flag ``--max-epochs``).  Precedence is CLI flag >
config-file key > default, and the resolved configuration is echoed to the
output directory so any run can be reproduced from its artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .elasticity import (Dataset, ElasticSubstrate, generate_dataset,
                         normalize_fields)
from .evaluate import (DEFAULT_NOISE_GRID, DEFAULT_SCALE_GRID, evaluate_model,
                       run_sweep)
from .fileio import read_tensor, write_tensor
from .metrics import reports_to_csv_rows
from .models import MODEL_KINDS, build_model
from .plotting import render_field_image
from .rng import RngStream
from .training import (TrainConfig, load_checkpoint, save_checkpoint, train,
                       write_history_csv)


class UsageError(ValueError):
    pass


# key, type, default (None = required), help
_COMMON = [
    ("seed", int, 0, "global random seed"),
]
_MODEL_KEYS = [
    ("model", str, "hybrid", f"model kind, one of {', '.join(MODEL_KINDS)}"),
    ("widths", "intlist", "64,128,256,512", "U-Net stage widths"),
    ("vit.patch", int, 8, "ViT patch side"),
    ("vit.dim", int, 256, "ViT embedding dim"),
    ("vit.layers", int, 6, "ViT encoder layers"),
    ("vit.heads", int, 8, "attention heads"),
    ("hybrid.dim", int, 256, "hybrid inner embedding dim"),
    ("hybrid.layers", int, 4, "hybrid inner encoder layers"),
    ("dropout", float, 0.1, "transformer dropout rate"),
    ("dtype", str, "float32", "parameter dtype: float32 or float64"),
]

COMMANDS = {
    "gen-data": _COMMON + [
        ("out", str, None, "dataset output directory"),
        ("counts", "intlist", "128,16,16", "train,val,test sample counts"),
        ("n", int, 104, "grid size"),
        ("e.pa", float, 10000.0, "substrate Young's modulus (Pa)"),
        ("nu", float, 0.5, "substrate Poisson ratio"),
        ("pixel.size", float, 1.83, "grid step (micrometers)"),
        ("noise.std", float, 0.0, "measurement noise std on u (micrometers)"),
    ],
    "train": _COMMON + _MODEL_KEYS + [
        ("dataset", str, None, "dataset directory"),
        ("out", str, None, "output directory"),
        ("lr", float, 0.0002, "initial learning rate"),
        ("gamma", float, 0.9, "learning-rate decay factor"),
        ("decay.period", int, 40, "epochs between decays"),
        ("patience", int, 10, "early-stopping patience"),
        ("max.epochs", int, 100, "maximum epochs"),
        ("batch.size", int, 8, "minibatch size"),
    ],
    "infer": _COMMON + [
        ("checkpoint", str, None, "trained checkpoint path"),
        ("dataset", str, None, "dataset directory"),
        ("sample.id", str, "", "sample id (default: first test sample)"),
        ("out", str, None, "output directory"),
    ],
    "eval": _COMMON + [
        ("checkpoint", str, None, "trained checkpoint path"),
        ("dataset", str, None, "dataset directory"),
        ("split", str, "test", "dataset split to score"),
        ("out", str, None, "output directory"),
    ],
    "sweep-scale": _COMMON + [
        ("checkpoint", str, None, "trained checkpoint path"),
        ("dataset", str, None, "dataset directory"),
        ("scales", "floatlist", ",".join(map(str, DEFAULT_SCALE_GRID)),
         "scale-ratio grid"),
        ("out", str, None, "output directory"),
    ],
    "sweep-noise": _COMMON + [
        ("checkpoint", str, None, "trained checkpoint path"),
        ("dataset", str, None, "dataset directory"),
        ("noise.levels", "floatlist", ",".join(map(str, DEFAULT_NOISE_GRID)),
         "noise-level grid"),
        ("out", str, None, "output directory"),
    ],
    "plot": _COMMON + [
        ("input", str, None, "TFT1 file holding a 2xNxN field"),
        ("out", str, None, "output path stem"),
        ("threshold.pa", float, 50.0, "minimum magnitude for arrows"),
        ("arrow.stride", int, 15, "grid steps between arrows"),
    ],
}


def _coerce(key, kind, raw):
    try:
        if kind == "intlist":
            return tuple(int(v) for v in str(raw).split(",") if v != "")
        if kind == "floatlist":
            return tuple(float(v) for v in str(raw).split(",") if v != "")
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"malformed value for key {key!r}: {raw!r}") from exc


def parse_config(argv) -> dict:
    """Resolve command + options with precedence CLI flag > file > default."""
    if not argv:
        raise UsageError(f"missing command; expected one of {', '.join(COMMANDS)}")
    command = argv[0]
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    table = COMMANDS[command]

    parser = argparse.ArgumentParser(prog=f"tfmforge {command}", add_help=True)
    parser.add_argument("--config", default=None, help="JSON config file")
    for key, kind, default, help_text in table:
        parser.add_argument("--" + key.replace(".", "-"), dest=key, default=None,
                            help=f"{help_text} (default: {default})")
    args = vars(parser.parse_args(argv[1:]))

    resolved = {key: default for key, _, default, _ in table}
    if args["config"]:
        file_cfg = json.loads(Path(args["config"]).read_text())
        known = {key for key, *_ in table}
        for key, value in file_cfg.items():
            if key not in known:
                raise UsageError(f"unknown config key {key!r} for command {command}")
            resolved[key] = value
    for key, value in args.items():
        if key != "config" and value is not None:
            resolved[key] = value

    for key, kind, _, _ in table:
        if resolved[key] is None:
            raise UsageError(f"missing required option --{key.replace('.', '-')}")
        resolved[key] = _coerce(key, kind, resolved[key])
    resolved["command"] = command
    return resolved


def _limit_threads():
    threads = int(os.environ.get("TFMFORGE_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=max(1, threads))
    except ImportError:
        pass


def _echo_config(cfg: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
    (out_dir / "resolved_config.json").write_text(json.dumps(echo, indent=1,
                                                             sort_keys=True))


def _check_model_kind(kind: str):
    if kind not in MODEL_KINDS:
        raise UsageError(f"unknown model kind {kind!r}; expected one of "
                         f"{{{', '.join(MODEL_KINDS)}}}")


def _build_from_cfg(cfg: dict, n: int):
    _check_model_kind(cfg["model"])
    return build_model(cfg["model"], RngStream(cfg["seed"], "init"), n=n,
                       unet_widths=tuple(cfg["widths"]),
                       vit_patch=cfg["vit.patch"], vit_dim=cfg["vit.dim"],
                       vit_layers=cfg["vit.layers"], vit_heads=cfg["vit.heads"],
                       hybrid_dim=cfg["hybrid.dim"],
                       hybrid_layers=cfg["hybrid.layers"],
                       dropout=cfg["dropout"],
                       dtype=np.dtype(cfg["dtype"]).type)


def _model_from_checkpoint(path):
    from .training import read_checkpoint
    header, _ = read_checkpoint(path)
    mc = header["config"]
    model = build_model(header["model_kind"], RngStream(0, "init"), n=mc["n"],
                        unet_widths=tuple(mc["widths"]),
                        vit_patch=mc["vit.patch"], vit_dim=mc["vit.dim"],
                        vit_layers=mc["vit.layers"], vit_heads=mc["vit.heads"],
                        hybrid_dim=mc["hybrid.dim"],
                        hybrid_layers=mc["hybrid.layers"],
                        dropout=mc["dropout"], dtype=np.dtype(mc["dtype"]).type)
    load_checkpoint(path, model)
    return model


def _load_eval_split(cfg, split="test"):
    dataset = Dataset(cfg["dataset"])
    u, f, ct = dataset.load_split(split)
    ids = [e.id for e in dataset.manifest.split(split)]
    return dataset, u, f, ct, ids


def _write_reports(reports, out_dir: Path, stem: str):
    payload = [rep.to_dict() for rep in reports]
    (out_dir / f"{stem}.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    import csv as _csv
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        _csv.writer(fh).writerows(reports_to_csv_rows(reports))


# -- command implementations ---------------------------------------------


def _cmd_gen_data(cfg):
    out = Path(cfg["out"])
    if len(cfg["counts"]) != 3:
        raise UsageError("counts must be three comma-separated integers")
    substrate = ElasticSubstrate(cfg["e.pa"], cfg["nu"], cfg["pixel.size"], cfg["n"])
    generate_dataset(out, tuple(cfg["counts"]), substrate, seed=cfg["seed"],
                     noise_std_um=cfg["noise.std"])
    _echo_config(cfg, out)
    print(f"wrote dataset with {sum(cfg['counts'])} samples to {out}")


def _cmd_train(cfg):
    out = Path(cfg["out"])
    _check_model_kind(cfg["model"])
    dataset = Dataset(cfg["dataset"])
    dtype = np.dtype(cfg["dtype"]).type
    train_data = dataset.load_split("train", dtype)
    val_data = dataset.load_split("val", dtype)
    model = _build_from_cfg(cfg, dataset.manifest.n)
    tc = TrainConfig(lr0=cfg["lr"], gamma=cfg["gamma"],
                     decay_period=cfg["decay.period"], patience=cfg["patience"],
                     max_epochs=cfg["max.epochs"], batch_size=cfg["batch.size"],
                     seed=cfg["seed"])
    result = train(model, train_data, val_data, tc)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = {"n": dataset.manifest.n, "widths": list(cfg["widths"]),
                 "vit.patch": cfg["vit.patch"], "vit.dim": cfg["vit.dim"],
                 "vit.layers": cfg["vit.layers"], "vit.heads": cfg["vit.heads"],
                 "hybrid.dim": cfg["hybrid.dim"], "hybrid.layers": cfg["hybrid.layers"],
                 "dropout": cfg["dropout"], "dtype": cfg["dtype"]}
    save_checkpoint(out / "checkpoint.tfck", model, model_cfg,
                    history=result.history, epoch=result.best_epoch)
    write_history_csv(out / "history.csv", result.history)
    _echo_config(cfg, out)
    print(f"trained {model.kind_full} for {result.epochs_run} epochs, "
          f"best val loss {result.best_val_loss:.6g} at epoch {result.best_epoch}")


def _cmd_infer(cfg):
    out = Path(cfg["out"])
    model = _model_from_checkpoint(cfg["checkpoint"])
    dataset = Dataset(cfg["dataset"])
    entries = dataset.manifest.split("test")
    sid = cfg["sample.id"] or entries[0].id
    entry = next((e for e in dataset.manifest.samples if e.id == sid), None)
    if entry is None:
        raise UsageError(f"sample id {sid!r} not found in dataset")
    u = read_tensor(Path(cfg["dataset"]) / entry.u_path)
    u_tilde = normalize_fields(u, dataset.manifest, "u")
    if model.vocab is not None:
        pred = model.predict(u_tilde.astype(model.dtype), cell_type=[entry.cell_type])
    else:
        pred = model.predict(u_tilde.astype(model.dtype))
    f_pred = normalize_fields(pred.astype(np.float64), dataset.manifest, "f",
                              "to_physical")
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / f"{sid}_f_pred.tft", f_pred)
    _echo_config(cfg, out)
    print(f"wrote predicted traction for {sid} to {out}")


def _cmd_eval(cfg):
    out = Path(cfg["out"])
    model = _model_from_checkpoint(cfg["checkpoint"])
    _, u, f, ct, ids = _load_eval_split(cfg, cfg["split"])
    u = u.astype(model.dtype)
    report = evaluate_model(model, u, f, ct if model.vocab is not None else None, ids)
    out.mkdir(parents=True, exist_ok=True)
    _write_reports([report], out, "report")
    _echo_config(cfg, out)
    print(f"eval on {cfg['split']}: NRMSE {report.nrmse_mean:.4f} "
          f"+/- {report.nrmse_std:.4f}, Pearson {report.pearson_mean:.4f} "
          f"+/- {report.pearson_std:.4f}")


def _cmd_sweep(cfg, axis):
    out = Path(cfg["out"])
    model = _model_from_checkpoint(cfg["checkpoint"])
    dataset, u, f, ct, ids = _load_eval_split(cfg)
    u = u.astype(model.dtype)
    values = cfg["scales"] if axis == "scale" else cfg["noise.levels"]
    reports = run_sweep(model, u, f, axis, values,
                        cell_types=ct if model.vocab is not None else None,
                        sample_ids=ids,
                        manifest_variance=dataset.manifest.sigma_u2_mean,
                        seed=cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    _write_reports(reports, out, f"sweep_{axis}")
    _echo_config(cfg, out)
    for rep in reports:
        print(f"{axis}={rep.sweep_value:g}: NRMSE {rep.nrmse_mean:.4f}, "
              f"Pearson {rep.pearson_mean:.4f}")


def _cmd_plot(cfg):
    field = read_tensor(cfg["input"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    sidecar = render_field_image(field, out, threshold=cfg["threshold.pa"],
                                 stride=cfg["arrow.stride"])
    _echo_config(cfg, out.parent)
    print(f"rendered {sidecar['ppm']} ({sidecar['arrows_drawn']} arrows)")


def dispatch(cfg: dict) -> int:
    _limit_threads()
    command = cfg["command"]
    if command == "gen-data":
        _cmd_gen_data(cfg)
    elif command == "train":
        _cmd_train(cfg)
    elif command == "infer":
        _cmd_infer(cfg)
    elif command == "eval":
        _cmd_eval(cfg)
    elif command == "sweep-scale":
        _cmd_sweep(cfg, "scale")
    elif command == "sweep-noise":
        _cmd_sweep(cfg, "noise")
    elif command == "plot":
        _cmd_plot(cfg)
    else:
        raise UsageError(f"unknown command {command!r}")
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
        return dispatch(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
