"""Command-line entry points: train, eval, sweep, synth, inspect.

Every artifact is written atomically (temp file in the target directory,
then rename), so a crash never leaves a half-written file.  Exit codes: 0
success, 1 I/O trouble (missing or unreadable inputs), 2 validation trouble
(bad configs, shape mismatches, empty grids).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import fields

import numpy as np

from .data import (
    ContainerFormatError,
    Standardizer,
    apply_standardizer,
    fit_standardizer,
    load_container,
    save_container,
    split_trials,
    synthesize,
)
from .model import ConfigError, DbNetConfig, DualBranchModel, validate_hyperparams
from .training import TrainConfig, evaluate, kappa, train, write_history_csv

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2

_MODEL_FIELDS = {f.name for f in fields(DbNetConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_json(path, payload) -> None:
    _atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _atomic_file_from(writer, path) -> None:
    """Run `writer(tmp_path)` then rename the result into place."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _default_seed(args_seed):
    if args_seed is not None:
        return args_seed
    env = os.environ.get("DBNET_SEED")
    return int(env) if env else None


def _load_config_file(path):
    if path is None:
        return {}, {}
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    model_part = {k: v for k, v in raw.items() if k in _MODEL_FIELDS}
    train_part = {k: v for k, v in raw.items() if k in _TRAIN_FIELDS}
    unknown = set(raw) - _MODEL_FIELDS - _TRAIN_FIELDS
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return model_part, train_part


def _build_configs(args, data):
    """Merge data-derived extents, config file, and flag overrides."""
    model_part, train_part = _load_config_file(getattr(args, "config", None))
    for name, value in (("n_channels", data.n_channels), ("n_samples", data.n_samples),
                        ("n_classes", data.n_classes)):
        if name in model_part and model_part[name] != value:
            raise ConfigError(
                f"config says {name}={model_part[name]} but the data has {value}")
        model_part[name] = value
    model_cfg = DbNetConfig.from_dict(model_part)
    overrides = {
        "learning_rate": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "max_epochs": getattr(args, "epochs", None),
        "early_stop_patience": getattr(args, "patience", None),
        "rounds": getattr(args, "rounds", None),
        "seed": _default_seed(getattr(args, "seed", None)),
    }
    train_part.update({k: v for k, v in overrides.items() if v is not None})
    # a shortened run keeps the default patience usable unless one was set
    if "early_stop_patience" not in train_part and "max_epochs" in train_part:
        train_part["early_stop_patience"] = min(
            TrainConfig.early_stop_patience, train_part["max_epochs"])
    train_cfg = TrainConfig(**train_part)
    return model_cfg, train_cfg


def _manifest(model_cfg, train_cfg, fingerprints, outputs, round_seeds, wall_clock):
    stable = {
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "inputs": fingerprints,
        "round_seeds": round_seeds,
    }
    manifest_hash = hashlib.sha256(
        json.dumps(stable, sort_keys=True).encode("utf-8")).hexdigest()
    return {**stable,
            "outputs": outputs,
            "wall_clock_seconds": round(wall_clock, 3),
            "manifest_hash": "sha256:" + manifest_hash}


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    data = load_container(args.data)
    eval_data = load_container(args.eval_data)
    model_cfg, train_cfg = _build_configs(args, data)
    validate_hyperparams(model_cfg)
    if eval_data.n_channels != data.n_channels or eval_data.n_samples != data.n_samples:
        raise ConfigError(
            f"evaluation data shape ({eval_data.n_channels}, {eval_data.n_samples}) does not "
            f"match training data ({data.n_channels}, {data.n_samples})")
    os.makedirs(args.out, exist_ok=True)
    std = fit_standardizer(data)
    train_std = apply_standardizer(std, data)
    eval_std = apply_standardizer(std, eval_data)
    model = DualBranchModel(model_cfg, seed=train_cfg.seed)
    started = time.time()
    result = train(model, train_std, eval_std, train_cfg)
    wall = time.time() - started
    paths = {name: os.path.join(args.out, fname) for name, fname in
             (("weights", "weights.dbnw"), ("history", "history.csv"),
              ("report", "report.json"), ("manifest", "manifest.json"),
              ("standardizer", "standardizer.json"))}
    _atomic_file_from(model.save, paths["weights"])
    _atomic_json(paths["standardizer"],
                 {"mu": std.mu.tolist(), "sigma": std.sigma.tolist()})
    _atomic_file_from(lambda p: write_history_csv(result.history, p), paths["history"])
    report = {
        **result.report.to_dict(),
        "best_round": result.best_round,
        "rounds": [vars(r) for r in result.rounds],
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
    }
    _atomic_json(paths["report"], report)
    fingerprints = {"data": _fingerprint(args.data), "eval_data": _fingerprint(args.eval_data)}
    manifest = _manifest(model_cfg, train_cfg, fingerprints, paths,
                         [r.init_seed for r in result.rounds], wall)
    _atomic_json(paths["manifest"], manifest)
    print(f"best round {result.best_round}: P_a={result.report.p_a:.4f} "
          f"K={result.report.kappa:.4f} ({wall:.1f}s)")
    return EXIT_OK


def _load_standardizer(args):
    """Explicit --standardizer wins; otherwise use the one saved beside the
    weights, if any (evaluation must reuse training statistics)."""
    path = getattr(args, "standardizer", None)
    if path is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(args.weights)),
                               "standardizer.json")
        if not os.path.exists(sibling):
            return None
        path = sibling
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    return Standardizer(mu=np.asarray(raw["mu"], dtype=np.float64),
                        sigma=np.asarray(raw["sigma"], dtype=np.float64))


def cmd_eval(args) -> int:
    data = load_container(args.data)
    model = DualBranchModel.load(args.weights)
    if (model.cfg.n_channels, model.cfg.n_samples, model.cfg.n_classes) != \
            (data.n_channels, data.n_samples, data.n_classes):
        raise ConfigError(
            f"weights expect (C={model.cfg.n_channels}, T={model.cfg.n_samples}, "
            f"classes={model.cfg.n_classes}) but the data is (C={data.n_channels}, "
            f"T={data.n_samples}, classes={data.n_classes})")
    std = _load_standardizer(args)
    if std is not None:
        data = apply_standardizer(std, data)
    os.makedirs(args.out, exist_ok=True)
    report = evaluate(model, data)
    _atomic_json(os.path.join(args.out, "report.json"),
                 {**report.to_dict(), "model_config": model.cfg.to_dict(),
                  "standardized": std is not None})
    lines = ["true\\pred," + ",".join(data.class_names)]
    for i, row in enumerate(np.asarray(report.confusion)):
        lines.append(data.class_names[i] + "," + ",".join(str(v) for v in row))
    _atomic_write(os.path.join(args.out, "confusion.csv"),
                  ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"P_a={report.p_a:.4f} K={report.kappa:.4f}")
    return EXIT_OK


def _parse_grid(text):
    """Either one point "s,n,d,k" or per-axis lists "s=1,2;n=4,6;d=4;k=4"."""
    text = text.strip()
    if not text:
        raise ConfigError("empty grid")
    if "=" not in text:
        parts = text.split(",")
        if len(parts) != 4:
            raise ConfigError(f"a grid point needs four values s,n,d,k, got {text!r}")
        vals = [int(p) for p in parts]
        return [tuple(vals)]
    axes = {}
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        key, _, values = chunk.partition("=")
        key = key.strip()
        if key not in ("s", "n", "d", "k"):
            raise ConfigError(f"unknown grid axis {key!r}")
        axes[key] = [int(v) for v in values.split(",") if v.strip()]
    missing = {"s", "n", "d", "k"} - set(axes)
    if missing:
        raise ConfigError(f"grid is missing axes: {sorted(missing)}")
    if any(not v for v in axes.values()):
        raise ConfigError("empty grid")
    return [(s, n, d, k) for s in axes["s"] for n in axes["n"]
            for d in axes["d"] for k in axes["k"]]


def _sweep_point(model_dict, train_dict, data_path, eval_path, point):
    s, n, d, k = point
    cfg = DbNetConfig.from_dict({**model_dict, "window_stride": s, "window_count": n,
                                 "dcc_layers": d, "dcc_kernel": k})
    try:
        validate_hyperparams(cfg)
    except ConfigError as e:
        return {"s": s, "n": n, "d": d, "k": k, "status": "skipped",
                "p_a": "", "kappa": "", "reason": str(e)}
    data = load_container(data_path)
    eval_data = load_container(eval_path)
    std = fit_standardizer(data)
    model = DualBranchModel(cfg, seed=train_dict["seed"])
    result = train(model, apply_standardizer(std, data), apply_standardizer(std, eval_data),
                   TrainConfig(**train_dict))
    return {"s": s, "n": n, "d": d, "k": k, "status": "ok",
            "p_a": f"{result.report.p_a:.6f}", "kappa": f"{result.report.kappa:.6f}",
            "reason": ""}


def cmd_sweep(args) -> int:
    data = load_container(args.data)
    load_container(args.eval_data)
    model_cfg, train_cfg = _build_configs(args, data)
    points = _parse_grid(args.grid)
    os.makedirs(args.out, exist_ok=True)
    worker_args = [(model_cfg.to_dict(), train_cfg.to_dict(), args.data, args.eval_data, p)
                   for p in points]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_point_star, worker_args))
    else:
        rows = [_sweep_point(*w) for w in worker_args]
    lines = ["s,n,d,k,status,p_a,kappa,reason"]
    for row in rows:
        reason = row["reason"].replace(",", ";")
        lines.append(f"{row['s']},{row['n']},{row['d']},{row['k']},{row['status']},"
                     f"{row['p_a']},{row['kappa']},{reason}")
    _atomic_write(os.path.join(args.out, "sweep.csv"),
                  ("\n".join(lines) + "\n").encode("utf-8"))
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"swept {len(rows)} points ({ok} valid, {len(rows) - ok} skipped)")
    return EXIT_OK


def _sweep_point_star(packed):
    return _sweep_point(*packed)


def cmd_synth(args) -> int:
    ts = synthesize(args.classes, args.per_class, args.channels, args.samples,
                    seed=args.seed if args.seed is not None else 0, noise=args.noise)
    if args.eval_fraction is not None:
        tr, ev = split_trials(ts, args.eval_fraction, seed=ts.m)
        base, ext = os.path.splitext(args.out)
        for suffix, part in (("_train", tr), ("_eval", ev)):
            path = f"{base}{suffix}{ext or '.eegb'}"
            _atomic_file_from(lambda p, part=part: save_container(part, p), path)
            print(f"wrote {path} ({part.m} trials)")
    else:
        _atomic_file_from(lambda p: save_container(ts, p), args.out)
        print(f"wrote {args.out} ({ts.m} trials)")
    return EXIT_OK


def cmd_inspect(args) -> int:
    ts = load_container(args.data)
    print(f"subject {ts.subject}: {ts.m} trials, {ts.n_channels} electrodes, "
          f"{ts.n_samples} samples at {ts.fs:g} Hz")
    print(f"classes: {', '.join(ts.class_names)}")
    counts = np.bincount(ts.labels, minlength=ts.n_classes)
    print("trials per class: " + ", ".join(str(c) for c in counts))
    print(f"electrodes: {', '.join(ts.electrode_names)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file with model/training fields")
    p.add_argument("--seed", type=int, help="base seed (default: $DBNET_SEED or 0)")
    p.add_argument("--rounds", type=int, help="independent training rounds")
    p.add_argument("--epochs", type=int, help="max epochs per round")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--patience", type=int, help="early-stopping patience")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dbnet",
        description="Train and evaluate the dual-branch EEG decoder.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the multi-round training protocol")
    p.add_argument("--data", required=True, help="training container (.eegb)")
    p.add_argument("--eval-data", required=True, dest="eval_data")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a weights file on a container")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--standardizer",
                   help="statistics JSON (default: standardizer.json beside the weights)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over global-block hyperparameters")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True, dest="eval_data")
    p.add_argument("--grid", required=True,
                   help='one point "s,n,d,k" or lists "s=1;n=2,4,6,8;d=4;k=4"')
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate a synthetic container")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=50, dest="per_class")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--eval-fraction", type=float, dest="eval_fraction",
                   help="also split into _train/_eval files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="describe a container")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: no such file: {e.filename or e}", file=sys.stderr)
        return EXIT_IO
    except (OSError, ContainerFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
