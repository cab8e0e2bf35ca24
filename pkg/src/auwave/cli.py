"""``auwave`` command line: synth | prep | train | tune | eval | ablate.

Each command resolves its settings as built-in defaults, then the matching
section of an optional INI file (``--config``), then explicit flags. The
resolved settings are written to ``manifest.json`` in the output directory.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

from . import __version__
from .errors import AUWaveError, ConfigError, ShapeError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Invalid flags, config file contents or value ranges."""


# ---------------------------------------------------------------- options
def _bounded(kind: Callable, lo=None, hi=None, label: str = "") -> Callable[[str], object]:
    def parse(text):
        try:
            v = kind(text)
        except (TypeError, ValueError):
            raise UsageError(f"{label}: {text!r} is not a valid {kind.__name__}") from None
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise UsageError(f"{label}={text} outside the allowed range [{lo:g}, {hi:g}]"
                             if lo is not None and hi is not None else
                             f"{label}={text} must be >= {lo:g}")
        return v
    return parse


def _int_list(label: str) -> Callable[[str], tuple]:
    def parse(text):
        try:
            return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)
        except ValueError:
            raise UsageError(f"{label}: expected a comma separated list of integers") from None
    return parse


def _choice(label: str, *choices: str) -> Callable[[str], str]:
    def parse(text):
        if text not in choices:
            raise UsageError(f"{label}: {text!r} is not one of {', '.join(choices)}")
        return text
    return parse


def _bool(label: str) -> Callable[[str], bool]:
    def parse(text):
        t = str(text).strip().lower()
        if t in ("1", "true", "yes", "on"):
            return True
        if t in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{label}: {text!r} is not a boolean")
    return parse


def _stations(text) -> tuple:
    ids = tuple(s.strip() for s in str(text).split(",") if s.strip())
    if not ids:
        raise UsageError("stations: empty list")
    return ids


@dataclass(frozen=True)
class Opt:
    key: str
    parse: Callable[[str], object]
    default: object = None
    flag: Optional[str] = None
    help: str = ""


_LR = Opt("lr", _bounded(float, 1e-5, 1e-3, "lr"), 1e-3, "--lr", "learning rate, [1e-5, 1e-3]")
_GAMMA = Opt("gamma", _bounded(float, 0.9, 0.99, "gamma"), 0.95, "--gamma", "per-epoch decay, [0.9, 0.99]")
_SEED = Opt("seed", _bounded(int, 0, 2 ** 32 - 1, "seed"), 0, "--seed")
_EPOCHS = Opt("max_epochs", _bounded(int, 1, None, "max-epochs"), 500, "--max-epochs")
_PATIENCE = Opt("patience", _bounded(int, 1, None, "patience"), 100, "--patience")
_BATCH = Opt("batch_size", _bounded(int, 2, None, "batch-size"), 32, "--batch-size")
_MAX_STEPS = Opt("max_steps", _bounded(int, 1, None, "max-steps"), None, "--max-steps")
_PRESET = Opt("preset", _choice("preset", "desk", "full"), "desk", "--preset",
              "model size: desk (minutes on a CPU) or full (full-size widths)")
_TRAIN_OPTS = [_LR, _GAMMA, _SEED, _EPOCHS, _PATIENCE, _BATCH, _MAX_STEPS]

COMMANDS = {
    "synth": [
        _SEED,
        Opt("T", _bounded(int, 1, 65535, "T"), 2000, "--hours", "number of hourly steps"),
        Opt("noise_sigma", _bounded(float, 0.0, None, "noise_sigma"), 0.05, "--noise"),
    ],
    "prep": [],
    "train": [Opt("model", _choice("model", "auwave", "rwr"), "auwave", "--model"), _PRESET,
              Opt("mlp_hidden", _int_list("mlp_hidden"), None, "--mlp-hidden"),
              Opt("latent_dim", _bounded(int, 1, None, "latent_dim"), None, "--latent-dim"),
              Opt("unet_blocks", _bounded(int, 3, 5, "unet_blocks"), None, "--unet-blocks"),
              Opt("layers_per_block", _bounded(int, 1, 3, "layers_per_block"), None, "--layers-per-block"),
              Opt("encoder_channels", _int_list("encoder_channels"), None, "--encoder-channels"),
              Opt("use_attention", _bool("use_attention"), None, "--use-attention")] + _TRAIN_OPTS,
    "tune": [Opt("trials", _bounded(int, 1, None, "trials"), 20, "--trials"),
             Opt("space", _choice("space", "desk", "full"), "desk", "--space"),
             _SEED, Opt("max_epochs", _bounded(int, 1, None, "max-epochs"), 5, "--max-epochs"),
             Opt("patience", _bounded(int, 1, None, "patience"), 100, "--patience"), _BATCH],
    "eval": [Opt("split", _choice("split", "val", "test", "train"), "val", "--split")],
    "ablate": [Opt("model", _choice("model", "auwave", "rwr", "both"), "both", "--model"),
               Opt("stations", _stations, None, "--stations", "comma separated station ids")]
              + _TRAIN_OPTS,
}
PATH_FLAGS = {
    "synth": ["out"],
    "prep": ["dataset", "out"],
    "train": ["dataset", "out"],
    "tune": ["dataset", "out"],
    "eval": ["dataset", "checkpoint", "out", "stations"],
    "ablate": ["dataset", "out"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="auwave", description="Sparse-buoy wave field reconstruction")
    parser.add_argument("--version", action="version", version=f"auwave {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file; the [%s] section is read" % name)
        for flag in PATH_FLAGS[name]:
            p.add_argument(f"--{flag}", required=flag != "stations")
        for o in opts:
            if o.flag:
                p.add_argument(o.flag, dest=o.key, default=None, help=o.help)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """defaults < config file section < flags, every value validated."""
    opts = {o.key: o for o in COMMANDS[command]}
    resolved = {k: o.default for k, o in opts.items()}
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(args.config, encoding="utf-8") as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if cp.has_section(command):
            for key, text in cp.items(command):
                if key not in opts:
                    raise UsageError(f"[{command}] {key}: unknown setting")
                resolved[key] = opts[key].parse(text)
    for key, o in opts.items():
        raw = getattr(args, key, None)
        if o.flag and raw is not None:
            resolved[key] = o.parse(raw)
    return resolved


# ---------------------------------------------------------------- manifest
def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: dict,
                   started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "argv": _replay_argv(command, config, inputs),
        "tool_version": __version__,
        "wall_time_s": round(time.time() - started, 3),
    }
    path = out_dir / "manifest.json"
    tmp = out_dir / ".manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _replay_argv(command: str, config: dict, inputs: dict) -> list:
    """Flags that reproduce the run without the original config file."""
    argv = [command]
    flags = {o.key: o.flag for o in COMMANDS[command] if o.flag}
    for k, v in inputs.items():
        argv += [f"--{k}", str(v)]
    for k, v in config.items():
        if v is None or k not in flags:
            continue
        if isinstance(v, tuple):
            text = ",".join(str(x) for x in v)
        else:
            text = repr(v) if isinstance(v, float) else str(v)
        argv += [flags[k], text]
    return argv


# ---------------------------------------------------------------- commands
def _model_config(cfg: dict, n_stations: int):
    from .models import AUWaveConfig, RWRConfig, desk_auwave_config, desk_rwr_config
    if cfg["model"] == "rwr":
        return desk_rwr_config(n_stations) if cfg["preset"] == "desk" else RWRConfig(n_stations=n_stations)
    base = desk_auwave_config(n_stations) if cfg["preset"] == "desk" else AUWaveConfig(n_stations=n_stations)
    over = {k: cfg[k] for k in ("mlp_hidden", "latent_dim", "unet_blocks", "layers_per_block",
                                "encoder_channels", "use_attention") if cfg.get(k) is not None}
    model_cfg = replace(base, **over)
    model_cfg.validate()
    return model_cfg


def _train_config(cfg: dict):
    from .train import TrainConfig
    return TrainConfig(lr=cfg["lr"], gamma=cfg["gamma"], max_epochs=cfg["max_epochs"],
                       max_steps=cfg["max_steps"], patience=cfg["patience"],
                       batch_size=cfg["batch_size"], seed=cfg["seed"])


def _load(path):
    from .data import load_dataset, to_log_space
    return to_log_space(load_dataset(path))


def cmd_synth(cfg, args, out: Path):
    from .synthetic import default_config, generate, write_dataset
    series = generate(default_config(cfg["seed"], T=cfg["T"], noise_sigma=cfg["noise_sigma"]))
    return {}, write_dataset(series, out)


def cmd_prep(cfg, args, out: Path):
    from .data import load_raw_directory, save_dataset
    ds = load_raw_directory(args.dataset)
    return {"dataset": args.dataset}, {"dataset": save_dataset(ds, out / "dataset.npz")}


def cmd_train(cfg, args, out: Path):
    from .data import chronological_split
    from .models import build_model
    from .train import save_checkpoint, train
    ds = _load(args.dataset)
    model_cfg = _model_config(cfg, len(ds.stations))
    tcfg = _train_config(cfg)
    model = build_model(cfg["model"], model_cfg.to_dict(), seed=cfg["seed"])
    result = train(model, ds, chronological_split(ds.n_times), tcfg)
    ckpt = save_checkpoint(model, out / "model.auwc", result.optimizer, result.best_epoch,
                           result.best_val_loss)
    hist = out / "history.csv"
    hist.write_text(result.history_csv(), encoding="utf-8")
    cfg["resolved_model"] = model_cfg.to_dict()
    return {"dataset": args.dataset}, {"checkpoint": ckpt, "history": hist}


def cmd_tune(cfg, args, out: Path):
    from .data import chronological_split
    from .errors import InsufficientDataError
    from .hyperopt import (SearchSpace, Study, history_csv, importance, importance_csv,
                           load_journal, run_study, training_objective)
    ds = _load(args.dataset)
    space = SearchSpace.desk() if cfg["space"] == "desk" else SearchSpace.full()
    journal = out / "study.journal"
    study = load_journal(journal, space) if journal.exists() else Study(space, seed=cfg["seed"])
    objective = training_objective(ds, chronological_split(ds.n_times), space, cfg["max_epochs"],
                                   cfg["patience"], cfg["batch_size"], cfg["seed"])
    run_study(study, objective, cfg["trials"], journal)
    outputs = {"journal": journal, "history": out / "history.csv"}
    outputs["history"].write_text(history_csv(study), encoding="utf-8")
    try:
        scores = importance(study)
    except InsufficientDataError as exc:
        print(f"importance skipped: {exc}", file=sys.stderr)
    else:
        outputs["importance"] = out / "importance.csv"
        outputs["importance"].write_text(importance_csv(scores), encoding="utf-8")
    return {"dataset": args.dataset}, outputs


def cmd_eval(cfg, args, out: Path):
    from .data import chronological_split
    from .report import evaluate, export_artifacts
    from .train import load_checkpoint
    ds = _load(args.dataset)
    if args.stations:
        ds = ds.select_stations(_stations(args.stations))
    model, _ = load_checkpoint(args.checkpoint)
    splits = chronological_split(ds.n_times)
    rep = evaluate(model, ds, getattr(splits, cfg["split"]))
    paths = export_artifacts(rep, out, ds.land_mask)
    inputs = {"dataset": args.dataset, "checkpoint": args.checkpoint}
    if args.stations:
        inputs["stations"] = args.stations
    return inputs, paths


def cmd_ablate(cfg, args, out: Path):
    from .report import ablation_csv, run_ablation, standard_subsets
    ds = _load(args.dataset)
    stations = cfg["stations"] or ds.stations
    unknown = [s for s in stations if s not in ds.stations]
    if unknown:
        raise UsageError(f"stations: unknown ids {', '.join(unknown)}")
    kinds = ("auwave", "rwr") if cfg["model"] == "both" else (cfg["model"],)
    results = run_ablation(ds, standard_subsets(stations), _train_config(cfg), kinds=kinds)
    path = out / "ablation.csv"
    path.write_text(ablation_csv(results), encoding="utf-8")
    return {"dataset": args.dataset}, {"ablation": path}


HANDLERS = {"synth": cmd_synth, "prep": cmd_prep, "train": cmd_train, "tune": cmd_tune,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args.command, args)
        for key in ("dataset", "checkpoint"):
            p = getattr(args, key, None)
            if p is not None and not Path(p).exists():
                raise UsageError(f"--{key} {p}: no such file or directory")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = HANDLERS[args.command](cfg, args, out)
        write_manifest(out, args.command, cfg, inputs, outputs, started)
    except UsageError as exc:
        print(f"auwave: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ShapeError) as exc:
        print(f"auwave: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AUWaveError, OSError, ValueError) as exc:
        print(f"auwave: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
