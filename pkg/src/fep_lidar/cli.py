"""Command-line front end: data collection, training, evaluation, runs.

Every option resolves through the same precedence chain:

    command-line flag  >  config file (`--config`)  >  environment  >  default

The config file is flat UTF-8 text, one `key = value` per line with dotted
key names (`fep.alpha = 0.005`); `#` starts a comment. Only the global seed
has an environment source (`FEP_LIDAR_SEED`). Each run writes its fully
resolved configuration next to its outputs, in the same `key = value` format,
so a snapshot can be replayed verbatim via `--config`.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fep_lidar.bench import (
    ExperimentConfig,
    emit_plot,
    mean_iterations_to_success,
    run_navigation,
    run_static_localization,
    run_traversal,
    sample_start_goal_pair,
    success_rate,
    write_csv,
    write_trace_csv,
)
from fep_lidar.fep import Belief, FepParams, localize, navigate
from fep_lidar.genmodel import (
    StorageError,
    TrainConfig,
    TrainingDivergedError,
    collect_dataset,
    default_architecture,
    heldout_error,
    init_model,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    train,
)
from fep_lidar.pf import PfConfig
from fep_lidar.world import (
    MapFormatError,
    Pose2,
    SamplingExhaustedError,
    SensorConfig,
    default_map,
    load_map,
    sample_free_pose,
)

ENV_SEED = "FEP_LIDAR_SEED"


class CliError(Exception):
    """Fatal command-line problem; message becomes the one-line diagnostic."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# dotted key -> (type, built-in default)
_KEYS: dict[str, tuple] = {
    "map": (str, ""),  # empty string selects the packaged corridor map
    "model": (str, ""),
    "dataset": (str, ""),
    "out": (str, ""),  # per-command default filled in at resolve time
    "seed": (int, 0),
    "jobs": (int, 1),
    "n": (int, 13000),
    "sensor.beam_count": (int, 622),
    "sensor.aperture": (float, 1.5 * math.pi),
    "sensor.max_range": (float, 25.0),
    "sensor.noise_sigma": (float, 0.02),
    "train.batch_size": (int, 500),
    "train.epochs": (int, 42),
    "train.lr": (float, 1e-3),
    "train.lr_hold": (int, 18),
    "train.lr_decay": (float, 0.82),
    "train.val_fraction": (float, 3.0 / 13.0),
    "fep.alpha": (float, 1e-2),
    "fep.beta": (float, 1.0),
    "fep.sigma_o": (float, 1.0),
    "fep.sigma_x": (float, 1.0),
    "fep.gamma": (float, 1.0),
    "fep.dt": (float, 0.5),
    "fep.a_max": (float, 1.0),
    "fep.max_iterations": (int, 500),
    "fep.success_radius": (float, 0.8),
    "fep.reset_action": (_parse_bool, True),
    "pf.n_particles": (int, 500),
    "pf.diffusion_sigma": (float, 0.3),
    "pf.likelihood_sigma": (float, 0.5),
    "pf.beam_stride": (int, 8),
    "pf.ess_threshold": (float, 0.5),
    "bench.experiment": (str, "static"),
    "bench.trials": (int, 100),
    "bench.iterations": (int, 50),
    "bench.method": (str, "both"),
    "bench.teleport_step": (float, 0.4),
    "bench.min_start_goal_distance": (float, 12.0),
    "localize.iterations": (int, 50),
    "localize.pose": (str, ""),  # "x,y"; empty samples a random free pose
    "navigate.start": (str, ""),
    "navigate.goal": (str, ""),
    "eval.n": (int, 1000),
}

_OUT_DEFAULTS = {"collect": "dataset.ds", "train": "model.fep"}

# commands whose --out is a single file; the rest treat it as a directory
_FILE_OUT = frozenset(["collect", "train"])


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of printing usage + exiting."""

    def error(self, message):
        raise CliError(f"argument error: {message}")


def _dest(key: str) -> str:
    return key.replace(".", "__")


def _add_key_flag(parser, flag: str, key: str, **kw):
    typ = _KEYS[key][0]
    parser.add_argument(flag, dest=_dest(key), type=typ, default=None, **kw)


def _build_parser() -> _Parser:
    top = _Parser(prog="fep-lidar", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def new(name, help_text):
        # add_parser instantiates the parent's class, so subcommand parsers
        # share the raise-instead-of-exit error behavior
        p = sub.add_parser(name, help=help_text, add_help=True)
        p.add_argument("--config", default=None, help="flat key = value file")
        _add_key_flag(p, "--out", "out", help="output file or directory")
        _add_key_flag(p, "--seed", "seed", help="global random seed")
        return p

    p = new("collect", "sample poses and scans into a dataset file")
    _add_key_flag(p, "--map", "map")
    _add_key_flag(p, "--n", "n", help="number of records")
    _add_key_flag(p, "--beam-count", "sensor.beam_count")
    _add_key_flag(p, "--max-range", "sensor.max_range")
    _add_key_flag(p, "--noise-sigma", "sensor.noise_sigma")

    p = new("train", "fit the scan model to a dataset")
    _add_key_flag(p, "--dataset", "dataset")
    _add_key_flag(p, "--lr", "train.lr")
    _add_key_flag(p, "--lr-hold", "train.lr_hold")
    _add_key_flag(p, "--lr-decay", "train.lr_decay")
    _add_key_flag(p, "--epochs", "train.epochs")
    _add_key_flag(p, "--batch-size", "train.batch_size")
    _add_key_flag(p, "--val-fraction", "train.val_fraction")

    p = new("eval-model", "score a trained model on fresh poses")
    _add_key_flag(p, "--map", "map")
    _add_key_flag(p, "--model", "model")
    _add_key_flag(p, "--n", "eval.n", help="number of probe poses")

    p = new("localize", "refine a stationary position belief from scans")
    _add_key_flag(p, "--map", "map")
    _add_key_flag(p, "--model", "model")
    _add_key_flag(p, "--iterations", "localize.iterations")
    _add_key_flag(p, "--pose", "localize.pose", help="true pose 'x,y' (random if omitted)")
    _add_key_flag(p, "--alpha", "fep.alpha")
    _add_key_flag(p, "--sigma-o", "fep.sigma_o")

    p = new("navigate", "drive from a start pose to a goal pose")
    _add_key_flag(p, "--map", "map")
    _add_key_flag(p, "--model", "model")
    _add_key_flag(p, "--start", "navigate.start", help="start pose 'x,y'")
    _add_key_flag(p, "--goal", "navigate.goal", help="goal pose 'x,y'")
    _add_key_flag(p, "--alpha", "fep.alpha")
    _add_key_flag(p, "--beta", "fep.beta")
    _add_key_flag(p, "--gamma", "fep.gamma")
    _add_key_flag(p, "--max-iterations", "fep.max_iterations")
    _add_key_flag(p, "--success-radius", "fep.success_radius")

    p = new("bench", "run seeded multi-trial experiments with CSV + plot output")
    _add_key_flag(p, "--map", "map")
    _add_key_flag(p, "--model", "model")
    _add_key_flag(p, "--experiment", "bench.experiment")
    _add_key_flag(p, "--trials", "bench.trials")
    _add_key_flag(p, "--iterations", "bench.iterations")
    _add_key_flag(p, "--method", "bench.method")
    _add_key_flag(p, "--teleport-step", "bench.teleport_step")
    _add_key_flag(p, "--min-distance", "bench.min_start_goal_distance")
    _add_key_flag(p, "--jobs", "jobs", help="concurrent trials")
    _add_key_flag(p, "--alpha", "fep.alpha")

    p = new("show-map", "print a map summary")
    _add_key_flag(p, "--map", "map")

    return top


# ---------------------------------------------------------------------------
# config resolution


def _read_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"missing file: {path}")
    raw: dict[str, str] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise CliError(f"invalid config value: {path}:{lineno}: expected 'key = value'")
        key, _, value = text.partition("=")
        raw[key.strip()] = value.strip()
    return raw


@dataclass
class RunConfig:
    """Fully resolved settings for one command invocation."""

    command: str
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def out_path(self) -> Path:
        return Path(self.values["out"])

    def sensor(self) -> SensorConfig:
        return SensorConfig(
            beam_count=self["sensor.beam_count"],
            aperture=self["sensor.aperture"],
            max_range=self["sensor.max_range"],
            noise_sigma=self["sensor.noise_sigma"],
        )

    def fep_params(self) -> FepParams:
        return FepParams(
            alpha=self["fep.alpha"],
            beta=self["fep.beta"],
            sigma_o=self["fep.sigma_o"],
            sigma_x=self["fep.sigma_x"],
            gamma=self["fep.gamma"],
            dt=self["fep.dt"],
            a_max=self["fep.a_max"],
            max_iterations=self["fep.max_iterations"],
            success_radius=self["fep.success_radius"],
            reset_action=self["fep.reset_action"],
        )

    def pf_config(self) -> PfConfig:
        return PfConfig(
            n_particles=self["pf.n_particles"],
            diffusion_sigma=self["pf.diffusion_sigma"],
            likelihood_sigma=self["pf.likelihood_sigma"],
            beam_stride=self["pf.beam_stride"],
            ess_threshold=self["pf.ess_threshold"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self["train.batch_size"],
            epochs=self["train.epochs"],
            learning_rate=self["train.lr"],
            lr_hold=self["train.lr_hold"],
            lr_decay=self["train.lr_decay"],
            validation_fraction=self["train.val_fraction"],
            seed=self["seed"],
        )

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            kind=self["bench.experiment"],
            trials=self["bench.trials"],
            iterations=self["bench.iterations"],
            seed=self["seed"],
            min_start_goal_distance=self["bench.min_start_goal_distance"],
            success_radius=self["fep.success_radius"],
            method=self["bench.method"],
            teleport_step=self["bench.teleport_step"],
            jobs=self["jobs"],
        )


def _resolve(args) -> RunConfig:
    file_values = _read_config_file(args.config) if args.config else {}
    unknown = set(file_values) - set(_KEYS)
    if unknown:
        raise CliError(f"invalid config value: unknown key {sorted(unknown)[0]!r}")
    values = {}
    for key, (typ, default) in _KEYS.items():
        flag_val = getattr(args, _dest(key), None)
        if flag_val is not None:
            values[key] = flag_val
        elif key in file_values:
            try:
                values[key] = typ(file_values[key])
            except ValueError as e:
                raise CliError(
                    f"invalid config value: {key} = {file_values[key]!r} ({e})"
                ) from None
        elif key == "seed" and os.environ.get(ENV_SEED):
            text = os.environ[ENV_SEED]
            try:
                values[key] = int(text)
            except ValueError:
                raise CliError(
                    f"invalid config value: {ENV_SEED} = {text!r} (not an integer)"
                ) from None
        else:
            values[key] = default
    if not values["out"]:
        values["out"] = _OUT_DEFAULTS.get(args.command, ".")
    return RunConfig(args.command, values)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _snapshot_path(cfg: RunConfig) -> Path:
    out = cfg.out_path()
    if cfg.command in _FILE_OUT:
        return out.with_name(out.name + ".config")
    return out / f"{cfg.command}-config.txt"


def _write_snapshot(cfg: RunConfig) -> None:
    lines = [f"{k} = {_format_value(cfg.values[k])}" for k in sorted(cfg.values)]
    path = _snapshot_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# shared loading helpers


def _require_file(path_text: str, what: str) -> Path:
    if not path_text:
        raise CliError(f"missing file: no {what} path given (use --{what})")
    p = Path(path_text)
    if not p.is_file():
        raise CliError(f"missing file: {p}")
    return p


def _load_map(cfg: RunConfig):
    text = cfg["map"]
    if not text:
        return default_map()
    return load_map(_require_file(text, "map"))


def _load_model_for(cfg: RunConfig, sensor: SensorConfig):
    model = load_model(_require_file(cfg["model"], "model"))
    if model.arch.output_dim != sensor.beam_count:
        raise CliError(
            f"invalid config value: model predicts {model.arch.output_dim} beams "
            f"but sensor.beam_count = {sensor.beam_count}"
        )
    return model


def _parse_pose(text: str, what: str) -> Pose2:
    try:
        x, y = (float(part) for part in text.split(","))
    except ValueError:
        raise CliError(
            f"invalid config value: {what} must be 'x,y', got {text!r}"
        ) from None
    return Pose2(x, y)


def _ensure_out_dir(cfg: RunConfig) -> Path:
    out = cfg.out_path()
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def _cmd_collect(cfg: RunConfig) -> int:
    wmap = _load_map(cfg)
    sensor = cfg.sensor()
    data = collect_dataset(wmap, sensor, cfg["n"], np.random.default_rng(cfg["seed"]))
    out = cfg.out_path()
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out)
    _write_snapshot(cfg)
    print(f"wrote {cfg['n']} records to {out}")
    return 0


def _cmd_train(cfg: RunConfig) -> int:
    data = load_dataset(_require_file(cfg["dataset"], "dataset"))
    arch = default_architecture(data.sensor.beam_count)
    model = init_model(arch, np.random.default_rng(cfg["seed"]))
    out = cfg.out_path()
    out.parent.mkdir(parents=True, exist_ok=True)
    init_path = out.with_name(out.name + ".init")
    save_model(model, init_path)
    trained, history = train(model, data, cfg.train_config())
    save_model(trained, out)
    _write_snapshot(cfg)
    best = min(h.val_l1 for h in history)
    print(
        f"trained {len(history)} epochs: val L1 {history[0].val_l1:.6g} -> best "
        f"{best:.6g}; wrote {out} (init snapshot {init_path})"
    )
    return 0


def _cmd_eval_model(cfg: RunConfig) -> int:
    wmap = _load_map(cfg)
    sensor = cfg.sensor()
    model = _load_model_for(cfg, sensor)
    err = heldout_error(model, wmap, sensor, cfg["eval.n"], np.random.default_rng(cfg["seed"]))
    out = _ensure_out_dir(cfg)
    (out / "eval-metrics.txt").write_text(f"heldout_mean_abs_error = {err:.10g}\n")
    _write_snapshot(cfg)
    print(f"heldout_mean_abs_error = {err:.10g} ({cfg['eval.n']} poses)")
    return 0


def _cmd_localize(cfg: RunConfig) -> int:
    wmap = _load_map(cfg)
    sensor = cfg.sensor()
    model = _load_model_for(cfg, sensor)
    rng = np.random.default_rng(cfg["seed"])
    if cfg["localize.pose"]:
        pose = _parse_pose(cfg["localize.pose"], "pose")
    else:
        pose = sample_free_pose(wmap, rng)
    params = cfg.fep_params()
    belief = Belief(np.zeros(2), params.alpha, params.sigma_o)
    rows = localize(
        wmap, model, sensor, [pose] * cfg["localize.iterations"], belief, rng
    )
    out = _ensure_out_dir(cfg)
    write_trace_csv([rows], out / "localize_trace.csv")
    _write_snapshot(cfg)
    print(
        f"localized near ({pose.x:.3g}, {pose.y:.3g}): error "
        f"{rows[0].err:.4g} m -> {rows[-1].err:.4g} m over {len(rows)} iterations"
    )
    return 0


def _cmd_navigate(cfg: RunConfig) -> int:
    wmap = _load_map(cfg)
    sensor = cfg.sensor()
    model = _load_model_for(cfg, sensor)
    rng = np.random.default_rng(cfg["seed"])
    if cfg["navigate.start"] and cfg["navigate.goal"]:
        start = _parse_pose(cfg["navigate.start"], "start")
        goal = _parse_pose(cfg["navigate.goal"], "goal")
    elif cfg["navigate.start"] or cfg["navigate.goal"]:
        raise CliError("invalid config value: give both --start and --goal or neither")
    else:
        start, goal = sample_start_goal_pair(
            wmap, cfg["bench.min_start_goal_distance"], rng
        )
    res = navigate(wmap, model, sensor, start, goal, cfg.fep_params(), rng)
    out = _ensure_out_dir(cfg)
    write_trace_csv([res.rows], out / "navigate_trace.csv")
    _write_snapshot(cfg)
    outcome = "reached goal" if res.success else "gave up"
    print(
        f"{outcome} after {res.iterations} steps; distance "
        f"{res.rows[0].dist_goal:.4g} m -> {res.rows[-1].dist_goal:.4g} m"
    )
    return 0


def _cmd_bench(cfg: RunConfig) -> int:
    wmap = _load_map(cfg)
    sensor = cfg.sensor()
    exp = cfg.experiment()
    needs_model = exp.kind == "navigation" or exp.wants("fep")
    model = _load_model_for(cfg, sensor) if needs_model else None
    runner = {
        "static": run_static_localization,
        "traversal": run_traversal,
        "navigation": run_navigation,
    }[exp.kind]
    res = runner(wmap, model, sensor, exp, cfg.fep_params(), cfg.pf_config())
    out = _ensure_out_dir(cfg)
    write_csv(res.series, out / f"{exp.kind}_summary.csv")
    for method, traces in res.traces.items():
        write_trace_csv(traces, out / f"{exp.kind}_trace_{method}.csv")
    emit_plot(res.series, out / f"{exp.kind}.svg", title=exp.kind)
    _write_snapshot(cfg)
    if exp.kind == "navigation":
        s = res.series["fep"]
        print(
            f"navigation: {exp.trials} trials, success rate {success_rate(s):.3g}, "
            f"mean iterations to success {mean_iterations_to_success(s):.4g}"
        )
    else:
        finals = ", ".join(
            f"{m} {res.series[m].mean_err[-1]:.4g} m" for m in sorted(res.series)
        )
        print(f"{exp.kind}: {exp.trials} trials, final mean error: {finals}")
    return 0


def _cmd_show_map(cfg: RunConfig) -> int:
    wmap = _load_map(cfg)
    _ensure_out_dir(cfg)
    _write_snapshot(cfg)
    xmin, ymin, xmax, ymax = wmap.bounds
    print(f"map: {cfg['map'] or '<packaged corridor>'}")
    print(f"bounds: [{xmin}, {xmax}] x [{ymin}, {ymax}] m")
    print(f"clearance: {wmap.clearance} m")
    print(f"interior segments: {len(wmap.explicit_segments)} (+4 boundary walls)")
    for seg in wmap.explicit_segments:
        print(f"  segment ({seg[0]}, {seg[1]}) -> ({seg[2]}, {seg[3]})")
    print(f"identity: {wmap.identity_hash()}")
    return 0


_COMMANDS = {
    "collect": _cmd_collect,
    "train": _cmd_train,
    "eval-model": _cmd_eval_model,
    "localize": _cmd_localize,
    "navigate": _cmd_navigate,
    "bench": _cmd_bench,
    "show-map": _cmd_show_map,
}


def main(argv=None) -> int:
    try:
        parser = _build_parser()
        args = parser.parse_args(argv)
        cfg = _resolve(args)
        return _COMMANDS[cfg.command](cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (MapFormatError, StorageError) as e:
        print(f"error: bad input file: {e}", file=sys.stderr)
        return 1
    except (ValueError, SamplingExhaustedError, TrainingDivergedError) as e:
        print(f"error: invalid config value: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
