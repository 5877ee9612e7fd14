"""Benchmark harness: seeded trials, error aggregation, CSV and plot output.

Three experiments on one map/model pair:

* static localization — random true pose, stationary robot, belief refined
  from repeated scans; compared against the particle filter,
* traversal — the true pose teleports along a straight corridor path with one
  filter update per hop,
* navigation — goal-seeking runs between start/goal pairs far apart.

Trials are independent: trial t derives every random stream from
(seed, t, stream-id), so results do not depend on execution order and
parallel runs reproduce sequential ones byte for byte.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from fep_lidar.fep import (
    Belief,
    FepParams,
    TraceRow,
    UpdateDivergedError,
    free_energy,
    navigate,
    perceive_step,
)
from fep_lidar.genmodel import GenModel, denormalize_pose, normalize_pose, normalize_scan
from fep_lidar.pf import PfConfig, estimate, init_uniform, pf_step
from fep_lidar.world import (
    Pose2,
    SamplingExhaustedError,
    SensorConfig,
    WorldMap,
    sample_free_pose,
    segment_is_clear,
    simulate_scan,
)

_KINDS = ("static", "traversal", "navigation")
_METHODS = ("fep", "pf", "both")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "static"
    trials: int = 100
    iterations: int = 50
    seed: int = 0
    min_start_goal_distance: float = 12.0
    success_radius: float = 0.8
    method: str = "both"
    teleport_step: float = 0.4  # meters per hop in the traversal experiment
    jobs: int = 1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, got {self.method!r}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.success_radius <= 0.0:
            raise ValueError(f"success_radius must be > 0, got {self.success_radius}")
        if self.teleport_step < 0.0:
            raise ValueError(f"teleport_step must be >= 0, got {self.teleport_step}")
        if self.jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {self.jobs}")

    def wants(self, method: str) -> bool:
        return self.method in (method, "both")


class TrialRecord(NamedTuple):
    """Per-trial outcome row."""

    trial: int
    final_err: float
    diverged: bool
    success: bool | None = None
    iterations: int | None = None
    initial_dist: float | None = None
    final_dist: float | None = None


@dataclass
class MetricSeries:
    """Across-trial mean and spread of positional error, per iteration."""

    method: str
    iters: np.ndarray
    mean_err: np.ndarray
    std_err: np.ndarray
    n_trials: int
    mean_dist_goal: np.ndarray | None = None
    trials: list[TrialRecord] = field(default_factory=list)


@dataclass
class BenchResult:
    series: dict[str, MetricSeries]
    traces: dict[str, list[list[TraceRow]]]


def _rng(seed: int, trial: int, stream: int) -> np.random.Generator:
    return np.random.default_rng((seed, trial, stream))


def _summarize(method, errs, iters, records, dists=None) -> MetricSeries:
    """errs: (trials, K) error matrix -> per-iteration mean/std (ddof 1)."""
    errs = np.asarray(errs)
    n = errs.shape[0]
    std = errs.std(axis=0, ddof=1) if n > 1 else np.zeros(errs.shape[1])
    mean_dist = None if dists is None else np.asarray(dists).mean(axis=0)
    return MetricSeries(method, np.asarray(iters), errs.mean(axis=0), std, n,
                        mean_dist, records)


# ---------------------------------------------------------------------------
# per-trial workers (module-level so process pools can pickle them)

_WORKER: tuple | None = None


def _set_worker_state(state) -> None:
    global _WORKER
    _WORKER = state


def _fep_track_trial(
    wmap: WorldMap,
    model: GenModel,
    sensor: SensorConfig,
    path: list[Pose2],
    belief: Belief,
    rng: np.random.Generator,
) -> tuple[list[TraceRow], bool]:
    """Scan-and-update along a true-pose path, freezing the belief if a step
    diverges so the trial still yields a full-length error series."""
    rows: list[TraceRow] = []
    diverged = False
    for k, pose in enumerate(path, start=1):
        scan = normalize_scan(simulate_scan(wmap, pose, sensor, rng), sensor.max_range)
        f_val = 0.0
        if not diverged:
            try:
                belief = perceive_step(belief, scan, model)
                f_val = free_energy(scan, belief, model)
            except UpdateDivergedError:
                diverged = True
        est = denormalize_pose(belief.x_tilde, wmap.bounds)
        err = float(np.hypot(est[0] - pose.x, est[1] - pose.y))
        rows.append(TraceRow(k, pose.x, pose.y, float(est[0]), float(est[1]),
                             0.0, 0.0, err, 0.0, f_val))
    return rows, diverged


def _pf_track_trial(
    wmap: WorldMap,
    sensor: SensorConfig,
    pf_cfg: PfConfig,
    path: list[Pose2],
    scan_rng: np.random.Generator,
    pf_rng: np.random.Generator,
) -> list[TraceRow]:
    ps = init_uniform(wmap, pf_cfg, pf_rng)
    rows: list[TraceRow] = []
    for k, pose in enumerate(path, start=1):
        scan = simulate_scan(wmap, pose, sensor, scan_rng)
        ps = pf_step(ps, scan, wmap, sensor, pf_cfg, pf_rng)
        est = estimate(ps)
        err = float(np.hypot(est.x - pose.x, est.y - pose.y))
        rows.append(TraceRow(k, pose.x, pose.y, est.x, est.y,
                             0.0, 0.0, err, 0.0, 0.0))
    return rows


def _tracking_trial(t: int):
    """One static/traversal trial; returns per-method traces and flags."""
    wmap, model, sensor, cfg, fep_params, pf_cfg = _WORKER
    if cfg.kind == "static":
        pose = sample_free_pose(wmap, _rng(cfg.seed, t, 2))
        path = [pose] * cfg.iterations
    else:
        path = _traversal_path(wmap, cfg)
    out = {}
    if cfg.wants("fep"):
        belief = Belief(np.zeros(2), fep_params.alpha, fep_params.sigma_o)
        rows, diverged = _fep_track_trial(
            wmap, model, sensor, path, belief, _rng(cfg.seed, t, 0)
        )
        out["fep"] = (rows, diverged)
    if cfg.wants("pf"):
        rows = _pf_track_trial(
            wmap, sensor, pf_cfg, path, _rng(cfg.seed, t, 0), _rng(cfg.seed, t, 1)
        )
        out["pf"] = (rows, False)
    return out


def _navigation_trial(t: int):
    wmap, model, sensor, cfg, fep_params, _ = _WORKER
    pose_rng = _rng(cfg.seed, t, 2)
    start, goal = sample_start_goal_pair(
        wmap, cfg.min_start_goal_distance, pose_rng
    )
    try:
        res = navigate(wmap, model, sensor, start, goal, fep_params,
                       _rng(cfg.seed, t, 0))
        return res.rows, res.success, res.iterations, False
    except UpdateDivergedError:
        d0 = float(np.hypot(start.x - goal.x, start.y - goal.y))
        row = TraceRow(0, start.x, start.y, start.x, start.y, 0.0, 0.0, 0.0, d0, 0.0)
        return [row], False, fep_params.max_iterations, True


def _traversal_path(wmap: WorldMap, cfg: ExperimentConfig) -> list[Pose2]:
    """Straight centered path along the x axis, one pose per iteration."""
    xmin, ymin, xmax, ymax = wmap.bounds
    cx, cy = (xmin + xmax) / 2.0, (ymin + ymax) / 2.0
    length = cfg.teleport_step * (cfg.iterations - 1)
    start_x = cx - length / 2.0
    path = [Pose2(start_x + cfg.teleport_step * k, cy) for k in range(cfg.iterations)]
    for endpoint in (path[0], path[-1]):
        if not segment_is_clear(wmap, endpoint.to_array(), endpoint.to_array()):
            raise ValueError(
                f"traversal endpoint {endpoint} is not in free space on this map"
            )
    return path


def sample_start_goal_pair(
    wmap: WorldMap,
    min_distance: float,
    rng: np.random.Generator,
    max_tries: int = 10_000,
) -> tuple[Pose2, Pose2]:
    """Far-apart start/goal with a clear straight run between them.

    The controller is a local gradient scheme with no path planner, so pairs
    are constrained to mutually visible positions (matching an unobstructed
    straight-line task); distance must still meet `min_distance`.
    """
    for _ in range(max_tries):
        start = sample_free_pose(wmap, rng)
        goal = sample_free_pose(wmap, rng)
        if np.hypot(start.x - goal.x, start.y - goal.y) < min_distance:
            continue
        if segment_is_clear(wmap, start.to_array(), goal.to_array()):
            return start, goal
    raise SamplingExhaustedError(
        f"no visible start/goal pair at distance >= {min_distance} in {max_tries} tries"
    )


def _run_trials(worker, cfg: ExperimentConfig, state):
    """Run trial indices 0..trials-1, inline or in a process pool."""
    indices = range(cfg.trials)
    if cfg.jobs == 1:
        _set_worker_state(state)
        return [worker(t) for t in indices]
    with ProcessPoolExecutor(
        max_workers=cfg.jobs, initializer=_set_worker_state, initargs=(state,)
    ) as pool:
        return list(pool.map(worker, indices))


def run_static_localization(
    wmap: WorldMap,
    model: GenModel,
    sensor: SensorConfig,
    cfg: ExperimentConfig,
    fep_params: FepParams,
    pf_cfg: PfConfig,
) -> BenchResult:
    """Stationary robot, random true pose per trial; belief starts at the map
    center, particles spread uniformly."""
    return _run_tracking(wmap, model, sensor, cfg, fep_params, pf_cfg)


def run_traversal(
    wmap: WorldMap,
    model: GenModel,
    sensor: SensorConfig,
    cfg: ExperimentConfig,
    fep_params: FepParams,
    pf_cfg: PfConfig,
) -> BenchResult:
    """True pose hops along a straight path; one filter update per hop."""
    return _run_tracking(wmap, model, sensor, cfg, fep_params, pf_cfg)


def _run_tracking(wmap, model, sensor, cfg, fep_params, pf_cfg) -> BenchResult:
    state = (wmap, model, sensor, cfg, fep_params, pf_cfg)
    per_trial = _run_trials(_tracking_trial, cfg, state)
    series: dict[str, MetricSeries] = {}
    traces: dict[str, list[list[TraceRow]]] = {}
    iters = np.arange(1, cfg.iterations + 1)
    for method in ("fep", "pf"):
        if not cfg.wants(method):
            continue
        rows_per_trial = [out[method][0] for out in per_trial]
        errs = [[r.err for r in rows] for rows in rows_per_trial]
        records = [
            TrialRecord(t, rows[-1].err, out[method][1])
            for t, (rows, out) in enumerate(zip(rows_per_trial, per_trial))
        ]
        series[method] = _summarize(method, errs, iters, records)
        traces[method] = rows_per_trial
    return BenchResult(series, traces)


def run_navigation(
    wmap: WorldMap,
    model: GenModel,
    sensor: SensorConfig,
    cfg: ExperimentConfig,
    fep_params: FepParams,
    pf_cfg: PfConfig,
) -> BenchResult:
    """Goal-seeking trials; start/goal at least min_start_goal_distance apart.

    Per-iteration curves are padded with each trial's final value so finished
    runs keep contributing their end state to the averages. Iteration 0 is
    the initial condition; iteration k the state after the k-th command.
    cfg.iterations is the step budget per trial.
    """
    fep_params = _align_params(fep_params, cfg)
    state = (wmap, model, sensor, cfg, fep_params, pf_cfg)
    per_trial = _run_trials(_navigation_trial, cfg, state)
    n_iters = cfg.iterations
    errs = np.empty((cfg.trials, n_iters + 1))
    dists = np.empty((cfg.trials, n_iters + 1))
    records = []
    traces = []
    for t, (rows, success, iterations, diverged) in enumerate(per_trial):
        err_series = [r.err for r in rows]
        dist_series = [r.dist_goal for r in rows]
        pad = n_iters + 1 - len(rows)
        errs[t] = err_series + [err_series[-1]] * pad
        dists[t] = dist_series + [dist_series[-1]] * pad
        records.append(
            TrialRecord(
                t, err_series[-1], diverged, success, iterations,
                dist_series[0], dist_series[-1],
            )
        )
        traces.append(rows)
    series = _summarize("fep", errs, np.arange(n_iters + 1), records, dists)
    return BenchResult({"fep": series}, {"fep": traces})


def _align_params(params: FepParams, cfg: ExperimentConfig) -> FepParams:
    from dataclasses import replace

    return replace(
        params, success_radius=cfg.success_radius, max_iterations=cfg.iterations
    )


def success_rate(series: MetricSeries) -> float:
    """Fraction of successful trials (navigation only)."""
    outcomes = [r.success for r in series.trials if r.success is not None]
    if not outcomes:
        raise ValueError("series has no success/failure outcomes")
    return sum(outcomes) / len(outcomes)


def mean_iterations_to_success(
    series: MetricSeries, dist_range: tuple[float, float] | None = None
) -> float:
    """Average step count over successful trials, optionally filtered by the
    trial's initial start-goal distance."""
    vals = [
        r.iterations
        for r in series.trials
        if r.success
        and (dist_range is None or dist_range[0] <= r.initial_dist <= dist_range[1])
    ]
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    return f"{float(v):.10g}"


def write_csv(series_by_method: dict[str, MetricSeries], path) -> None:
    """Summary CSV: one row per (iteration, method), deterministic bytes."""
    if not series_by_method:
        raise ValueError("no series to write")
    with_dist = any(s.mean_dist_goal is not None for s in series_by_method.values())
    header = "iter,method,mean_err,std_err,n_trials"
    if with_dist:
        header += ",mean_dist_goal"
    lines = [header]
    methods = [m for m in ("fep", "pf") if m in series_by_method]
    length = len(next(iter(series_by_method.values())).iters)
    for k in range(length):
        for m in methods:
            s = series_by_method[m]
            row = (
                f"{int(s.iters[k])},{m},{_fmt(s.mean_err[k])},"
                f"{_fmt(s.std_err[k])},{s.n_trials}"
            )
            if with_dist:
                d = s.mean_dist_goal[k] if s.mean_dist_goal is not None else 0.0
                row += f",{_fmt(d)}"
            lines.append(row)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_trace_csv(traces: list[list[TraceRow]], path) -> None:
    """Per-trial trace CSV for one method."""
    lines = ["trial,iter,true_x,true_y,belief_x,belief_y,ax,ay,err,dist_goal,F"]
    for t, rows in enumerate(traces):
        for r in rows:
            lines.append(
                f"{t},{r.iter},{_fmt(r.true_x)},{_fmt(r.true_y)},"
                f"{_fmt(r.belief_x)},{_fmt(r.belief_y)},{_fmt(r.ax)},{_fmt(r.ay)},"
                f"{_fmt(r.err)},{_fmt(r.dist_goal)},{_fmt(r.f)}"
            )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def emit_plot(series_by_method: dict[str, MetricSeries], path, title: str = "") -> None:
    """Self-contained SVG: mean error lines with shaded one-std bands.

    Rendered with a fixed hash salt and no timestamp so identical inputs
    produce identical files.
    """
    if not series_by_method:
        raise ValueError("no series to plot")
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    colors = {"fep": "tab:blue", "pf": "tab:orange"}
    with plt.rc_context({"svg.hashsalt": "fep-lidar"}):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for method, s in series_by_method.items():
            c = colors.get(method, "tab:gray")
            ax.plot(s.iters, s.mean_err, color=c, label=f"{method} mean error")
            ax.fill_between(
                s.iters, s.mean_err - s.std_err, s.mean_err + s.std_err,
                color=c, alpha=0.25, linewidth=0,
            )
            if s.mean_dist_goal is not None:
                ax.plot(s.iters, s.mean_dist_goal, color="tab:green",
                        label=f"{method} mean distance to goal")
        ax.set_xlabel("iteration")
        ax.set_ylabel("meters")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
