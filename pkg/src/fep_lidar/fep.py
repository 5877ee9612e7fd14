"""Free-energy state estimation and navigation on the learned scan model.

Perception refines a position belief by descending the precision-weighted
squared prediction error between the observed and predicted scans. Navigation
adds a goal attractor to the same update and infers a velocity command from
the residual error, so acting and perceiving are the one mechanism.

All positions here are in normalized map coordinates ([-1, 1] per axis)
unless a function explicitly deals in meters (true poses, actions).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from fep_lidar.genmodel import (
    GenModel,
    denormalize_pose,
    forward,
    forward_and_jacobian,
    normalize_pose,
    normalize_scan,
    pose_scale,
)
from fep_lidar.world import Pose2, SensorConfig, WorldMap, apply_action, simulate_scan


class UpdateDivergedError(FloatingPointError):
    """A belief or action update went non-finite (step size too large)."""


@dataclass(frozen=True)
class Belief:
    """Position estimate with its gradient-descent step size and sensor precision."""

    x_tilde: np.ndarray  # (2,) normalized position
    alpha: float = 1e-2
    sigma_o: float | np.ndarray = 1.0  # scalar or per-beam observation variance

    def __post_init__(self):
        object.__setattr__(
            self, "x_tilde", np.asarray(self.x_tilde, dtype=float).reshape(2)
        )
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not np.all(np.asarray(self.sigma_o) > 0.0):
            raise ValueError("sigma_o entries must be > 0")


@dataclass(frozen=True)
class GoalSpec:
    """Target state with its predicted scan and the attractor weighting."""

    x_goal: np.ndarray  # (2,) normalized
    o_goal: np.ndarray  # (B,) cached prediction at x_goal
    beta: float = 1.0
    sigma_x: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x_goal", np.asarray(self.x_goal, dtype=float).reshape(2))
        object.__setattr__(self, "o_goal", np.asarray(self.o_goal, dtype=float))
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.sigma_x <= 0.0:
            raise ValueError(f"sigma_x must be > 0, got {self.sigma_x}")


def make_goal(model: GenModel, x_goal, beta: float = 1.0, sigma_x: float = 1.0) -> GoalSpec:
    """Build a GoalSpec with o_goal generated from the model at x_goal."""
    x_goal = np.asarray(x_goal, dtype=float).reshape(2)
    return GoalSpec(x_goal, forward(model, x_goal), beta, sigma_x)


@dataclass(frozen=True)
class ControlState:
    """Velocity command (m/s) plus the gains converting belief gradients to it.

    The action update is computed in normalized coordinates and scaled to
    meters per second through `xy_scale` (the map half-extents) before the
    clamp, so `a` is always directly actuable.
    """

    a: np.ndarray  # (2,) m/s
    gamma: float = 1.0
    dt: float = 0.5
    dxda: float = 0.5  # state change per unit action, seconds
    xy_scale: np.ndarray = field(default_factory=lambda: np.ones(2))
    a_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(2))
        object.__setattr__(
            self, "xy_scale", np.asarray(self.xy_scale, dtype=float).reshape(2)
        )
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.a_max <= 0.0:
            raise ValueError(f"a_max must be > 0, got {self.a_max}")
        if np.any(np.abs(self.a) > self.a_max + 1e-12):
            raise ValueError("action exceeds a_max")


@dataclass(frozen=True)
class FepParams:
    """Tunables of the perception/action loops, in one bundle."""

    alpha: float = 1e-2
    beta: float = 1.0
    sigma_o: float = 1.0
    sigma_x: float = 1.0
    gamma: float = 1.0
    dt: float = 0.5
    a_max: float = 1.0
    max_iterations: int = 500
    success_radius: float = 0.8
    reset_action: bool = True  # recompute the command from zero each iteration

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.success_radius <= 0.0:
            raise ValueError(f"success_radius must be > 0, got {self.success_radius}")


def free_energy(o: np.ndarray, belief: Belief, model: GenModel) -> float:
    """Half the precision-weighted squared prediction error at the belief."""
    o = np.asarray(o, dtype=float)
    pred = forward(model, belief.x_tilde)
    if o.shape != pred.shape:
        raise ValueError(f"scan length {o.shape} does not match model {pred.shape}")
    eps = o - pred
    return 0.5 * float(np.sum(eps * eps / belief.sigma_o))


def _perceive(belief: Belief, o: np.ndarray, goal: GoalSpec | None, model: GenModel) -> Belief:
    pred, jac = forward_and_jacobian(model, belief.x_tilde)
    o = np.asarray(o, dtype=float)
    if o.shape != pred.shape:
        raise ValueError(f"scan length {o.shape} does not match model {pred.shape}")
    drive = (o - pred) / belief.sigma_o
    if goal is not None and goal.beta != 0.0:
        drive = drive + (goal.beta / goal.sigma_x) * (o - goal.o_goal)
    x_new = belief.x_tilde + belief.alpha * (jac.T @ drive)
    if not np.all(np.isfinite(x_new)):
        raise UpdateDivergedError(
            f"belief update is non-finite (alpha={belief.alpha}; reduce it)"
        )
    return replace(belief, x_tilde=np.clip(x_new, -1.0, 1.0))


def perceive_step(belief: Belief, o: np.ndarray, model: GenModel) -> Belief:
    """One free-energy descent step on the belief given an observed scan."""
    return _perceive(belief, o, None, model)


def perceive_goal_step(
    belief: Belief, o: np.ndarray, goal: GoalSpec, model: GenModel
) -> Belief:
    """Perception step with the goal attractor added to the error drive."""
    return _perceive(belief, o, goal, model)


def act_step(
    ctrl: ControlState, belief: Belief, o: np.ndarray, model: GenModel
) -> ControlState:
    """Infer a velocity command from the current scan prediction error."""
    pred, jac = forward_and_jacobian(model, belief.x_tilde)
    o = np.asarray(o, dtype=float)
    if o.shape != pred.shape:
        raise ValueError(f"scan length {o.shape} does not match model {pred.shape}")
    drive = (o - pred) / belief.sigma_o
    delta_norm = ctrl.gamma * ctrl.dxda * (jac.T @ drive)
    a_new = ctrl.a + delta_norm * ctrl.xy_scale
    if not np.all(np.isfinite(a_new)):
        raise UpdateDivergedError(
            f"action update is non-finite (gamma={ctrl.gamma}; reduce it)"
        )
    return replace(ctrl, a=np.clip(a_new, -ctrl.a_max, ctrl.a_max))


class TraceRow(NamedTuple):
    """One loop iteration: ground truth, belief, action, and fit metrics."""

    iter: int
    true_x: float
    true_y: float
    belief_x: float
    belief_y: float
    ax: float
    ay: float
    err: float
    dist_goal: float
    f: float


def _meters(x_tilde: np.ndarray, bounds) -> np.ndarray:
    return denormalize_pose(x_tilde, bounds)


def localize(
    wmap: WorldMap,
    model: GenModel,
    sensor: SensorConfig,
    true_poses: list[Pose2],
    belief: Belief,
    rng: np.random.Generator,
) -> list[TraceRow]:
    """Observe-and-update along a fixed true-pose sequence; no actions taken.

    One perception step per entry of `true_poses` (a constant list is static
    localization; a path of small jumps is the teleport-traversal variant).
    Returns one row per iteration, numbered from 1.
    """
    rows = []
    for k, pose in enumerate(true_poses, start=1):
        scan = normalize_scan(simulate_scan(wmap, pose, sensor, rng), sensor.max_range)
        belief = perceive_step(belief, scan, model)
        est = _meters(belief.x_tilde, wmap.bounds)
        err = float(np.hypot(est[0] - pose.x, est[1] - pose.y))
        rows.append(
            TraceRow(
                k, pose.x, pose.y, est[0], est[1], 0.0, 0.0, err, 0.0,
                free_energy(scan, belief, model),
            )
        )
    return rows


@dataclass
class NavResult:
    """Navigation outcome: the trace, whether the goal was reached, and when."""

    rows: list[TraceRow]
    success: bool
    iterations: int


def navigate(
    wmap: WorldMap,
    model: GenModel,
    sensor: SensorConfig,
    start: Pose2,
    goal_pose: Pose2,
    params: FepParams,
    rng: np.random.Generator,
) -> NavResult:
    """Drive from start toward goal by dual inference of belief and action.

    Loop per iteration: scan at the true pose, goal-biased perception step,
    action inference from the updated belief (command restarted from zero
    unless params.reset_action is off), then integrate the command for dt
    seconds with collision stopping. Success when the true distance to the
    goal drops below params.success_radius; gives up at params.max_iterations.

    The belief starts at the true start pose. Row 0 records the initial
    state; row k the state after the k-th action.
    """
    bounds = wmap.bounds
    _, half = pose_scale(bounds)
    goal = make_goal(
        model, normalize_pose(goal_pose.to_array(), bounds), params.beta, params.sigma_x
    )
    belief = Belief(
        normalize_pose(start.to_array(), bounds), params.alpha, params.sigma_o
    )
    ctrl = ControlState(
        np.zeros(2), params.gamma, params.dt, params.dt, half, params.a_max
    )
    true_pose = start
    goal_xy = goal_pose.to_array()

    def distance(p: Pose2) -> float:
        return float(np.hypot(p.x - goal_xy[0], p.y - goal_xy[1]))

    est = _meters(belief.x_tilde, bounds)
    rows = [
        TraceRow(
            0, true_pose.x, true_pose.y, est[0], est[1], 0.0, 0.0,
            float(np.hypot(est[0] - true_pose.x, est[1] - true_pose.y)),
            distance(true_pose), 0.0,
        )
    ]
    success = distance(true_pose) < params.success_radius
    steps = 0
    while not success and steps < params.max_iterations:
        scan = normalize_scan(
            simulate_scan(wmap, true_pose, sensor, rng), sensor.max_range
        )
        belief = perceive_goal_step(belief, scan, goal, model)
        if params.reset_action:
            ctrl = replace(ctrl, a=np.zeros(2))
        ctrl = act_step(ctrl, belief, scan, model)
        true_pose = apply_action(wmap, true_pose, ctrl.a, params.dt)
        steps += 1
        est = _meters(belief.x_tilde, bounds)
        rows.append(
            TraceRow(
                steps, true_pose.x, true_pose.y, est[0], est[1],
                float(ctrl.a[0]), float(ctrl.a[1]),
                float(np.hypot(est[0] - true_pose.x, est[1] - true_pose.y)),
                distance(true_pose),
                free_energy(scan, belief, model),
            )
        )
        success = distance(true_pose) < params.success_radius
    return NavResult(rows, success, steps)
