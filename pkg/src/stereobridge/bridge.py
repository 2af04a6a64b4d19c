"""Bridge process over disparity fields.

The process transports an initial coarse disparity field toward the
ground-truth field as a pseudo time t runs from 0 to 1. A mixing
schedule beta(t) starts at 1 (all initial field) and decays toward a
small positive floor (all ground truth); training interpolates the two
endpoints with it, inference integrates a learned velocity instead and
never evaluates the schedule.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, List

import torch

BETA_MIN = 1e-9


@dataclass(frozen=True)
class ScheduleParams:
    """Mixing-schedule description.

    family "linear" uses 1 - t; family "sigmoid" squashes an affine
    ramp from `start` to `end` through a sigmoid with temperature
    `tau`, then rescales so beta(0) = 1 exactly. `steps` is the
    sampling step count N used by the reverse pass.
    """

    family: str = "linear"
    start: float = -3.0
    end: float = 3.0
    tau: float = 1.0
    min_clip: float = BETA_MIN
    steps: int = 8

    def __post_init__(self):
        if self.family not in ("linear", "sigmoid"):
            raise ValueError(f"unknown schedule family {self.family!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.min_clip < 1:
            raise ValueError("min_clip must lie in (0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


SCHEDULE_PRESETS = {
    "linear": ScheduleParams(family="linear"),
    "sigmoid_0_3_t03": ScheduleParams(family="sigmoid", start=0.0, end=3.0, tau=0.3),
    "sigmoid_0_3_t07": ScheduleParams(family="sigmoid", start=0.0, end=3.0, tau=0.7),
    "sigmoid_3_3_t10": ScheduleParams(family="sigmoid", start=-3.0, end=3.0, tau=1.0),
    "sigmoid_3_3_t11": ScheduleParams(family="sigmoid", start=-3.0, end=3.0, tau=1.1),
}


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def beta(t: float, params: ScheduleParams) -> float:
    """Mixing weight of the initial field at pseudo time t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if params.family == "linear":
        raw = 1.0 - t
    else:
        v_start = _sigmoid(params.start / params.tau)
        v_end = _sigmoid(params.end / params.tau)
        v_t = _sigmoid((t * (params.end - params.start) + params.start) / params.tau)
        raw = (v_end - v_t) / (v_end - v_start)
    return min(max(raw, params.min_clip), 1.0)


def forward_interpolate(
    disp_gt: torch.Tensor,
    disp_init: torch.Tensor,
    t: float,
    params: ScheduleParams,
    plain_linear: bool = False,
) -> torch.Tensor:
    """State of the bridge at time t between the two endpoint fields.

    Default mixing uses sqrt weights sqrt(1-b), sqrt(b); with
    plain_linear the weights are (1-b) and b directly. At t=0 the
    result is the initial field up to the schedule floor, at t=1 it is
    numerically the ground truth.
    """
    if disp_gt.shape != disp_init.shape:
        raise ValueError("endpoint fields must share a shape")
    b = beta(t, params)
    if plain_linear:
        return (1.0 - b) * disp_gt + b * disp_init
    return math.sqrt(1.0 - b) * disp_gt + math.sqrt(b) * disp_init


def velocity_target(disp_gt: torch.Tensor, disp_init: torch.Tensor) -> torch.Tensor:
    """Supervision target for the velocity head: the full displacement."""
    if disp_gt.shape != disp_init.shape:
        raise ValueError("endpoint fields must share a shape")
    return disp_gt - disp_init


@dataclass
class BridgeState:
    """Reverse-pass state: current field, starting field, step counter."""

    disp: torch.Tensor
    disp_init: torch.Tensor
    step: int
    num_steps: int

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be at least 1")
        if not 0 <= self.step <= self.num_steps:
            raise ValueError("step outside [0, num_steps]")
        if self.disp.shape != self.disp_init.shape:
            raise ValueError("state fields must share a shape")

    @property
    def t(self) -> float:
        return self.step / self.num_steps


def euler_step(state: BridgeState, velocity: torch.Tensor) -> BridgeState:
    """Advance the field by velocity / N and the clock by one step."""
    if state.step >= state.num_steps:
        raise ValueError("bridge already reached t=1")
    if velocity.shape != state.disp.shape:
        raise ValueError("velocity shape does not match the field")
    return replace(state, disp=state.disp + velocity / state.num_steps, step=state.step + 1)


def cumulative_update(state: BridgeState, velocity: torch.Tensor) -> BridgeState:
    """Re-anchor on the initial field: next = init + velocity."""
    if state.step >= state.num_steps:
        raise ValueError("bridge already reached t=1")
    if velocity.shape != state.disp.shape:
        raise ValueError("velocity shape does not match the field")
    return replace(state, disp=state.disp_init + velocity, step=state.step + 1)


def sample_reverse(
    velocity_fn: Callable[[torch.Tensor, float], torch.Tensor],
    disp_init: torch.Tensor,
    params: ScheduleParams,
    rule: str = "cumulative",
) -> List[torch.Tensor]:
    """Deterministically integrate the velocity field from t=0 to t=1.

    `velocity_fn(disp, t)` is evaluated at t = k/N for k in 0..N-1.
    Returns the N+1 visited fields, starting with `disp_init`. No noise
    enters anywhere; two calls with the same inputs agree exactly.
    """
    if rule not in ("euler", "cumulative"):
        raise ValueError(f"unknown update rule {rule!r}")
    state = BridgeState(disp=disp_init, disp_init=disp_init, step=0, num_steps=params.steps)
    advance = euler_step if rule == "euler" else cumulative_update
    trajectory = [disp_init]
    for _ in range(params.steps):
        v = velocity_fn(state.disp, state.t)
        state = advance(state, v)
        trajectory.append(state.disp)
    return trajectory
