"""Inner-loop SGD, outer-loop Adam, and multi-step learning-rate schedules.

All steps are pure: they return fresh parameter/state objects and never
touch their inputs.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .model import ParameterSet, _check_schema, axpy


@dataclass(frozen=True)
class MultiStepSchedule:
    lr_base: float
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.lr_base <= 0:
            raise ValueError(f"lr_base must be positive, got {self.lr_base}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")


# outer loop: 2e-4, then x0.15 from iteration 2000 on
META_SCHEDULE = MultiStepSchedule(2e-4, (2000,), 0.15)
# adaptation stage: 1e-5 for epochs 0-1, then x0.1
ADAPT_SCHEDULE = MultiStepSchedule(1e-5, (2,), 0.1)


def schedule_lr(schedule: MultiStepSchedule, iteration: int) -> float:
    """``lr_base * gamma ** (number of milestones <= iteration)``.

    The product is rounded to 12 significant digits so that e.g. 1e-5 * 0.1
    gives exactly the double nearest 1e-6 instead of 1.0000000000000002e-06.
    """
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    k = sum(1 for m in schedule.milestones if m <= iteration)
    if k == 0:
        return schedule.lr_base
    return _round12(schedule.lr_base * schedule.gamma**k)


def _round12(x: float) -> float:
    return float(f"{x:.12g}")


def sgd_step(params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float) -> ParameterSet:
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    return axpy(params, grads, -lr)


@dataclass(frozen=True, eq=False)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_base: float = field(default=2e-4)


def adam_init(params: ParameterSet, beta1=0.9, beta2=0.999, eps=1e-8, lr_base=2e-4) -> AdamState:
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return AdamState(zeros, {k: np.zeros_like(v) for k, v in params.items()}, 0, beta1, beta2, eps, lr_base)


def adam_step(
    state: AdamState, params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float
) -> tuple[AdamState, ParameterSet]:
    """Bias-corrected Adam update."""
    _check_schema(params, grads)
    _check_schema(params, state.m)
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    m, v, new = {}, {}, {}
    for k in params:
        g = grads[k]
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        new[k] = params[k] - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    next_state = AdamState(m, v, t, b1, b2, state.eps, state.lr_base)
    return next_state, ParameterSet(params.config, new)


def schedule_sum(schedule: MultiStepSchedule, steps: int, steps_per_unit: float = 1.0) -> float:
    """Sum of the learning rate over ``steps`` schedule units, each ``steps_per_unit`` optimizer steps long."""
    return steps_per_unit * sum(schedule_lr(schedule, t) for t in range(steps))


def matched_schedule(
    reference: MultiStepSchedule,
    ref_units: int,
    units: int,
    ref_steps_per_unit: float = 1.0,
    steps_per_unit: float = 1.0,
) -> MultiStepSchedule:
    """Shrink a schedule to a shorter run while keeping its shape and total step size.

    Milestones keep their fractional position (``units`` long instead of
    ``ref_units``), the decay ratio is unchanged, and ``lr_base`` is rescaled
    so that the summed learning rate over all optimizer steps matches the
    reference. With Adam, whose steps have magnitude ~lr, this keeps the
    distance travelled in parameter space comparable.
    """
    if units < 1 or ref_units < 1:
        raise ValueError("run lengths must be positive")
    milestones = tuple(sorted({max(1, round(m * units / ref_units)) for m in reference.milestones if m < ref_units}))
    shape = MultiStepSchedule(1.0, milestones, reference.gamma)
    target = schedule_sum(reference, ref_units, ref_steps_per_unit)
    return MultiStepSchedule(_round12(target / schedule_sum(shape, units, steps_per_unit)), milestones, reference.gamma)
