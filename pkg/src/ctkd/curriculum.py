"""Per-epoch schedules for the reversal magnitude lambda."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

STRATEGIES = ("cosine", "linear", "fixed_lambda", "delayed_fixed")


@dataclass(frozen=True)
class CurriculumSchedule:
    """How lambda evolves with the completed-epoch index ``E_n`` (from 0).

    ``cosine`` and ``linear`` ramp from ``lambda_min`` to ``lambda_max`` over
    ``e_loops`` epochs and then hold. ``fixed_lambda`` emits ``value`` from the
    start. ``delayed_fixed`` emits 0 for the first ``e_loops`` epochs, during
    which the trainer distils at the fixed ``delay_tau``, then ``value``.
    """

    strategy: str = "cosine"
    lambda_min: float = 0.0
    lambda_max: float = 1.0
    e_loops: int = 10
    value: Optional[float] = None
    delay_tau: Optional[float] = None

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.strategy not in STRATEGIES:
            out.append(f"unknown strategy {self.strategy!r}")
        if not self.lambda_min <= self.lambda_max:
            out.append("lambda_min must not exceed lambda_max")
        if self.lambda_min < 0:
            out.append("lambda_min must be >= 0")
        if int(self.e_loops) != self.e_loops or self.e_loops < 1:
            out.append("e_loops must be a positive integer")
        if self.strategy in ("fixed_lambda", "delayed_fixed"):
            if self.value is None:
                out.append(f"{self.strategy} needs a value")
            elif not self.lambda_min <= self.value <= self.lambda_max:
                out.append("fixed value must lie within [lambda_min, lambda_max]")
        if self.strategy == "delayed_fixed":
            if self.lambda_min != 0:
                out.append("delayed_fixed starts at lambda 0, so lambda_min must be 0")
            if self.delay_tau is None or not self.delay_tau > 0:
                out.append("delayed_fixed needs a positive delay_tau")
        return out

    @classmethod
    def cosine(cls, lambda_min=0.0, lambda_max=1.0, e_loops=10) -> "CurriculumSchedule":
        return cls("cosine", lambda_min, lambda_max, e_loops)

    @classmethod
    def linear(cls, lambda_min=0.0, lambda_max=1.0, e_loops=10) -> "CurriculumSchedule":
        return cls("linear", lambda_min, lambda_max, e_loops)

    @classmethod
    def fixed(cls, value: float) -> "CurriculumSchedule":
        return cls("fixed_lambda", value, value, 1, value=value)

    @classmethod
    def delayed(cls, value: float = 1.0, delay_tau: float = 1.0,
                e_loops: int = 10) -> "CurriculumSchedule":
        return cls("delayed_fixed", 0.0, value, e_loops, value=value, delay_tau=delay_tau)

    def lambda_at(self, epoch: int) -> float:
        return lambda_at(self, epoch)

    def in_delay(self, epoch: int) -> bool:
        """True while a delayed schedule still runs plain fixed-tau distillation."""
        return self.strategy == "delayed_fixed" and epoch < self.e_loops


def lambda_at(schedule: CurriculumSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    lo, hi, loops = schedule.lambda_min, schedule.lambda_max, schedule.e_loops
    if schedule.strategy == "cosine":
        progress = min(epoch, loops) / loops
        return lo + 0.5 * (hi - lo) * (1.0 + math.cos((1.0 + progress) * math.pi))
    if schedule.strategy == "linear":
        return lo + (hi - lo) * (min(epoch, loops) / loops)
    if schedule.strategy == "fixed_lambda":
        return float(schedule.value)
    # delayed_fixed
    return 0.0 if epoch < loops else float(schedule.value)
