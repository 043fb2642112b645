"""Runtime estimation methods and the estimate-doubling correction."""

from __future__ import annotations

import random
from collections import defaultdict, deque
from dataclasses import dataclass
from fractions import Fraction

from spotsim.market import InstanceType
from spotsim.speedup import runtime_on
from spotsim.workload import Job, round_half_up


@dataclass(frozen=True)
class EstimationMethod:
    """One of ``actual``, ``actual_error``, ``user``, ``user_fraction`` or ``recent_average``.

    ``fraction`` applies to ``user_fraction`` and ``k`` to ``recent_average``.
    ``error_sign`` is +1 for over-estimation (the default) or -1.
    """

    name: str
    fraction: float = 1 / 3
    k: int = 2
    max_error: float = 0.10
    error_sign: int = 1

    NAMES = ("actual", "actual_error", "user", "user_fraction", "recent_average")

    def __post_init__(self) -> None:
        if self.name not in self.NAMES:
            raise ValueError(f"unknown estimation method {self.name!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.error_sign not in (1, -1):
            raise ValueError("error_sign must be +1 or -1")

    @classmethod
    def parse(cls, text: str) -> "EstimationMethod":
        name, _, arg = text.strip().partition(":")
        if name == "user_fraction" and arg:
            return cls(name, fraction=float(Fraction(arg)))
        if name == "recent_average" and arg:
            return cls(name, k=int(arg))
        if arg:
            raise ValueError(f"method {name!r} takes no argument")
        return cls(name)

    def __str__(self) -> str:
        if self.name == "user_fraction":
            return f"user_fraction:{self.fraction:g}"
        if self.name == "recent_average":
            return f"recent_average:{self.k}"
        return self.name


ACTUAL = EstimationMethod("actual")
ACTUAL_ERROR = EstimationMethod("actual_error")
USER = EstimationMethod("user")
USER_FRACTION = EstimationMethod("user_fraction")
RECENT_AVERAGE = EstimationMethod("recent_average")


class UserHistory:
    """Per-user completed runtimes on the 1-ECU reference, most recent last."""

    def __init__(self, keep: int = 64) -> None:
        self._runs: dict[int, deque] = defaultdict(lambda: deque(maxlen=keep))

    def record_completion(self, user_id: int, base_runtime: int) -> "UserHistory":
        self._runs[user_id].append(base_runtime)
        return self

    def recent(self, user_id: int, k: int) -> list[int]:
        runs = self._runs.get(user_id)
        if not runs:
            return []
        return list(runs)[-k:]

    def __len__(self) -> int:
        return sum(len(v) for v in self._runs.values())


def estimate_base(method: EstimationMethod, job: Job, history: UserHistory, rng: random.Random) -> int:
    name = method.name
    if name == "actual":
        return job.base_runtime
    if name == "actual_error":
        if job.error_draw is None:
            job.error_draw = rng.uniform(0, method.max_error)
        return max(1, round_half_up(job.base_runtime * (1 + method.error_sign * job.error_draw)))
    if name == "user":
        return job.user_estimate
    if name == "user_fraction":
        return max(1, round_half_up(job.user_estimate * method.fraction))
    recent = history.recent(job.user_id, method.k)
    if len(recent) < method.k:
        return job.user_estimate
    return max(1, round_half_up(sum(recent) / len(recent)))


def estimate_on_type(method: EstimationMethod, job: Job, itype: InstanceType,
                     history: UserHistory, rng: random.Random) -> int:
    return runtime_on(estimate_base(method, job, history, rng), job.profile, itype)


def correct(old_estimate: int) -> int:
    if old_estimate <= 0:
        raise ValueError("estimate must be positive")
    return 2 * old_estimate


def record_completion(history: UserHistory, user_id: int, observed_base_runtime: int) -> UserHistory:
    return history.record_completion(user_id, observed_base_runtime)


def working_estimate(method: EstimationMethod, job: Job, history: UserHistory,
                     rng: random.Random) -> int:
    """The job's base-runtime belief, fixed at first use and changed only by correction."""
    if job.current_estimate is None:
        job.current_estimate = estimate_base(method, job, history, rng)
    return job.current_estimate


def observed_base(observed_runtime: int, speedup_value: float) -> int:
    return max(1, round_half_up(observed_runtime * speedup_value))

