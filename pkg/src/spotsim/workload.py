"""Standard Workload Format ingestion and job augmentation.

SWF records carry 18 whitespace-separated fields; we keep job id (1), submit
time (2), run time (4), requested time (9) and user id (12).  Everything else,
including processor counts, is ignored: jobs are moldable and get a generated
parallelism profile instead.
"""

from __future__ import annotations

import dataclasses
import io
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, TextIO, Union

from spotsim.speedup import DEFAULT_PROFILE_CONFIG, ParallelismProfile, ProfileConfig, generate_profile

SWF_FIELDS = 18


class SWFError(ValueError):
    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class JobState(Enum):
    PENDING = "pending"
    POSTPONED = "postponed"
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"


@dataclass(frozen=True)
class RawJob:
    job_id: int
    submit_time: int
    runtime: int
    estimate: int  # -1 when the trace has none
    user_id: int


@dataclass(eq=False)
class Job:
    id: int
    user_id: int
    submit_time: int
    base_runtime: int
    user_estimate: int
    deadline: int
    profile: ParallelismProfile
    state: JobState = JobState.PENDING
    assigned_instance: Optional[object] = None
    current_estimate: Optional[int] = None
    completion_time: Optional[int] = None
    # broker bookkeeping
    postponed: bool = False
    start_time: Optional[int] = None
    error_draw: Optional[float] = field(default=None, repr=False)
    completion_event: Optional[object] = field(default=None, repr=False)
    correction_event: Optional[object] = field(default=None, repr=False)
    expiry_event: Optional[object] = field(default=None, repr=False)
    corrections: int = 0
    restarts: int = 0
    ran_on: Optional[str] = None

    def __post_init__(self) -> None:
        if self.base_runtime <= 0 or self.user_estimate <= 0:
            raise ValueError(f"job {self.id}: runtime and estimate must be positive")
        if self.deadline <= self.submit_time:
            raise ValueError(f"job {self.id}: deadline must follow submission")

    @property
    def missed(self) -> bool:
        return self.completion_time is not None and self.completion_time > self.deadline

    def fresh_copy(self) -> "Job":
        """The same job with all run-time state cleared."""
        return Job(
            self.id, self.user_id, self.submit_time, self.base_runtime,
            self.user_estimate, self.deadline, self.profile,
        )


def parse_swf(stream: Union[str, Path, TextIO]) -> list[RawJob]:
    if isinstance(stream, (str, Path)):
        with open(stream) as fh:
            return parse_swf(fh)
    jobs = []
    for lineno, line in enumerate(stream, 1):
        text = line.strip()
        if not text or text.startswith(";"):
            continue
        parts = text.split()
        if len(parts) != SWF_FIELDS:
            raise SWFError(lineno, f"expected {SWF_FIELDS} fields, got {len(parts)}")
        try:
            values = [float(p) for p in parts]
        except ValueError:
            bad = next(p for p in parts if not _is_number(p))
            raise SWFError(lineno, f"non-numeric field {bad!r}") from None
        runtime = int(values[3])
        if runtime <= 0:
            continue
        jobs.append(RawJob(
            job_id=int(values[0]),
            submit_time=int(values[1]),
            runtime=runtime,
            estimate=int(values[8]),
            user_id=int(values[11]),
        ))
    return jobs


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_swf(jobs: Iterable[RawJob], dest: TextIO, header: Sequence[str] = ()) -> None:
    for h in header:
        dest.write(f"; {h}\n")
    for j in jobs:
        fields = [-1] * SWF_FIELDS
        fields[0], fields[1], fields[3] = j.job_id, j.submit_time, j.runtime
        fields[4], fields[7], fields[8] = 1, 1, j.estimate
        fields[10], fields[11] = 1, j.user_id
        dest.write(" ".join(str(f) for f in fields) + "\n")


def _parse_weights(spec: str) -> tuple[tuple[float, float], ...]:
    pairs = []
    for item in spec.split(","):
        value, _, weight = item.strip().partition(":")
        pairs.append((float(value), float(weight) if weight else 1.0))
    if any(v < 1 for v, _ in pairs):
        raise ValueError(f"estimate multipliers must be >= 1: {spec!r}")
    if not pairs or any(w < 0 for _, w in pairs) or sum(w for _, w in pairs) <= 0:
        raise ValueError(f"bad multiplier weights: {spec!r}")
    return tuple(pairs)


@dataclass
class AugmentConfig:
    estimate_multipliers: tuple[tuple[float, float], ...] = (
        (1, 0.35), (2, 0.25), (3, 0.2), (5, 0.12), (10, 0.08),
    )
    deadline_multiplier_range: tuple[float, float] = (1.5, 4.0)
    profile: ProfileConfig = DEFAULT_PROFILE_CONFIG

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        cfg = cls()
        if "estimate_multipliers" in d:
            cfg.estimate_multipliers = _parse_weights(str(d["estimate_multipliers"]))
        if "deadline_multiplier_range" in d:
            raw = d["deadline_multiplier_range"]
            lo, hi = (float(x) for x in (raw.split(",") if isinstance(raw, str) else raw))
            if not 1 <= lo <= hi:
                raise ValueError(f"bad deadline_multiplier_range {raw!r}")
            cfg.deadline_multiplier_range = (lo, hi)
        if "A_dist" in d or "sigma_dist" in d:
            cfg.profile = ProfileConfig.from_strings(
                d.get("A_dist", "pow2uniform:0,5"), d.get("sigma_dist", "uniform:0,2"),
            )
        return cfg


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def augment(raw_jobs: Iterable[RawJob], rng: random.Random, config: Optional[AugmentConfig] = None) -> list[Job]:
    """Attach user estimate, absolute deadline and parallelism profile to each job."""
    config = config or AugmentConfig()
    values = [v for v, _ in config.estimate_multipliers]
    weights = [w for _, w in config.estimate_multipliers]
    lo, hi = config.deadline_multiplier_range
    out = []
    for raw in raw_jobs:
        if raw.estimate > 0:
            estimate = raw.estimate
        else:
            m_est = rng.choices(values, weights)[0]
            estimate = max(1, round_half_up(raw.runtime * m_est))
        m_dl = rng.uniform(lo, hi)
        deadline = raw.submit_time + max(1, round_half_up(estimate * m_dl))
        profile = generate_profile(rng, config.profile)
        out.append(Job(raw.job_id, raw.user_id, raw.submit_time, raw.runtime, estimate, deadline, profile))
    return out


def scale_workload(jobs: Sequence, count: int, duration: int) -> list:
    """Keep the first ``count`` jobs and stretch their submit times over ``duration``.

    Works on :class:`RawJob` and :class:`Job`; a job's deadline moves with its
    submit time so the allowed runtime is unchanged.
    """
    if count > len(jobs):
        raise ValueError(f"requested {count} jobs but only {len(jobs)} available")
    head = list(jobs[:count])
    if not head:
        return []
    t0 = head[0].submit_time
    span = head[-1].submit_time - t0
    out = []
    for j in head:
        t = t0 if span == 0 else t0 + round_half_up((j.submit_time - t0) * duration / span)
        if isinstance(j, Job):
            j = j.fresh_copy()
            shift = t - j.submit_time
            j.submit_time, j.deadline = t, j.deadline + shift
            out.append(j)
        else:
            out.append(dataclasses.replace(j, submit_time=t))
    return out


def synthetic_raw_jobs(
    rng: random.Random,
    count: int,
    duration: int,
    users: int = 50,
    min_runtime: int = 60,
    max_runtime: int = 8 * 3600,
) -> list[RawJob]:
    """A bursty trace of independent jobs with per-user characteristic lengths.

    Runtimes are lognormal around a per-user median, so recent history is a
    useful (but imperfect) predictor.  No user estimates are included.
    """
    medians = [math.exp(rng.uniform(math.log(120), math.log(7200))) for _ in range(users)]
    activity = [1.0 / (k + 1) for k in range(users)]
    # a few bursts on top of a uniform background
    bursts = [(rng.uniform(0, duration), rng.uniform(600, 7200)) for _ in range(max(1, duration // 43200))]
    times = []
    for _ in range(count):
        if rng.random() < 0.4:
            centre, width = rng.choice(bursts)
            t = rng.uniform(centre - width / 2, centre + width / 2)
        else:
            t = rng.uniform(0, duration)
        times.append(min(max(int(t), 0), duration))
    times.sort()
    jobs = []
    for i, t in enumerate(times, 1):
        user = rng.choices(range(users), activity)[0]
        rt = int(rng.lognormvariate(math.log(medians[user]), 0.6))
        jobs.append(RawJob(i, t, min(max(rt, min_runtime), max_runtime), -1, user + 1))
    return jobs


def load_workload(path: Union[str, Path], rng: random.Random, config: Optional[AugmentConfig] = None,
                  count: Optional[int] = None, duration: Optional[int] = None) -> list[Job]:
    raw = parse_swf(path)
    if count is not None or duration is not None:
        n = len(raw) if count is None else count
        span = duration if duration is not None else (raw[n - 1].submit_time - raw[0].submit_time if n else 0)
        raw = scale_workload(raw, n, span)
    if raw:
        t0 = raw[0].submit_time
        raw = [dataclasses.replace(r, submit_time=r.submit_time - t0) for r in raw]
    return augment(raw, rng, config)


def swf_text(jobs: Iterable[RawJob]) -> str:
    buf = io.StringIO()
    write_swf(jobs, buf)
    return buf.getvalue()
