"""Client-side provisioning and scheduling policy.

Each scheduling pass walks the unscheduled list in order and, per job, tries
(1) an idle instance that can host it inside already-paid time, (2) postponing
it while it still has slack, (3) the cheaper of extending an existing lease or
leasing a new instance.  Postponed jobs are matched against instances that
went idle since the previous pass.  A running job whose estimate elapses has
the estimate doubled and everything queued behind it is rescheduled.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, TextIO

from spotsim.estimation import (
    RECENT_AVERAGE,
    EstimationMethod,
    UserHistory,
    correct,
    observed_base,
    working_estimate,
)
from spotsim.kernel import EventKind, Kernel, SimEvent
from spotsim.market import HOUR, Initiator, InstanceState, InstanceType, Market, SpotInstance, fmt_money
from spotsim.speedup import runtime_on, speedup
from spotsim.workload import Job, JobState


class BrokerError(RuntimeError):
    pass


@dataclass(frozen=True)
class BidPolicy:
    """``ondemand`` bids the type's on-demand price; ``spot_multiplier:m`` bids
    ``m`` times the current spot price."""

    kind: str = "ondemand"
    multiplier: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("ondemand", "spot_multiplier"):
            raise ValueError(f"unknown bid policy {self.kind!r}")
        if self.multiplier <= 0:
            raise ValueError("bid multiplier must be positive")

    @classmethod
    def parse(cls, text: str) -> "BidPolicy":
        kind, _, arg = str(text).strip().partition(":")
        return cls(kind, float(arg)) if arg else cls(kind)

    def bid(self, itype: InstanceType, spot_price: int) -> int:
        if self.kind == "ondemand":
            return round(itype.ondemand_price * self.multiplier)
        return round(spot_price * self.multiplier)

    def __str__(self) -> str:
        if self.kind == "ondemand" and self.multiplier == 1.0:
            return "ondemand"
        return f"{self.kind}:{self.multiplier:g}"


@dataclass
class BrokerConfig:
    tick_interval: int = 10
    estimation_method: EstimationMethod = RECENT_AVERAGE
    bid_policy: BidPolicy = field(default_factory=BidPolicy)
    safety_margin: Optional[int] = None  # defaults to one tick
    correction_enabled: bool = True

    def __post_init__(self) -> None:
        if self.tick_interval <= 0:
            raise ValueError("tick_interval must be positive")
        if self.safety_margin is None:
            self.safety_margin = self.tick_interval
        if self.safety_margin < 0:
            raise ValueError("safety_margin must be >= 0")


class DecisionKind(Enum):
    FREE_SPACE = "free_space"
    EXTENSION = "extension"
    NEW_LEASE = "new_lease"
    POSTPONED = "postponed"


@dataclass
class AllocationDecision:
    allocated: bool
    kind: Optional[DecisionKind] = None
    vm: Optional[SpotInstance] = None
    itype: Optional[InstanceType] = None
    cost: int = 0
    finish: Optional[int] = None
    feasible: bool = True
    job: Optional[Job] = None


class Broker:
    def __init__(
        self,
        kernel: Kernel,
        market: Market,
        config: Optional[BrokerConfig] = None,
        rng: Optional[random.Random] = None,
        decision_log: Optional[TextIO] = None,
    ) -> None:
        self.kernel = kernel
        self.market = market
        self.config = config or BrokerConfig()
        self.rng = rng or random.Random(0)
        self.decision_log = decision_log
        self.types = market.catalog
        self.LJ: list[Job] = []
        self.LNU: list[Job] = []
        self.history = UserHistory()
        self.jobs: dict[int, Job] = {}
        self._fresh_idle: list[SpotInstance] = []
        self._tick_event: Optional[SimEvent] = None
        self._last_tick = -1
        # counters
        self.completed = 0
        self.misses = 0
        self.corrections = 0
        self.failures = 0
        self.expected_misses = 0
        self.decisions: dict[DecisionKind, int] = {k: 0 for k in DecisionKind}

    # ---- estimates ---------------------------------------------------------

    def _belief(self, job: Job) -> int:
        return working_estimate(self.config.estimation_method, job, self.history, self.rng)

    def estimates(self, job: Job) -> dict[str, int]:
        base = self._belief(job)
        return {it.name: runtime_on(base, job.profile, it) for it in self.types}

    def _est_on(self, job: Job, itype: InstanceType) -> int:
        return runtime_on(self._belief(job), job.profile, itype)

    def projected_free(self, inst: SpotInstance, t: int) -> int:
        """When the broker expects ``inst`` to finish everything assigned to it."""
        free = max(t, inst.ready_time)
        job = inst.running_job
        if job is not None:
            free = max(free, job.start_time + self._est_on(job, inst.type))
        for q in inst.queue:
            free += self._est_on(q, inst.type)
        return free

    # ---- admission ---------------------------------------------------------

    def submit(self, job: Job, t: int) -> bool:
        if job.id in self.jobs:
            raise BrokerError(f"duplicate job id {job.id}")
        self.jobs[job.id] = job
        job.state = JobState.PENDING
        self.LJ.append(job)
        self.request_tick(t)
        return True

    def request_tick(self, t: int) -> None:
        if self._tick_event is not None and self._tick_event.pending:
            return
        step = self.config.tick_interval
        when = -(-t // step) * step
        if when <= self._last_tick:
            when = self._last_tick + step
        self._tick_event = self.kernel.schedule(when, EventKind.SCHEDULE_TICK)

    # ---- decision primitives ----------------------------------------------

    def find_free_space(self, job: Job, t: int, erts: Optional[dict[str, int]] = None,
                        idle_only: bool = False, pool: Optional[list[SpotInstance]] = None) -> AllocationDecision:
        erts = erts or self.estimates(job)
        best = None
        for inst in (pool if pool is not None else self.market.live_instances()):
            if inst.state is InstanceState.FLAGGED_IDLE:
                start = max(t, inst.ready_time)
                boundary = inst.termination_event.fire_time
            elif (not idle_only and inst.state is InstanceState.RUNNING and not inst.queue
                  and inst.running_job is not None):
                start = self.projected_free(inst, t)
                if start > t + self.config.tick_interval:
                    continue
                boundary = inst.paid_until(start)
            else:
                continue
            finish = start + erts[inst.type.name]
            if finish > boundary or finish > job.deadline:
                continue
            key = (boundary - start, int(inst.id[1:]))
            if best is None or key < best[0]:
                best = (key, inst, finish)
        if best is None:
            return AllocationDecision(False)
        return AllocationDecision(True, DecisionKind.FREE_SPACE, vm=best[1], itype=best[1].type,
                                  cost=0, finish=best[2], job=job)

    def max_wait_time(self, job: Job, t: int, erts: Optional[dict[str, int]] = None) -> int:
        erts = erts or self.estimates(job)
        slack = job.deadline - t - min(erts.values()) - self.market.boot_delay - self.config.safety_margin
        return max(0, slack)

    def can_postpone(self, job: Job, mwt: int) -> bool:
        return mwt >= self.config.tick_interval and not job.postponed

    def compute_lease_extension(self, job: Job, t: int, erts: Optional[dict[str, int]] = None) -> AllocationDecision:
        erts = erts or self.estimates(job)
        best = None
        for inst in self.market.live_instances():
            free = self.projected_free(inst, t)
            finish = free + erts[inst.type.name]
            if finish > job.deadline:
                continue
            extra = inst.hours_committed(finish) - inst.hours_committed(free)
            cost = extra * self.market.current_price(inst.type, t)
            key = (cost, finish, int(inst.id[1:]))
            if best is None or key < best[0]:
                best = (key, inst)
        if best is None:
            return AllocationDecision(False)
        (cost, finish, _), inst = best
        return AllocationDecision(True, DecisionKind.EXTENSION, vm=inst, itype=inst.type,
                                  cost=cost, finish=finish, job=job)

    def compute_cost_new(self, job: Job, t: int, erts: Optional[dict[str, int]] = None) -> AllocationDecision:
        erts = erts or self.estimates(job)
        boot = self.market.boot_delay
        feasible, fallback = [], []
        for idx, it in enumerate(self.types):
            spot = self.market.current_price(it, t)
            if self.config.bid_policy.bid(it, spot) <= spot:
                continue
            est = erts[it.name]
            cost = math.ceil(est / HOUR) * spot
            if boot + est <= job.deadline - t:
                feasible.append(((cost, est, idx), it))
            else:
                fallback.append(((boot + est, cost, idx), it))
        if feasible:
            (cost, est, _), it = min(feasible, key=lambda x: x[0])
            return AllocationDecision(True, DecisionKind.NEW_LEASE, itype=it, cost=cost,
                                      finish=t + boot + est, job=job)
        if fallback:
            (finish_rel, cost, _), it = min(fallback, key=lambda x: x[0])
            return AllocationDecision(True, DecisionKind.NEW_LEASE, itype=it, cost=cost,
                                      finish=t + finish_rel, feasible=False, job=job)
        return AllocationDecision(False)

    # ---- scheduling pass ---------------------------------------------------

    def schedule_tick(self, t: int) -> list[AllocationDecision]:
        self._last_tick = t
        decisions = []
        unplaced = []
        for job in self.LJ:
            d = self._place(job, t)
            if d.allocated:
                decisions.append(d)
            else:
                unplaced.append(job)
        self.LJ = unplaced

        if self.LNU and self._fresh_idle:
            idle = [i for i in self._fresh_idle if i.state is InstanceState.FLAGGED_IDLE]
            for job in sorted(self.LNU, key=lambda j: (j.deadline, j.id)):
                if not idle:
                    break
                d = self.find_free_space(job, t, idle_only=True, pool=idle)
                if d.allocated:
                    self.LNU.remove(job)
                    self.kernel.cancel(job.expiry_event)
                    self._commit(d, t)
                    decisions.append(d)
                    idle.remove(d.vm)
        self._fresh_idle = []

        if self.LJ:
            self.request_tick(t + 1)
        return decisions

    def _place(self, job: Job, t: int) -> AllocationDecision:
        erts = self.estimates(job)
        d = self.find_free_space(job, t, erts)
        if d.allocated:
            self._commit(d, t)
            return d
        mwt = self.max_wait_time(job, t, erts)
        if self.can_postpone(job, mwt):
            job.postponed = True
            job.state = JobState.POSTPONED
            self.LNU.append(job)
            job.expiry_event = self.kernel.schedule(t + mwt, EventKind.POSTPONE_EXPIRY, job)
            d = AllocationDecision(True, DecisionKind.POSTPONED, job=job)
            self._log(t, d)
            self.decisions[DecisionKind.POSTPONED] += 1
            return d
        ext = self.compute_lease_extension(job, t, erts)
        new = self.compute_cost_new(job, t, erts)
        if ext.allocated and (not new.allocated or not new.feasible or ext.cost <= new.cost):
            d = ext
        elif new.allocated:
            d = new
        else:
            return d  # nothing grantable right now; retry next pass
        if not d.feasible:
            self.expected_misses += 1
        if not self._commit(d, t):
            return AllocationDecision(False)
        return d

    def _commit(self, d: AllocationDecision, t: int) -> bool:
        job = d.job
        if d.kind is DecisionKind.NEW_LEASE:
            spot = self.market.current_price(d.itype, t)
            inst = self.market.request_instance(d.itype, self.config.bid_policy.bid(d.itype, spot), t)
            if inst is None:
                return False
            self.kernel.schedule(inst.ready_time, EventKind.INSTANCE_READY, inst)
            d.vm = inst
        self.decisions[d.kind] += 1
        self._log(t, d)
        self._assign(job, d.vm, t)
        return True

    def _log(self, t: int, d: AllocationDecision) -> None:
        if self.decision_log is None:
            return
        vm = d.vm.id if d.vm is not None else ""
        itype = d.itype.name if d.itype is not None else ""
        self.decision_log.write(f"{t},{d.job.id},{d.kind.value},{vm},{itype},{fmt_money(d.cost)}\n")

    def _assign(self, job: Job, inst: SpotInstance, t: int) -> None:
        job.state = JobState.QUEUED
        job.assigned_instance = inst
        inst.queue.append(job)
        if inst.state is InstanceState.FLAGGED_IDLE:
            self.kernel.cancel(inst.termination_event)
            inst.termination_event = None
            inst.state = InstanceState.RUNNING
        self._start_next(inst, t)

    def _start_next(self, inst: SpotInstance, t: int) -> None:
        if inst.state is not InstanceState.RUNNING or inst.running_job is not None or not inst.queue:
            return
        job = inst.queue.pop(0)
        job.state = JobState.RUNNING
        job.start_time = t
        inst.running_job = job
        actual = runtime_on(job.base_runtime, job.profile, inst.type)
        job.completion_event = self.kernel.schedule(t + actual, EventKind.JOB_COMPLETION, job)
        if self.config.correction_enabled:
            est = self._est_on(job, inst.type)
            job.correction_event = self.kernel.schedule(t + est, EventKind.CORRECTION, job)

    # ---- event handlers ----------------------------------------------------

    def on_instance_ready(self, inst: SpotInstance, t: int) -> None:
        if inst.state is not InstanceState.BOOTING:
            return
        inst.state = InstanceState.RUNNING
        self._start_next(inst, t)
        if inst.running_job is None:
            self._flag_idle(inst, t)

    def on_postpone_expiry(self, job: Job, t: int) -> None:
        if job.state is not JobState.POSTPONED:
            return
        self.LNU.remove(job)
        job.state = JobState.PENDING
        self.LJ.append(job)
        self.request_tick(t)

    def on_correction_event(self, job: Job, t: int) -> list[Job]:
        if job.state is not JobState.RUNNING:
            return []
        job.current_estimate = correct(job.current_estimate)
        self.corrections += 1
        job.corrections += 1
        inst = job.assigned_instance
        check = max(t + 1, job.start_time + self._est_on(job, inst.type))
        job.correction_event = self.kernel.schedule(check, EventKind.CORRECTION, job)
        moved, inst.queue = inst.queue, []
        for q in moved:
            q.state = JobState.PENDING
            q.assigned_instance = None
            self.LJ.append(q)
        if moved:
            self.request_tick(t)
        return moved

    def on_job_completion(self, job: Job, t: int) -> None:
        inst = job.assigned_instance
        self.kernel.cancel(job.correction_event)
        job.correction_event = job.completion_event = None
        job.state = JobState.COMPLETED
        job.completion_time = t
        job.ran_on = inst.type.name
        self.completed += 1
        if t > job.deadline:
            self.misses += 1
        elapsed = t - job.start_time
        self.history.record_completion(job.user_id, observed_base(elapsed, speedup(job.profile, inst.type.ecus)))
        inst.busy_seconds += elapsed
        inst.jobs_run += 1
        inst.running_job = None
        self._start_next(inst, t)
        if inst.running_job is None:
            self._flag_idle(inst, t)

    def _flag_idle(self, inst: SpotInstance, t: int) -> None:
        inst.state = InstanceState.FLAGGED_IDLE
        boundary = inst.paid_until(t)
        inst.termination_event = self.kernel.schedule(boundary, EventKind.HOUR_BOUNDARY, inst)
        self._fresh_idle.append(inst)
        if self.LNU:
            self.request_tick(t)

    def on_hour_boundary(self, inst: SpotInstance, t: int) -> None:
        if inst.state is InstanceState.FLAGGED_IDLE:
            inst.termination_event = None
            self.market.terminate(inst, t, Initiator.CLIENT)

    def on_instance_failure(self, inst: SpotInstance, t: int) -> list[Job]:
        """Return the jobs of a provider-terminated instance to the unscheduled list."""
        self.kernel.cancel(inst.termination_event)
        inst.termination_event = None
        lost = []
        job = inst.running_job
        if job is not None:
            inst.busy_seconds += t - job.start_time
            self.kernel.cancel(job.completion_event)
            self.kernel.cancel(job.correction_event)
            job.completion_event = job.correction_event = None
            job.start_time = None
            job.restarts += 1
            lost.append(job)
        lost.extend(inst.queue)
        inst.running_job, inst.queue = None, []
        for j in lost:
            j.state = JobState.PENDING
            j.assigned_instance = None
            self.LJ.append(j)
        self.failures += 1
        if lost:
            self.request_tick(t)
        return lost

    # ---- bookkeeping -------------------------------------------------------

    def state_counts(self) -> dict[JobState, int]:
        counts = {s: 0 for s in JobState}
        for j in self.jobs.values():
            counts[j.state] += 1
        return counts
