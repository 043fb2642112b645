"""Cost baselines, utilization and per-run metric reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence, Union

from spotsim.market import HOUR, Initiator, InstanceType, SpotInstance, fmt_money
from spotsim.speedup import runtime_on
from spotsim.workload import Job, JobState

Money = Union[int, Fraction]


def hourly_cost(runtime: int, price: int) -> int:
    return math.ceil(runtime / HOUR) * price


def most_efficient_type(job: Job, catalog: Sequence[InstanceType]) -> InstanceType:
    """Cheapest type to run ``job`` on at on-demand prices.

    Ties go to the shorter runtime, then to fewer ECUs.
    """
    def key(it: InstanceType):
        rt = runtime_on(job.base_runtime, job.profile, it)
        return (hourly_cost(rt, it.ondemand_price), rt, it.ecus)

    return min(catalog, key=key)


@dataclass
class BaselineTable:
    """Per-type job counts and costs."""

    jobs: dict[str, int]
    cost: dict[str, Money]

    @property
    def total(self) -> Money:
        return sum(self.cost.values(), 0)

    @property
    def total_jobs(self) -> int:
        return sum(self.jobs.values())

    def share(self, name: str) -> float:
        n = self.total_jobs
        return self.jobs.get(name, 0) / n if n else 0.0


def worst_case_cost(jobs: Iterable[Job], catalog: Sequence[InstanceType]) -> BaselineTable:
    counts = {it.name: 0 for it in catalog}
    cost: dict[str, Money] = {it.name: 0 for it in catalog}
    for job in jobs:
        it = most_efficient_type(job, catalog)
        counts[it.name] += 1
        cost[it.name] += hourly_cost(runtime_on(job.base_runtime, job.profile, it), it.ondemand_price)
    return BaselineTable(counts, cost)


def best_case_cost(worst: BaselineTable, discount: Union[Fraction, float] = Fraction(1, 3)) -> BaselineTable:
    discount = Fraction(discount).limit_denominator(10**9) if isinstance(discount, float) else Fraction(discount)
    if not 0 < discount <= 1:
        raise ValueError(f"discount must lie in (0, 1], got {discount}")
    return BaselineTable(dict(worst.jobs), {k: Fraction(v) * discount for k, v in worst.cost.items()})


def utilization(instances: Iterable[SpotInstance]) -> float:
    busy = leased = 0
    for inst in instances:
        busy += inst.busy_seconds
        leased += inst.lease_seconds
    return busy / leased if leased else 1.0


def charged_seconds(inst: SpotInstance) -> int:
    full, rem = divmod(inst.lease_seconds, HOUR)
    return HOUR * (full + (1 if rem and inst.initiator is Initiator.CLIENT else 0))


def charged_utilization(instances: Iterable[SpotInstance]) -> float:
    busy = charged = 0
    for inst in instances:
        busy += inst.busy_seconds
        charged += charged_seconds(inst)
    return min(1.0, busy / charged) if charged else 1.0


@dataclass
class MetricsReport:
    total_cost: int
    jobs: int
    deadline_misses: int
    utilization: float
    utilization_charged: float
    instances_launched: int
    failures: int
    corrections: int
    per_type_job_share: dict[str, float] = field(default_factory=dict)
    per_type_cost: dict[str, int] = field(default_factory=dict)
    per_type_jobs: dict[str, int] = field(default_factory=dict)

    @property
    def miss_fraction(self) -> float:
        return self.deadline_misses / self.jobs if self.jobs else 0.0

    def summary(self) -> str:
        return (
            f"cost ${fmt_money(self.total_cost)}  misses {self.deadline_misses}/{self.jobs}  "
            f"utilization {self.utilization:.3f}  instances {self.instances_launched}  "
            f"failures {self.failures}"
        )


def assemble_report(result) -> MetricsReport:
    """Build a :class:`MetricsReport` from a finished :class:`~spotsim.simulation.RunResult`."""
    market, broker = result.market, result.broker
    names = [it.name for it in market.catalog]
    per_cost = {n: 0 for n in names}
    for inst in market.instances:
        per_cost[inst.type.name] += inst.final_charge or 0
    per_jobs = {n: 0 for n in names}
    misses = 0
    for job in result.jobs:
        if job.state is JobState.COMPLETED:
            per_jobs[job.ran_on] += 1
            misses += job.missed
    done = sum(per_jobs.values())
    share = {n: (per_jobs[n] / done if done else 0.0) for n in names}
    return MetricsReport(
        total_cost=sum(per_cost.values()),
        jobs=len(result.jobs),
        deadline_misses=misses,
        utilization=utilization(market.instances),
        utilization_charged=charged_utilization(market.instances),
        instances_launched=len(market.instances),
        failures=broker.failures,
        corrections=broker.corrections,
        per_type_job_share=share,
        per_type_cost=per_cost,
        per_type_jobs=per_jobs,
    )
