"""One simulation run: wires kernel, market and broker together."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO

from spotsim.broker import Broker, BrokerConfig
from spotsim.kernel import EventKind, Kernel, SimEvent
from spotsim.market import InstanceType, Market, PriceTrace
from spotsim.workload import Job


class SimulationError(RuntimeError):
    pass


@dataclass
class RunResult:
    jobs: list[Job]
    market: Market
    broker: Broker
    end_time: int
    events: int


class Simulation:
    """Replays a job list against price traces under the broker policy.

    The run ends once every job has completed and every instance has been
    released.  ``horizon`` bounds simulated time as a guard against a market
    that never again admits a bid.
    """

    def __init__(
        self,
        jobs: Iterable[Job],
        catalog: Iterable[InstanceType],
        traces: dict[str, PriceTrace],
        config: Optional[BrokerConfig] = None,
        seed: int = 0,
        boot_delay: int = 0,
        event_log: Optional[TextIO] = None,
        decision_log: Optional[TextIO] = None,
        horizon: Optional[int] = None,
    ) -> None:
        self.jobs = [j.fresh_copy() for j in jobs]
        self.kernel = Kernel(log=event_log)
        self.market = Market(catalog, traces, boot_delay=boot_delay)
        self.broker = Broker(self.kernel, self.market, config, random.Random(seed), decision_log)
        last_submit = max((j.submit_time for j in self.jobs), default=0)
        self.horizon = horizon if horizon is not None else last_submit + 90 * 86400

        k = self.kernel
        k.on(EventKind.JOB_SUBMISSION, lambda e: self.broker.submit(e.payload, e.fire_time))
        k.on(EventKind.SCHEDULE_TICK, lambda e: self.broker.schedule_tick(e.fire_time))
        k.on(EventKind.POSTPONE_EXPIRY, lambda e: self.broker.on_postpone_expiry(e.payload, e.fire_time))
        k.on(EventKind.CORRECTION, lambda e: self.broker.on_correction_event(e.payload, e.fire_time))
        k.on(EventKind.JOB_COMPLETION, lambda e: self.broker.on_job_completion(e.payload, e.fire_time))
        k.on(EventKind.INSTANCE_READY, lambda e: self.broker.on_instance_ready(e.payload, e.fire_time))
        k.on(EventKind.HOUR_BOUNDARY, lambda e: self.broker.on_hour_boundary(e.payload, e.fire_time))
        k.on(EventKind.PRICE_CHANGE, self._on_price_change)

        for job in self.jobs:
            k.schedule(job.submit_time, EventKind.JOB_SUBMISSION, job)
        for itype in self.market.catalog:
            self._schedule_next_change(itype, -1)

    def _schedule_next_change(self, itype: InstanceType, after: int) -> None:
        nxt = self.market.traces[itype.name].next_change(after)
        if nxt is not None and nxt >= self.kernel.now:
            self.kernel.schedule(nxt, EventKind.PRICE_CHANGE, itype.name)

    def _on_price_change(self, event: SimEvent) -> None:
        itype = self.market.types[event.payload]
        t = event.fire_time
        price = self.market.current_price(itype, t)
        for inst in self.market.on_price_change(itype, price, t):
            self.broker.on_instance_failure(inst, t)
        self._schedule_next_change(itype, t)

    def done(self) -> bool:
        return self.broker.completed == len(self.jobs) and not self.market.any_live()

    def run(self) -> RunResult:
        k = self.kernel
        while not self.done():
            nxt = k.peek_time()
            if nxt is None:
                raise SimulationError(
                    f"event queue drained with {len(self.jobs) - self.broker.completed} jobs unfinished"
                )
            if nxt > self.horizon:
                raise SimulationError(
                    f"horizon t={self.horizon} reached with "
                    f"{len(self.jobs) - self.broker.completed} jobs unfinished"
                )
            k.step()
        return RunResult(self.jobs, self.market, self.broker, k.now, k.dispatched)


def simulate(jobs, catalog, traces, config=None, seed=0, **kw) -> RunResult:
    return Simulation(jobs, catalog, traces, config, seed, **kw).run()
