import io

import pytest

from conftest import C5, S1, X20, mkjob, rig, usd
from oracles import cheapest_new_lease
from spotsim.broker import BidPolicy, BrokerError, DecisionKind
from spotsim.estimation import ACTUAL
from spotsim.kernel import EventKind
from spotsim.market import InstanceState, InstanceType
from spotsim.workload import JobState


def idle_instance(sim, itype, t_lease=0):
    """Lease an instance and let it go idle immediately (termination at its first boundary)."""
    inst = sim.market.request_instance(itype, itype.ondemand_price, t_lease)
    sim.broker.on_instance_ready(inst, t_lease)
    return inst


def advance(sim, t):
    sim.kernel.run_until(t)
    sim.kernel.now = t


class TestSubmission:
    def test_tick_batching(self):
        sim = rig()
        sim.decisions = io.StringIO()
        j = mkjob(1, submit=5, deadline=5 + 615)  # no slack left at the tick
        sim.kernel.schedule(5, EventKind.JOB_SUBMISSION, j)
        sim.kernel.run_until(9)
        assert sim.broker.LJ == [j]
        sim.kernel.run_until(10)
        assert sim.broker.LJ == [] and j.state is JobState.RUNNING
        assert j.start_time == 10

    def test_submission_order_kept(self):
        sim = rig()
        a, b = mkjob(1), mkjob(2)
        sim.broker.submit(a, 1)
        sim.broker.submit(b, 3)
        assert sim.broker.LJ == [a, b]

    def test_duplicate_id(self):
        sim = rig()
        sim.broker.submit(mkjob(1), 0)
        with pytest.raises(BrokerError):
            sim.broker.submit(mkjob(1), 0)


class TestTick:
    def test_empty_tick(self):
        sim = rig()
        assert sim.broker.schedule_tick(0) == []
        assert sim.market.instances == []

    def test_new_lease_on_cheapest_feasible_type(self):
        prices = {"s1": usd("0.03"), "c5": usd("0.07"), "x20": usd("0.25")}
        sim = rig(prices)
        j = mkjob(1, base=7200, A=8, sigma=0.5, deadline=4000)
        j.postponed = True
        sim.broker.submit(j, 0)
        (d,) = sim.broker.schedule_tick(0)
        erts = sim.broker.estimates(j)
        expected = cheapest_new_lease(erts, prices, j.deadline)
        assert d.kind is DecisionKind.NEW_LEASE
        assert d.itype.name == expected == "c5"

    def test_postpones_when_slack(self):
        sim = rig()
        j = mkjob(1, base=600, deadline=5000)
        sim.broker.submit(j, 0)
        (d,) = sim.broker.schedule_tick(0)
        assert d.kind is DecisionKind.POSTPONED and sim.broker.LNU == [j]
        assert j.expiry_event.fire_time == 5000 - 600 - 10

    def test_postponed_job_returns_once_and_is_then_placed(self):
        sim = rig()
        j = mkjob(1, base=600, deadline=5000)
        sim.kernel.schedule(0, EventKind.JOB_SUBMISSION, j)
        sim.kernel.run_until(4389)
        assert j.state is JobState.POSTPONED and j.postponed
        sim.kernel.run_until(4390)
        assert j.state is JobState.RUNNING
        sim.kernel.run()
        assert j.completion_time <= j.deadline

    def test_free_space_costs_nothing(self):
        sim = rig()
        idle_instance(sim, C5)
        advance(sim, 1800)
        j = mkjob(1, base=3600, A=4, sigma=0)  # 900 s on 5 ECUs
        sim.broker.submit(j, 1800)
        (d,) = sim.broker.schedule_tick(1800)
        assert d.kind is DecisionKind.FREE_SPACE and d.cost == 0


class TestFindFreeSpace:
    def test_fits(self):
        sim = rig()
        inst = idle_instance(sim, C5)
        advance(sim, 1800)
        j = mkjob(1, base=3600, A=4)
        d = sim.broker.find_free_space(j, 1800)
        assert d.allocated and d.vm is inst and d.cost == 0

    def test_does_not_fit(self):
        sim = rig()
        idle_instance(sim, C5)
        advance(sim, 1800)
        j = mkjob(1, base=2000 * 4, A=4)
        assert sim.broker.find_free_space(j, 1800).allocated is False

    def test_deadline_respected(self):
        sim = rig()
        idle_instance(sim, C5)
        advance(sim, 1800)
        j = mkjob(1, base=3600, A=4, deadline=2600)
        assert sim.broker.find_free_space(j, 1800).allocated is False

    def test_best_fit(self):
        sim = rig()
        roomy = idle_instance(sim, C5, 0)  # boundary 3600
        advance(sim, 1000)
        tight = idle_instance(sim, C5, 1000)  # boundary 4600
        advance(sim, 2600)
        j = mkjob(1, base=3600, A=4)  # 900 s
        d = sim.broker.find_free_space(j, 2600)
        assert roomy.termination_event.fire_time - 2600 == 1000
        assert tight.termination_event.fire_time - 2600 == 2000
        assert d.vm is roomy

    def test_reuse_cancels_client_termination(self):
        sim = rig()
        inst = idle_instance(sim, C5)
        ev = inst.termination_event
        advance(sim, 1800)
        j = mkjob(1, base=3600, A=4)
        sim.broker.submit(j, 1800)
        sim.broker.schedule_tick(1800)
        assert ev.cancelled and inst.state is InstanceState.RUNNING
        assert inst.running_job is j


class TestMaxWait:
    def test_formula(self):
        sim = rig()
        j = mkjob(1, deadline=4000)
        assert sim.broker.max_wait_time(j, 0, {"s1": 3600, "c5": 900, "x20": 950}) == 3090

    def test_floor(self):
        sim = rig()
        j = mkjob(1, deadline=4000)
        assert sim.broker.max_wait_time(j, 0, {"s1": 4000}) == 0

    def test_exact_boundary(self):
        sim = rig(safety_margin=0)
        j = mkjob(1, deadline=900)
        assert sim.broker.max_wait_time(j, 0, {"s1": 900}) == 0

    @pytest.mark.parametrize("mwt, postponed, expected", [(3090, False, True), (5, False, False), (5000, True, False)])
    def test_can_postpone(self, mwt, postponed, expected):
        sim = rig()
        j = mkjob(1)
        j.postponed = postponed
        assert sim.broker.can_postpone(j, mwt) is expected


def busy_instance(sim, itype, lease_at, start, est_seconds, now):
    """An instance whose running job is believed to end at ``start + est_seconds``."""
    inst = sim.market.request_instance(itype, itype.ondemand_price, lease_at)
    inst.state = InstanceState.RUNNING
    runner = mkjob(999, base=10**5, estimate=est_seconds)
    runner.current_estimate = est_seconds
    runner.start_time = start
    runner.state = JobState.RUNNING
    inst.running_job = runner
    advance(sim, now)
    return inst


class TestLeaseExtension:
    def test_fits_in_paid_hours(self):
        sim = rig()
        inst = busy_instance(sim, S1, 0, 3700, 1700, 3700)  # paid through 7200, free at 5400
        j = mkjob(1, base=1440, deadline=10**5)
        d = sim.broker.compute_lease_extension(j, 3700)
        assert d.allocated and d.vm is inst and d.cost == 0 and d.finish == 6840

    def test_one_extra_hour(self):
        sim = rig()
        busy_instance(sim, S1, 0, 3700, 1700, 3700)
        j = mkjob(1, base=3600, deadline=10**5)
        d = sim.broker.compute_lease_extension(j, 3700)
        assert d.finish == 9000 and d.cost == 1 * sim.market.current_price(S1, 3700)

    def test_infeasible(self):
        sim = rig()
        busy_instance(sim, S1, 0, 3700, 1700, 3700)
        j = mkjob(1, base=3600, deadline=8000)
        assert sim.broker.compute_lease_extension(j, 3700).allocated is False

    def test_extension_wins_ties(self):
        sim = rig({"s1": usd("0.03")}, catalog=(S1,))
        inst = busy_instance(sim, S1, 0, 0, 3000, 100)
        j = mkjob(1, base=3000, deadline=6500)  # finish 6000 needs one more hour, same as a new lease
        j.postponed = True
        sim.broker.submit(j, 100)
        (d,) = sim.broker.schedule_tick(100)
        assert d.kind is DecisionKind.EXTENSION and d.vm is inst
        assert d.cost == sim.broker.compute_cost_new(j, 100).cost


class TestCostNew:
    CAT = (InstanceType("c5", 5, usd("0.17")), InstanceType("x20", 20, usd("0.68")))

    def test_cheapest_per_hour(self):
        sim = rig({"c5": usd("0.06"), "x20": usd("0.30")}, catalog=self.CAT)
        j = mkjob(1, deadline=10**5)
        d = sim.broker.compute_cost_new(j, 0, {"c5": 900, "x20": 450})
        assert d.itype.name == "c5" and d.cost == usd("0.06")
        assert cheapest_new_lease({"c5": 900, "x20": 450}, {"c5": usd("0.06"), "x20": usd("0.30")}, 10**5) == "c5"

    def test_tie_goes_to_shorter(self):
        sim = rig({"c5": usd("0.06"), "x20": usd("0.06")}, catalog=self.CAT)
        d = sim.broker.compute_cost_new(mkjob(1), 0, {"c5": 900, "x20": 450})
        assert d.itype.name == "x20"

    def test_sequential_job_uses_small_type(self):
        sim = rig({"s1": usd("0.03"), "c5": usd("0.06"), "x20": usd("0.25")})
        j = mkjob(1, base=1800, A=1)
        assert sim.broker.compute_cost_new(j, 0).itype is S1

    def test_infeasible_falls_back_to_fastest(self):
        sim = rig()
        j = mkjob(1, base=20_000, A=20, deadline=100)
        d = sim.broker.compute_cost_new(j, 0)
        assert d.allocated and not d.feasible and d.itype is X20

    def test_ungrantable_types_skipped(self):
        sim = rig({"s1": usd("0.10")}, bid_policy=BidPolicy("ondemand"))  # price == on-demand bid
        j = mkjob(1, base=600, A=1)
        d = sim.broker.compute_cost_new(j, 0)
        assert d.itype is not S1


class TestCorrection:
    def setup(self, queue=2, correction=True):
        sim = rig(correction_enabled=correction)
        j1 = mkjob(1, base=2000, estimate=600, deadline=10**5)
        others = [mkjob(2 + i, base=100, deadline=10**5) for i in range(queue)]
        inst = sim.market.request_instance(S1, S1.ondemand_price, 0)
        sim.kernel.schedule(0, EventKind.INSTANCE_READY, inst)
        for j in (j1, *others):
            j.current_estimate = j.user_estimate
            sim.broker._assign(j, inst, 0)
        sim.kernel.run_until(0)
        return sim, inst, j1, others

    def test_doubles_and_rechecks(self):
        sim, inst, j1, others = self.setup()
        sim.kernel.run_until(599)
        assert j1.current_estimate == 600
        sim.kernel.run_until(600)
        assert j1.current_estimate == 1200 and j1.corrections == 1
        assert j1.correction_event.fire_time == 1200
        assert j1.state is JobState.RUNNING and inst.running_job is j1

    def test_queue_returned_in_order(self):
        sim, inst, j1, others = self.setup()
        sim.kernel.run_until(600)
        assert all(j.state is not JobState.QUEUED or j.assigned_instance is not inst for j in others)
        assert inst.queue == [] or inst.queue[0] not in others

    def test_returned_jobs_reenter_lj_in_order(self):
        sim, inst, j1, others = self.setup()
        moved = sim.broker.on_correction_event(j1, 600)
        assert moved == others
        assert sim.broker.LJ[-2:] == others
        assert all(j.state is JobState.PENDING for j in others)

    def test_completed_job_is_noop(self):
        sim, inst, j1, others = self.setup(queue=0)
        sim.kernel.run()
        assert sim.broker.on_correction_event(j1, sim.kernel.now) == []
        assert j1.corrections == 2  # 600 -> 1200 -> 2400 covers the 2000 s runtime

    def test_disabled(self):
        sim, inst, j1, others = self.setup(correction=False)
        sim.kernel.run()
        assert sim.broker.corrections == 0
        assert j1.current_estimate == 600


class TestCompletion:
    def run_one(self, base, deadline):
        j = mkjob(1, base=base, deadline=deadline)
        sim = rig(jobs=[j])
        sim.run()
        return sim, sim.jobs[0]

    def test_on_time(self):
        sim, j = self.run_one(600, 600)
        assert j.completion_time == 600 and not j.missed and sim.broker.misses == 0

    def test_one_second_late_is_a_miss(self):
        sim, j = self.run_one(600, 599)
        assert j.completion_time == 600 and j.missed and sim.broker.misses == 1

    def test_idle_instance_terminated_at_next_boundary(self):
        sim, j = self.run_one(600, 600)
        (inst,) = sim.market.instances
        assert inst.state is InstanceState.TERMINATED
        assert inst.terminated_at == 3600
        assert inst.final_charge == sim.market.current_price(inst.type, 0)

    def test_history_recorded(self):
        sim, j = self.run_one(600, 600)
        assert sim.broker.history.recent(1, 2) == [600]


class TestFailure:
    def test_running_job_restarts_from_scratch(self):
        # price spikes above the on-demand bid at t=1000
        trace = [(0, usd("0.03")), (1000, usd("0.50"))]
        j = mkjob(1, base=2000, A=1, deadline=2005)
        sim = rig({"s1": trace, "c5": usd("0.06"), "x20": usd("0.25")}, jobs=[j])
        res = sim.run()
        job = res.jobs[0]
        assert res.broker.failures == 1
        assert job.restarts == 1 and job.state is JobState.COMPLETED
        first, second = res.market.instances
        assert first.initiator.value == "provider" and first.final_charge == 0
        assert job.completion_time >= 1000 + 2000

    def test_idle_instance_failure_loses_nothing(self):
        sim = rig()
        inst = idle_instance(sim, S1)
        lost = sim.broker.on_instance_failure(inst, 100)
        assert lost == [] and inst.termination_event is None

    def test_no_failures_when_bid_beats_trace(self):
        trace = [(0, usd("0.02")), (600, usd("0.09")), (1200, usd("0.05"))]
        jobs = [mkjob(i, base=900, submit=i * 100) for i in range(1, 20)]
        sim = rig({"s1": trace}, jobs=jobs)
        assert max(p for _, p in trace) < S1.ondemand_price
        assert sim.run().broker.failures == 0


def test_actual_runtime_needs_no_corrections():
    jobs = [mkjob(i, base=300 + 37 * i, estimate=900 + 37 * i, submit=i * 50, A=1 + i % 7, sigma=(i % 5) / 2)
            for i in range(1, 60)]
    for j in jobs:
        j.deadline = j.submit_time + int(1.5 * j.user_estimate)
    sim = rig(jobs=jobs, estimation_method=ACTUAL)
    res = sim.run()
    assert res.broker.corrections == 0
    assert all(not j.missed for j in res.jobs)


def test_job_conservation_at_every_event():
    jobs = [mkjob(i, base=200 + (i * 397) % 4000, estimate=150 + (i * 211) % 3000, submit=i * 30,
                  A=1 + i % 9, sigma=(i % 4) / 2, user=i % 3) for i in range(1, 80)]
    sim = rig(jobs=jobs)
    total = len(jobs)
    busy = {}
    while not sim.done():
        sim.kernel.step()
        b = sim.broker
        assert sum(b.state_counts().values()) == len(b.jobs)
        running = [j for j in b.jobs.values() if j.state is JobState.RUNNING]
        for inst in sim.market.live_instances():
            assert inst.running_job is None or inst.running_job.assigned_instance is inst
        assert len({id(j.assigned_instance) for j in running}) == len(running)
        busy.update({j.id: j for j in running})
    assert sim.broker.completed == total
