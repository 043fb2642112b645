import pytest

from spotsim.broker import BrokerConfig
from spotsim.estimation import USER
from spotsim.market import InstanceType, PriceTrace, to_micros
from spotsim.simulation import Simulation
from spotsim.speedup import ParallelismProfile
from spotsim.workload import Job


def usd(s):
    return to_micros(s)


S1 = InstanceType("s1", 1, usd("0.10"))
C5 = InstanceType("c5", 5, usd("0.20"))
X20 = InstanceType("x20", 20, usd("0.80"))


def mkjob(id, base=600, estimate=None, deadline=None, submit=0, A=1.0, sigma=0.0, user=1):
    estimate = estimate or base
    deadline = deadline if deadline is not None else submit + 10**6
    return Job(id, user, submit, base, estimate, deadline, ParallelismProfile(A, sigma))


def rig(prices=None, catalog=(S1, C5, X20), jobs=(), **config):
    """A simulation with the given constant (or explicit) traces and no jobs by default."""
    prices = prices or {}
    traces = {}
    for it in catalog:
        p = prices.get(it.name, it.ondemand_price // 3)
        traces[it.name] = PriceTrace(p if isinstance(p, list) else [(0, p)])
    config.setdefault("estimation_method", USER)
    return Simulation(list(jobs), catalog, traces, BrokerConfig(**config))


@pytest.fixture
def make_rig():
    return rig


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
