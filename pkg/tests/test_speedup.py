import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import downey
from spotsim.market import InstanceType
from spotsim.speedup import (
    Distribution,
    ParallelismProfile,
    ProfileConfig,
    ProfileError,
    generate_profile,
    raw_speedup,
    runtime_on,
    speedup,
)

A_GRID = [2.0 ** k for k in range(7)]
SIGMA_GRID = [0.25 * k for k in range(9)]


def itype(ecus):
    return InstanceType(f"t{ecus}", ecus, 100_000)


@pytest.mark.parametrize(
    "A, sigma, n, expected",
    [
        (4, 0.5, 1, 1.0),
        (4, 0.0, 3, 3.0),
        (4, 0.5, 3, 12 / 4.5),
        (4, 2.0, 16, 4.0),
    ],
)
def test_examples(A, sigma, n, expected):
    assert speedup(ParallelismProfile(A, sigma), n) == pytest.approx(expected, abs=1e-12)
    assert downey(A, sigma, n) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize(
    "base, A, sigma, ecus, expected",
    [
        (3600, 4, 0, 5, 900),
        (3600, 3.7, 1.3, 1, 3600),
        (100, 1, 0, 20, 100),
    ],
)
def test_runtime_on_examples(base, A, sigma, ecus, expected):
    assert runtime_on(base, ParallelismProfile(A, sigma), itype(ecus)) == expected


def test_invalid_inputs():
    with pytest.raises(ProfileError):
        speedup(ParallelismProfile(4, 1), 0)
    with pytest.raises(ProfileError):
        ParallelismProfile(0.5, 0)
    with pytest.raises(ProfileError):
        ParallelismProfile(2, -0.1)
    with pytest.raises(ProfileError):
        runtime_on(0, ParallelismProfile(2, 0), itype(1))


@pytest.mark.parametrize("A", A_GRID)
@pytest.mark.parametrize("sigma", SIGMA_GRID)
def test_grid_properties(A, sigma):
    p = ParallelismProfile(A, sigma)
    sat = max(2 * A - 1, A + A * sigma - sigma)
    prev = 0.0
    for n in range(1, 65):
        s = speedup(p, n)
        assert 1.0 <= s <= min(n, A) + 1e-12
        assert s >= prev - 1e-12
        if n >= sat:
            assert s == pytest.approx(A, abs=1e-9)
        assert s == pytest.approx(min(max(downey(A, sigma, n), 1.0), n, A), abs=1e-12)
        prev = s
    assert speedup(p, 1) == 1.0


@pytest.mark.parametrize("A", A_GRID)
@pytest.mark.parametrize("sigma", SIGMA_GRID)
def test_branch_joins_are_continuous(A, sigma):
    if sigma <= 1:
        joins = [A, 2 * A - 1]
    else:
        joins = [A + A * sigma - sigma]
    for x in joins:
        left = raw_speedup(A, sigma, x - 1e-10)
        right = raw_speedup(A, sigma, x + 1e-10)
        assert left == pytest.approx(right, abs=1e-9)


def test_variance_regimes_agree_at_sigma_one():
    for A in A_GRID:
        for n in range(1, 65):
            low = A * n / (A + (n - 1) / 2) if n <= A else None
            if low is not None:
                high = n * A * 2 / ((n + A - 1) + A)
                assert low == pytest.approx(high, abs=1e-12)


@given(st.floats(1, 64), st.floats(0, 2), st.integers(1, 200), st.integers(1, 10**6))
def test_runtime_non_increasing_in_ecus(A, sigma, n, base):
    p = ParallelismProfile(A, sigma)
    assert runtime_on(base, p, itype(n + 1)) <= runtime_on(base, p, itype(n))


class TestDistributions:
    def test_forms(self):
        rng = random.Random(0)
        assert Distribution("fixed:2.5").sample(rng) == 2.5
        assert 1 <= Distribution("uniform:1,3").sample(rng) <= 3
        assert 2 <= Distribution("pow2uniform:1,5").sample(rng) <= 32

    @pytest.mark.parametrize("bad", ["normal:0,1", "uniform:3,1", "fixed:", "uniform:1", "uniform:a,b"])
    def test_rejects(self, bad):
        with pytest.raises(ProfileError):
            Distribution(bad)

    def test_config_rejects_out_of_support(self):
        with pytest.raises(ProfileError):
            ProfileConfig.from_strings("uniform:0.5,2", "uniform:0,1")
        with pytest.raises(ProfileError):
            ProfileConfig.from_strings("fixed:1", "uniform:-1,1")


def test_degenerate_profile():
    cfg = ProfileConfig.from_strings("fixed:1", "fixed:0")
    rng = random.Random(9)
    assert {generate_profile(rng, cfg) for _ in range(20)} == {ParallelismProfile(1.0, 0.0)}


def test_default_profiles_respect_support():
    rng = random.Random(1)
    for _ in range(10_000):
        p = generate_profile(rng)
        assert p.A >= 1 and p.sigma >= 0
        assert p.A <= 32 and p.sigma <= 2


def test_profiles_replay_with_seed():
    r1, r2 = random.Random(11), random.Random(11)
    assert [generate_profile(r1) for _ in range(100)] == [generate_profile(r2) for _ in range(100)]
