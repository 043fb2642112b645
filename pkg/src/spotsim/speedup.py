"""Downey's speedup model for moldable jobs and parallelism-profile generation."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Union

from spotsim.market import InstanceType


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ParallelismProfile:
    A: float  # average parallelism
    sigma: float  # coefficient-of-variance approximation

    def __post_init__(self) -> None:
        if not self.A >= 1:
            raise ProfileError(f"average parallelism must be >= 1, got {self.A}")
        if not self.sigma >= 0:
            raise ProfileError(f"sigma must be >= 0, got {self.sigma}")


SEQUENTIAL = ParallelismProfile(1.0, 0.0)


def raw_speedup(A: float, sigma: float, n: float) -> float:
    """Unclamped piecewise Downey value; ``n`` may be fractional."""
    if sigma <= 1:
        if n <= A:
            return A * n / (A + sigma * (n - 1) / 2)
        if n <= 2 * A - 1:
            return A * n / (sigma * (A - 0.5) + n * (1 - sigma / 2))
        return A
    if n <= A + A * sigma - sigma:
        return n * A * (sigma + 1) / (sigma * (n + A - 1) + A)
    return A


def speedup(profile: ParallelismProfile, n: int) -> float:
    if n < 1:
        raise ProfileError(f"processor count must be >= 1, got {n}")
    s = raw_speedup(profile.A, profile.sigma, n)
    return min(max(s, 1.0), float(n), profile.A)


def runtime_on(base_runtime: Union[int, float], profile: ParallelismProfile, itype: InstanceType) -> int:
    """Whole seconds a job of ``base_runtime`` (1-ECU reference) takes on ``itype``."""
    if base_runtime <= 0:
        raise ProfileError(f"base runtime must be positive, got {base_runtime}")
    # 1e-9 guards against 3600/4.0000000001 rounding up to 901
    return max(1, math.ceil(base_runtime / speedup(profile, itype.ecus) - 1e-9))


class Distribution:
    """A scalar distribution spec: ``fixed:v``, ``uniform:lo,hi`` or ``pow2uniform:lo,hi``.

    ``pow2uniform:lo,hi`` draws ``2**X`` with ``X ~ uniform(lo, hi)``.
    """

    FORMS = ("fixed", "uniform", "pow2uniform")

    def __init__(self, spec: str) -> None:
        self.spec = spec.strip()
        form, _, args = self.spec.partition(":")
        if form not in self.FORMS:
            raise ProfileError(f"unknown distribution form {form!r} in {spec!r}")
        try:
            values = [float(a) for a in args.split(",")] if args else []
        except ValueError as exc:
            raise ProfileError(f"bad distribution arguments in {spec!r}") from exc
        want = 1 if form == "fixed" else 2
        if len(values) != want:
            raise ProfileError(f"{form} takes {want} argument(s): {spec!r}")
        if want == 2 and values[0] > values[1]:
            raise ProfileError(f"lower bound exceeds upper bound in {spec!r}")
        self.form = form
        self.values = values

    def __repr__(self) -> str:
        return f"Distribution({self.spec!r})"

    def sample(self, rng: random.Random) -> float:
        if self.form == "fixed":
            return self.values[0]
        x = rng.uniform(*self.values)
        return 2.0 ** x if self.form == "pow2uniform" else x

    @property
    def support(self) -> tuple[float, float]:
        if self.form == "fixed":
            return self.values[0], self.values[0]
        lo, hi = self.values
        return (2.0 ** lo, 2.0 ** hi) if self.form == "pow2uniform" else (lo, hi)


@dataclass
class ProfileConfig:
    A_dist: Distribution
    sigma_dist: Distribution

    @classmethod
    def from_strings(cls, A_dist: str = "pow2uniform:0,5", sigma_dist: str = "uniform:0,2") -> "ProfileConfig":
        cfg = cls(Distribution(A_dist), Distribution(sigma_dist))
        if cfg.A_dist.support[0] < 1:
            raise ProfileError(f"A distribution {A_dist!r} can produce values below 1")
        if cfg.sigma_dist.support[0] < 0:
            raise ProfileError(f"sigma distribution {sigma_dist!r} can produce negative values")
        return cfg


DEFAULT_PROFILE_CONFIG = ProfileConfig.from_strings()


def generate_profile(rng: random.Random, config: ProfileConfig = DEFAULT_PROFILE_CONFIG) -> ParallelismProfile:
    A = config.A_dist.sample(rng)
    sigma = config.sigma_dist.sample(rng)
    return ParallelismProfile(A, sigma)
