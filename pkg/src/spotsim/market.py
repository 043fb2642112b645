"""Provider-side spot market: price traces, bid admission, out-of-bid
termination and hourly billing.

All money is held as integer micro-dollars so charges are exact and runs
replay byte-for-byte.
"""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Union

HOUR = 3600
MICROS = 1_000_000


class MarketError(ValueError):
    pass


class TraceError(MarketError):
    pass


def to_micros(dollars: Union[str, float, int, Decimal]) -> int:
    """Convert a dollar amount to integer micro-dollars (round half even)."""
    try:
        value = Decimal(str(dollars)) * MICROS
    except InvalidOperation as exc:
        raise MarketError(f"not a money amount: {dollars!r}") from exc
    return int(value.to_integral_value())


def fmt_money(micros: Union[int, Fraction]) -> str:
    """Format micro-dollars (int or Fraction) as dollars with six decimals."""
    if isinstance(micros, Fraction):
        value = Decimal(micros.numerator) / Decimal(micros.denominator)
    else:
        value = Decimal(int(micros))
    return str((value / MICROS).quantize(Decimal("0.000001")))


@dataclass(frozen=True)
class InstanceType:
    name: str
    ecus: int
    ondemand_price: int  # micro-dollars per hour
    trace_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.ecus < 1:
            raise MarketError(f"{self.name}: ecus must be >= 1")
        if self.ondemand_price <= 0:
            raise MarketError(f"{self.name}: on-demand price must be positive")

    @property
    def trace_key(self) -> str:
        return self.trace_id or self.name


# EC2 us-east Linux on-demand prices of the 2010-2011 era.
DEFAULT_CATALOG: tuple[InstanceType, ...] = (
    InstanceType("m1.small", 1, to_micros("0.085")),
    InstanceType("m1.large", 5, to_micros("0.34")),
    InstanceType("m1.xlarge", 8, to_micros("0.68")),
    InstanceType("c1.medium", 5, to_micros("0.17")),
    InstanceType("c1.xlarge", 20, to_micros("0.68")),
)


class PriceTrace:
    """Right-continuous step function of hourly prices over simulation time."""

    def __init__(self, points: Iterable[tuple[int, int]]) -> None:
        pts = sorted((int(t), int(p)) for t, p in points)
        if not pts:
            raise TraceError("empty price trace")
        for i, (t, p) in enumerate(pts):
            if p <= 0:
                raise TraceError(f"non-positive price {p} at t={t}")
            if i and t == pts[i - 1][0]:
                raise TraceError(f"duplicate timestamp {t}")
        self.times = [t for t, _ in pts]
        self.prices = [p for _, p in pts]

    def __len__(self) -> int:
        return len(self.times)

    def __repr__(self) -> str:
        return f"PriceTrace({len(self)} points, {self.times[0]}..{self.times[-1]})"

    @property
    def start(self) -> int:
        return self.times[0]

    @property
    def end(self) -> int:
        return self.times[-1]

    def price_at(self, t: int) -> int:
        i = bisect.bisect_right(self.times, t) - 1
        if i < 0:
            raise TraceError(f"t={t} precedes first trace point {self.times[0]}")
        return self.prices[i]

    def next_change(self, t: int) -> Optional[int]:
        """Time of the first trace point strictly after ``t``."""
        i = bisect.bisect_right(self.times, t)
        return self.times[i] if i < len(self.times) else None

    def max_price(self) -> int:
        return max(self.prices)

    def shifted(self, offset: int) -> "PriceTrace":
        """Re-origin the trace so that trace time ``offset`` becomes t=0.

        The point in effect at ``offset`` is carried to t=0; earlier points are
        dropped.
        """
        base = self.price_at(offset)
        i = bisect.bisect_right(self.times, offset)
        pts = [(0, base)] + [(t - offset, p) for t, p in zip(self.times[i:], self.prices[i:])]
        return PriceTrace(pts)


def load_price_trace(records: Iterable[tuple]) -> PriceTrace:
    """Build a trace from ``(timestamp, price)`` records; price in dollars."""
    pts = []
    for n, rec in enumerate(records, 1):
        try:
            t, price = rec
            pts.append((_parse_timestamp(t), to_micros(price)))
        except (TypeError, ValueError) as exc:
            raise TraceError(f"record {n}: malformed {rec!r}") from exc
    return PriceTrace(pts)


def _parse_timestamp(value) -> int:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return int(value)
    s = str(value).strip()
    try:
        return int(s)
    except ValueError:
        pass
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_timestamp(value) -> int:
    """Integer epoch seconds from an int or an ISO-8601 string (UTC if naive)."""
    try:
        return _parse_timestamp(value)
    except ValueError as exc:
        raise MarketError(f"bad timestamp {value!r}") from exc


def read_price_csv(source: Union[str, Path, io.TextIOBase]) -> dict[str, PriceTrace]:
    """Read a ``timestamp,instance_type,price`` CSV into one trace per type."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_price_csv(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["timestamp", "instance_type", "price"]:
        raise TraceError(f"line 1: expected header timestamp,instance_type,price, got {header!r}")
    by_type: dict[str, list[tuple[int, int]]] = {}
    seen: dict[str, set[int]] = {}
    for lineno, row in enumerate(reader, 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise TraceError(f"line {lineno}: expected 3 fields, got {len(row)}")
        ts, name, price = (c.strip() for c in row)
        try:
            t = _parse_timestamp(ts)
            p = to_micros(price)
        except (ValueError, MarketError) as exc:
            raise TraceError(f"line {lineno}: {exc}") from exc
        if p <= 0:
            raise TraceError(f"line {lineno}: non-positive price {price}")
        if t in seen.setdefault(name, set()):
            raise TraceError(f"line {lineno}: duplicate timestamp {ts} for {name}")
        seen[name].add(t)
        by_type.setdefault(name, []).append((t, p))
    return {name: PriceTrace(pts) for name, pts in by_type.items()}


def write_price_csv(traces: dict[str, PriceTrace], dest: io.TextIOBase) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["timestamp", "instance_type", "price"])
    for name in sorted(traces):
        tr = traces[name]
        for t, p in zip(tr.times, tr.prices):
            w.writerow([t, name, fmt_money(p)])


class Initiator(Enum):
    CLIENT = "client"
    PROVIDER = "provider"


class InstanceState(Enum):
    BOOTING = "booting"
    RUNNING = "running"
    FLAGGED_IDLE = "flagged_idle"
    TERMINATED = "terminated"


@dataclass(eq=False)
class SpotInstance:
    id: str
    type: InstanceType
    bid: int
    lease_start: int
    state: InstanceState = InstanceState.BOOTING
    hour_prices: list[int] = field(default_factory=list)
    running_job: Optional[object] = None
    queue: list = field(default_factory=list)
    ready_time: int = 0
    busy_seconds: int = 0
    terminated_at: Optional[int] = None
    initiator: Optional[Initiator] = None
    final_charge: Optional[int] = None
    termination_event: Optional[object] = field(default=None, repr=False)
    jobs_run: int = 0

    @property
    def live(self) -> bool:
        return self.state is not InstanceState.TERMINATED

    def hours_committed(self, t: int) -> int:
        """Hours begun (and so payable by the client) at time ``t``; at least one."""
        elapsed = max(0, t - self.lease_start)
        return max(1, -(-elapsed // HOUR))

    def paid_until(self, t: int) -> int:
        return self.lease_start + HOUR * self.hours_committed(t)

    @property
    def lease_seconds(self) -> int:
        if self.terminated_at is None:
            raise MarketError(f"{self.id} still live")
        return self.terminated_at - self.lease_start


def hour_start_price(trace: PriceTrace, lease_start: int, k: int) -> int:
    return trace.price_at(lease_start + k * HOUR)


class Market:
    """Cloud manager for a single provider with unbounded capacity."""

    def __init__(
        self,
        catalog: Iterable[InstanceType],
        traces: dict[str, PriceTrace],
        boot_delay: int = 0,
    ) -> None:
        self.catalog = tuple(catalog)
        self.types = {it.name: it for it in self.catalog}
        missing = [it.name for it in self.catalog if it.trace_key not in traces]
        if missing:
            raise MarketError(f"no price trace for: {', '.join(missing)}")
        self.traces = {it.name: traces[it.trace_key] for it in self.catalog}
        self.boot_delay = int(boot_delay)
        self.instances: list[SpotInstance] = []
        self._live: list[SpotInstance] = []
        self._next_id = 0
        self.revenue = 0
        self.denied = 0

    def current_price(self, itype: InstanceType, t: int) -> int:
        return self.traces[itype.name].price_at(t)

    def grantable(self, itype: InstanceType, bid: int, t: int) -> bool:
        return bid > self.current_price(itype, t)

    def request_instance(self, itype: InstanceType, bid: int, t: int) -> Optional[SpotInstance]:
        if bid <= 0:
            raise MarketError("bid must be positive")
        if not self.grantable(itype, bid, t):
            self.denied += 1
            return None
        inst = SpotInstance(
            id=f"i{self._next_id}",
            type=itype,
            bid=bid,
            lease_start=t,
            ready_time=t + self.boot_delay,
        )
        inst.hour_prices.append(self.current_price(itype, t))
        self._next_id += 1
        self.instances.append(inst)
        self._live.append(inst)
        return inst

    def lock_hours(self, inst: SpotInstance, t: int) -> None:
        """Record the hour-start price of every hour begun at or before ``t``."""
        trace = self.traces[inst.type.name]
        elapsed = t - inst.lease_start
        begun = elapsed // HOUR + 1
        while len(inst.hour_prices) < begun:
            inst.hour_prices.append(hour_start_price(trace, inst.lease_start, len(inst.hour_prices)))

    def compute_charge(self, inst: SpotInstance, end: int, initiator: Initiator) -> int:
        if end < inst.lease_start:
            raise MarketError("end precedes lease start")
        self.lock_hours(inst, end)
        full, rem = divmod(end - inst.lease_start, HOUR)
        charge = sum(inst.hour_prices[:full])
        if rem and initiator is Initiator.CLIENT:
            charge += inst.hour_prices[full]
        return charge

    def terminate(self, inst: SpotInstance, t: int, initiator: Initiator) -> int:
        if inst.state is InstanceState.TERMINATED:
            raise MarketError(f"{inst.id} already terminated")
        charge = self.compute_charge(inst, t, initiator)
        inst.state = InstanceState.TERMINATED
        inst.terminated_at = t
        inst.initiator = initiator
        inst.final_charge = charge
        self.revenue += charge
        self._live.remove(inst)
        return charge

    def on_price_change(self, itype: InstanceType, new_price: int, t: int) -> list[SpotInstance]:
        """Terminate every live instance of ``itype`` whose bid no longer beats the price."""
        doomed = [i for i in self._live if i.type is itype and i.bid <= new_price]
        for inst in doomed:
            self.terminate(inst, t, Initiator.PROVIDER)
        return doomed

    def live_instances(self) -> list[SpotInstance]:
        return list(self._live)

    def any_live(self) -> bool:
        return bool(self._live)
