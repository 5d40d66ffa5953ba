"""Warm-up/measure benchmarking protocol and latency statistics."""

from __future__ import annotations

import math
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .model import Model, forward
from .policy import OTHER, OpClass, PrecisionPolicy, resolve_policy

# Clocks return integer nanoseconds; each sample is converted to seconds once.
Clock = Callable[[], int]


class ClockError(RuntimeError):
    """The time source went backwards."""


class BenchmarkError(RuntimeError):
    def __init__(self, message: str, partial_samples: Sequence[float]):
        super().__init__(message)
        self.partial_samples = list(partial_samples)


@dataclass(frozen=True)
class BenchProtocol:
    warmup_iters: int = 10
    measure_iters: int = 100

    def __post_init__(self):
        if self.warmup_iters < 0 or self.measure_iters < 1:
            raise ValueError("need warmup_iters >= 0 and measure_iters >= 1")


@dataclass
class BenchStats:
    mean: float
    std: float
    p50: float
    p95: float
    p99: float
    throughput: float
    batch: int
    samples: list[float] = field(default_factory=list)

    def to_dict(self, with_samples: bool = True) -> dict:
        d = asdict(self)
        if not with_samples:
            d.pop("samples")
        return d


# Timed runs are exclusive process-wide: only one holder at a time.
_MEASUREMENT_TOKEN = threading.Lock()


@contextmanager
def measurement_token():
    with _MEASUREMENT_TOKEN:
        yield


def nearest_rank(sorted_samples: Sequence[float], q: float) -> float:
    """The ceil(q * N)-th smallest sample (1-based), N = len(sorted_samples)."""
    n = len(sorted_samples)
    if n == 0:
        raise ValueError("no samples")
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    # Round first so that e.g. 0.95 * 100 lands on 95, not 95.00000000000001.
    rank = max(1, math.ceil(round(q * n, 9)))
    return sorted_samples[min(rank, n) - 1]


def _throughput(batch: int, mean: float) -> float:
    """batch / mean, nudged by a few ulps so that result * mean == batch when
    such a float exists. For roughly one (batch, mean) pair in ten none does;
    the product is then within one ulp of batch."""
    if mean == 0:
        return math.inf
    t = batch / mean
    if t * mean == batch:
        return t
    for direction in (math.inf, -math.inf):
        cand = t
        for _ in range(4):
            cand = math.nextafter(cand, direction)
            if cand * mean == batch:
                return cand
    return t


def summarize(samples: Sequence[float], batch: int) -> BenchStats:
    """Mean, sample std (n-1), nearest-rank percentiles and throughput.

    Moments are computed in exact rational arithmetic over the given float
    samples and rounded once, so they do not depend on summation order.
    """
    xs = [float(s) for s in samples]
    if not xs:
        raise ValueError("no samples")
    exact = [Fraction(x) for x in xs]
    n = len(xs)
    mean_q = sum(exact) / n
    mean = float(mean_q)
    std = 0.0
    if n > 1:
        std = math.sqrt(float(sum((x - mean_q) ** 2 for x in exact) / (n - 1)))
    ordered = sorted(xs)
    return BenchStats(
        mean=mean,
        std=std,
        p50=nearest_rank(ordered, 0.50),
        p95=nearest_rank(ordered, 0.95),
        p99=nearest_rank(ordered, 0.99),
        throughput=_throughput(batch, mean),
        batch=batch,
        samples=xs,
    )


def run_benchmark(
    workload: Callable[[], object],
    batch: int,
    protocol: BenchProtocol = BenchProtocol(),
    clock: Clock = time.perf_counter_ns,
) -> BenchStats:
    """Run warm-up iterations (discarded), then time each measured iteration."""
    samples: list[float] = []
    with measurement_token():
        try:
            for _ in range(protocol.warmup_iters):
                workload()
            for _ in range(protocol.measure_iters):
                t0 = clock()
                workload()
                t1 = clock()
                if t1 < t0:
                    raise ClockError(f"clock went backwards ({t0!r} -> {t1!r})")
                samples.append((t1 - t0) / 1e9)
        except ClockError:
            raise
        except Exception as exc:
            raise BenchmarkError(f"workload failed after {len(samples)} samples: {exc}", samples) from exc
    return summarize(samples, batch)


def latency_shares(
    model: Model,
    tokens,
    policy: PrecisionPolicy | str = "fp32",
    protocol: BenchProtocol = BenchProtocol(),
) -> dict[str, float]:
    """Fraction of forward wall time spent in each op class, plus ``other``."""
    policy = resolve_policy(policy)
    per_class = {c: 0.0 for c in OpClass}
    total = 0.0
    with measurement_token():
        for _ in range(protocol.warmup_iters):
            forward(model, tokens, policy)
        for _ in range(protocol.measure_iters):
            trace = forward(model, tokens, policy)
            total += trace.total_time
            for c, t in trace.op_time.items():
                per_class[c] += t
    shares = {c.value: (t / total if total > 0 else 0.0) for c, t in per_class.items()}
    shares[OTHER] = max(0.0, 1.0 - math.fsum(shares.values()))
    return shares


def fit_power_law(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.size < 3 or x.size != y.size:
        raise ValueError("need at least 3 (x, y) points")
    if x.max() / x.min() < 4:
        raise ValueError("x values must span at least a factor of 4")
    if (x <= 0).any() or (y <= 0).any():
        raise ValueError("power-law fit needs positive values")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


@dataclass
class ScalingResult:
    stats: dict[int, BenchStats]
    exponent: float


def scaling_probe(
    model: Model,
    seq_lens: Sequence[int],
    batch: int,
    policy: PrecisionPolicy | str = "fp32",
    protocol: BenchProtocol = BenchProtocol(),
    clock: Clock = time.perf_counter_ns,
    seed: int = 0,
) -> ScalingResult:
    """Benchmark forward at several sequence lengths and fit latency ~ seq**k."""
    seq_lens = sorted(seq_lens)
    if len(seq_lens) < 3 or seq_lens[-1] / seq_lens[0] < 4:
        raise ValueError("need >= 3 sequence lengths spanning at least 4x")
    policy = resolve_policy(policy)
    rng = np.random.default_rng(seed)
    stats = {}
    for seq in seq_lens:
        tokens = rng.integers(0, model.config.vocab, size=(batch, seq))
        stats[seq] = run_benchmark(lambda: forward(model, tokens, policy), batch, protocol, clock)
    return ScalingResult(stats, fit_power_law(seq_lens, [stats[s].mean for s in seq_lens]))

