"""Wall-clock scaling measurements for the linear and quadratic attention
implementations, plus log-log slope fitting.

Timing discipline: one warmup evaluation is discarded, then the median of
at least five repetitions is reported. If the median lands too close to
the timer's resolution for three significant digits, the repetition count
is doubled (with a warning) until it is not, or a cap is reached.

peak_state_bytes reports the attention state each implementation must
hold while producing outputs: the constant-size decode accumulators for
the linear path, and the blocked score panel for the quadratic path,
which grows linearly in L.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass

import numpy as np

from .attention import (
    BLOCK,
    AttentionConfig,
    decode_step,
    linear_bidirectional,
    linear_causal,
    quadratic_oracle,
    start_decode,
)
from .errors import UsageError
from .tensor import Tensor

MIN_REPS = 5
MAX_REPS = 80
RESOLUTION_MARGIN = 1000  # median must exceed resolution by 3 digits


@dataclass(frozen=True)
class BenchRecord:
    impl: str            # "linear" or "quadratic"
    kernel_id: str
    L: int
    D: int
    H: int
    wall_ns: int         # median over reps
    peak_state_bytes: int
    reps: int


def timer_resolution_ns() -> float:
    res = time.get_clock_info("perf_counter").resolution
    return max(res * 1e9, 1.0)


def measure_ns(fn, reps: int = MIN_REPS, warn=sys.stderr) -> tuple[int, int]:
    """Median wall time of fn() over reps, after one discarded warmup."""
    if reps < MIN_REPS:
        raise UsageError(f"reps must be >= {MIN_REPS}, got {reps}")
    floor_ns = timer_resolution_ns() * RESOLUTION_MARGIN
    fn()  # warmup, not recorded
    while True:
        times = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            fn()
            times.append(time.perf_counter_ns() - t0)
        med = int(np.median(times))
        if med >= floor_ns or reps >= MAX_REPS:
            return med, reps
        reps = min(reps * 2, MAX_REPS)
        if warn is not None:
            print(f"warning: median {med} ns is within {RESOLUTION_MARGIN}x of "
                  f"timer resolution; increasing reps to {reps}", file=warn)


def _inputs(kernel_id: str, L: int, d: int, rng, batch: int = 1):
    # positive inputs keep the sign-indefinite kernel's row sums away from
    # zero; for the others the distribution is irrelevant to timing
    if kernel_id == "asym-example":
        q = rng.uniform(0.5, 2.5, (batch, L, d))
        k = rng.uniform(0.5, 2.5, (batch, L, d))
    else:
        q = rng.standard_normal((batch, L, d))
        k = rng.standard_normal((batch, L, d))
    v = rng.standard_normal((batch, L, d))
    return Tensor(q), Tensor(k), Tensor(v)


def decode_state_bytes(cfg: AttentionConfig, d: int, steps: int, rng) -> int:
    """Runs a real decode for `steps` positions and reports the state size."""
    state = start_decode(cfg, d, d)
    sizes = set()
    for _ in range(steps):
        q = rng.standard_normal(d)
        k = rng.standard_normal(d)
        v = rng.standard_normal(d)
        _, state = decode_step(state, q, k, v, cfg)
        sizes.add(state.nbytes)
    if len(sizes) != 1:
        raise AssertionError(f"decode state size changed during decode: {sizes}")
    return sizes.pop()


def bench_attention(kernel_id: str, L_values, d: int, h: int = 1,
                    reps: int = MIN_REPS, causal: bool = False, seed: int = 0,
                    decode_probe_steps: int | None = None, batch: int = 1,
                    warn=sys.stderr) -> list[BenchRecord]:
    """Times both implementations at every L; returns one record per (impl, L).

    decode_probe_steps limits how many decode steps back the linear
    records' peak_state_bytes; None runs the full L steps. batch > 1 times
    batch-parallel evaluation; slope comparisons should use batch 1.
    """
    records = []
    cfg = AttentionConfig(kernel_id, n_heads=h, causal=causal)
    for L in sorted(L_values):
        if L < 1:
            raise UsageError(f"L values must be >= 1, got {L}")
        rng = np.random.default_rng(seed)
        q, k, v = _inputs(kernel_id, L, d, rng, batch)
        linear_fn = linear_causal if causal else linear_bidirectional

        wall, used = measure_ns(lambda: linear_fn(q, k, v, cfg), reps, warn)
        probe = L if decode_probe_steps is None else min(L, decode_probe_steps)
        state_bytes = decode_state_bytes(cfg, d, probe, rng)
        records.append(BenchRecord("linear", kernel_id, L, d, h, wall,
                                   state_bytes, used))

        wall, used = measure_ns(lambda: quadratic_oracle(q, k, v, cfg), reps, warn)
        panel = min(BLOCK, L) * L * 8 * h
        records.append(BenchRecord("quadratic", kernel_id, L, d, h, wall,
                                   panel, used))
    return records


def fit_loglog_slope(records, impl: str):
    """Least-squares slope of log(wall) vs log(L); None below two points."""
    pts = sorted((r.L, r.wall_ns) for r in records if r.impl == impl)
    if len(pts) < 2:
        return None
    ls = np.log([p[0] for p in pts])
    ts = np.log([max(p[1], 1) for p in pts])
    return float(np.polyfit(ls, ts, 1)[0])


def speedup_at(records, L: int) -> float | None:
    lin = next((r.wall_ns for r in records if r.impl == "linear" and r.L == L), None)
    quad = next((r.wall_ns for r in records if r.impl == "quadratic" and r.L == L), None)
    if lin is None or quad is None or lin == 0:
        return None
    return quad / lin
