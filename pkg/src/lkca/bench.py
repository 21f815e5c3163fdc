"""Timing and accounting harness over the three mixer realizations.

Each case times one forward realization on fixed seeded inputs, counts MACs
with the instrumented counter, and compares them to the closed-form model.
The attention and convolution views must agree with the formula exactly; the
spectral view's FFT work is outside the MAC model, so only its value
projection is counted and the analytic column is reported for reference.

Equal MACs do not imply equal wall time: the realizations differ in memory
traffic and layout (an (N, N) matmul versus many small correlations), which
is the point of measuring. The `min` column is the least noise-contaminated
statistic; mean/std are kept for context.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import attention
from .attention import VIEW_ATTENTION, VIEWS
from .tensor import F32, MacCounter, SeededRng


@dataclass
class BenchCase:
    grid_h: int
    grid_w: int
    dim: int
    batch: int
    view: str = VIEW_ATTENTION
    repetitions: int = 5
    warmup_reps: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.warmup_reps < 1:
            raise ValueError(f"warmup_reps must be >= 1, got {self.warmup_reps}")


@dataclass
class BenchResult:
    case: BenchCase
    mean_s: float | None = None
    std_s: float | None = None
    min_s: float | None = None
    macs_measured: int | None = None
    macs_analytic: int | None = None
    peak_bytes: int | None = None
    max_dev_vs_attention: float | None = None
    skipped_reason: str | None = None

    @property
    def skipped(self) -> bool:
        return self.skipped_reason is not None


def _case_inputs(case: BenchCase, rng: SeededRng):
    layer = attention.init_layer(case.grid_h, case.grid_w, case.dim, rng,
                                 kernel_init="trunc_normal", view=case.view)
    n = case.grid_h * case.grid_w
    x = rng.normal((case.batch, n, case.dim), 0.0, 1.0, dtype=F32)
    return x, layer


def run_case(case: BenchCase, rng: SeededRng | None = None) -> BenchResult:
    """Time one realization: `warmup_reps` untimed calls, then `repetitions`
    timed ones on a monotonic clock, strictly serial. MACs are counted on
    separate untimed passes (twice, to confirm the count is stable)."""
    if case.view not in VIEWS:
        return BenchResult(case=case, skipped_reason=f"view {case.view!r} is not built")
    if rng is None:
        rng = SeededRng(case.seed)
    x, layer = _case_inputs(case, rng)

    counter = MacCounter()
    out = attention.forward(x, layer, counter)
    measured = counter.macs
    counter.reset()
    attention.forward(x, layer, counter)
    if counter.macs != measured:
        raise AssertionError(f"MAC count unstable: {measured} vs {counter.macs}")

    dev = None
    if case.view != VIEW_ATTENTION:
        ref = attention.forward(x, attention.with_view(layer, VIEW_ATTENTION))
        dev = float(np.abs(out - ref).max())

    tracemalloc.start()
    attention.forward(x, layer)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()

    for _ in range(case.warmup_reps):
        attention.forward(x, layer)
    times = []
    for _ in range(case.repetitions):
        t0 = time.perf_counter()
        attention.forward(x, layer)
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    return BenchResult(
        case=case,
        mean_s=float(times.mean()),
        std_s=float(times.std()),
        min_s=float(times.min()),
        macs_measured=measured,
        macs_analytic=attention.count_flops(layer, case.batch) // 2,
        peak_bytes=int(peak),
        max_dev_vs_attention=dev)


CSV_HEADER = "grid_h,grid_w,dim,batch,view,reps,mean_s,std_s,min_s,macs_measured,macs_analytic"


def results_csv(results) -> str:
    """One row per case in input order; skipped cases keep their identity
    columns and leave the measurements empty."""
    lines = [CSV_HEADER]
    for r in results:
        c = r.case
        if r.skipped:
            tail = ",,,,"
        else:
            tail = (f"{r.mean_s:.6e},{r.std_s:.6e},{r.min_s:.6e},"
                    f"{r.macs_measured},{r.macs_analytic}")
        lines.append(f"{c.grid_h},{c.grid_w},{c.dim},{c.batch},{c.view},"
                     f"{c.repetitions},{tail}")
    return "\n".join(lines) + "\n"


def run_suite(cases, csv_path=None) -> list:
    if not cases:
        raise ValueError("need at least one bench case")
    results = [run_case(case) for case in cases]
    if csv_path is not None:
        try:
            with open(csv_path, "w", newline="") as fh:
                fh.write(results_csv(results))
        except OSError as exc:
            raise OSError(f"cannot write bench CSV to {csv_path}: {exc}") from exc
    return results
