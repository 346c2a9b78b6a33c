"""Wall-time measurement of the operator and a complexity fit.

The relation stage builds an N x N score matrix, so forward cost should
grow quadratically in the RoI count once N dominates the per-RoI stages.
``run_bench`` times forward and backward over a size grid (medians of
repeated runs, after warm-ups); ``fit_scaling_exponent`` regresses
log(time) on log(N) and returns the slope.

Timings run sequentially on the current thread; only the configuration,
never the measured times, is reproducible from the seed.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ResourceError
from .operator import NlRoiConfig, init_params, nlroi_backward, nlroi_forward
from .rng import Prng


@dataclass(frozen=True)
class SizeTuple:
    n: int
    d: int
    d_f: int
    d_g: int
    h: int
    w: int

    def config(self) -> NlRoiConfig:
        # the record format carries no separate mid width; use the phi/psi width
        return NlRoiConfig(
            d=self.d, d_f=self.d_f, d_mid=self.d_f, d_g=self.d_g, h=self.h, w=self.w
        )


@dataclass
class BenchRecord:
    n: int
    d: int
    d_f: int
    d_g: int
    h: int
    w: int
    reps: int
    forward_ms: float
    backward_ms: float


# N sweep for the complexity fit: spans 16x up to the proposal budget a
# detector-scale run would feed the operator, with sizes small enough that
# the N x N stage dominates.
DEFAULT_SWEEP = tuple(
    SizeTuple(n=n, d=8, d_f=4, d_g=4, h=4, w=4) for n in (64, 128, 256, 512, 1024)
)

MIN_REPS = 5
WARMUPS = 2


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1000.0


def run_bench(grid, reps: int, seed: int) -> list:
    """Median forward/backward milliseconds for every size tuple, in order."""
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}, got {reps}")
    prng = Prng(seed)
    records = []
    for size in grid:
        config = size.config()
        try:
            params = init_params(config, prng)
            x = prng.normals(size.n * size.d * size.h * size.w).reshape(
                size.n, size.d, size.h, size.w
            )
            d_out = prng.normals(
                size.n * (size.d + size.d_g) * size.h * size.w
            ).reshape(size.n, size.d + size.d_g, size.h, size.w)

            for _ in range(WARMUPS):
                out, cache = nlroi_forward(x, params, config)
                nlroi_backward(cache, params, config, d_out)

            fwd = []
            cache = None

            def forward():
                nonlocal cache
                _, cache = nlroi_forward(x, params, config)

            for _ in range(reps):
                fwd.append(_time_once(forward))
            bwd = [
                _time_once(lambda: nlroi_backward(cache, params, config, d_out))
                for _ in range(reps)
            ]
        except MemoryError as exc:
            raise ResourceError(f"allocation failed for size tuple {size}") from exc
        records.append(
            BenchRecord(
                n=size.n,
                d=size.d,
                d_f=size.d_f,
                d_g=size.d_g,
                h=size.h,
                w=size.w,
                reps=reps,
                forward_ms=statistics.median(fwd),
                backward_ms=statistics.median(bwd),
            )
        )
    return records


def fit_scaling_exponent(records) -> float:
    """Least-squares slope of log(forward_ms) against log(N).

    Needs at least 4 records with distinct N and identical remaining sizes.
    """
    if not records:
        raise InsufficientDataError("no records to fit")
    fixed = {(r.d, r.d_f, r.d_g, r.h, r.w) for r in records}
    if len(fixed) != 1:
        raise ValueError(f"records mix non-N sizes: {sorted(fixed)}")
    if len({r.n for r in records}) < 4:
        raise InsufficientDataError(
            f"need >= 4 distinct N values, got {sorted({r.n for r in records})}"
        )
    xs = np.log([float(r.n) for r in records])
    ys = np.log([float(r.forward_ms) for r in records])
    xbar = xs.mean()
    ybar = ys.mean()
    return float(np.sum((xs - xbar) * (ys - ybar)) / np.sum((xs - xbar) ** 2))


CSV_HEADER = "n,d,d_f,d_g,h,w,reps,forward_ms,backward_ms"


def emit_csv(records, stream) -> None:
    print(CSV_HEADER, file=stream)
    for r in records:
        print(
            f"{r.n},{r.d},{r.d_f},{r.d_g},{r.h},{r.w},{r.reps},"
            f"{r.forward_ms:.3f},{r.backward_ms:.3f}",
            file=stream,
        )
