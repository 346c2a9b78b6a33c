"""Finite-difference verification of analytic gradients.

``finite_diff`` numerically differentiates any scalar loss of one tensor
with central differences. ``check_all_gradients`` builds a random input
blob and random parameters, takes the loss to be a fixed random projection
of the operator output (a plain sum could hide sign errors through
cancellation), and compares every analytic gradient the backward pass
produces against the numeric one.

Relative error uses the denominator max(|a|, |b|, 1e-8) so that tiny
gradients are compared absolutely. Step 1e-5 balances truncation against
round-off in 64-bit arithmetic and is deliberately not configurable.

The projection is drawn with a small scale (1e-6). One parameter, the psi
bias, has an exactly zero loss gradient for structural reasons: shifting
psi adds a per-row constant to the score matrix, and a row softmax is
invariant under that shift. Central differences on a zero-gradient
coordinate return pure cancellation noise of order |loss|*eps/step, and
the comparison floor (1e-8) together with the tolerance (1e-6) demands
that noise stay below 1e-14, which only holds when the loss itself is
small. Scaling the projection conditions the probe without weakening it:
real gradients (~1e-5 here) still sit orders of magnitude above the
comparison floor, so sign and magnitude errors in any backward path are
still caught.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .operator import NlRoiConfig, NlRoiParams, nlroi_backward, nlroi_forward
from .rng import Prng

REL_ERR_FLOOR = 1e-8
PROJECTION_SCALE = 1e-6  # keeps FD cancellation noise below the floor, see above


def finite_diff(loss_fn, x: np.ndarray, step: float) -> np.ndarray:
    """Central-difference gradient of a scalar function at x.

    grad_k = (L(x + step*e_k) - L(x - step*e_k)) / (2*step)
    """
    if step <= 0.0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        probe = x.copy()
        probe.reshape(-1)[k] = orig + step
        lp = float(loss_fn(probe))
        probe.reshape(-1)[k] = orig - step
        lm = float(loss_fn(probe))
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericalError(
                f"non-finite loss while probing coordinate {k}: "
                f"L+={lp!r} L-={lm!r}"
            )
        grad.reshape(-1)[k] = (lp - lm) / (2.0 * step)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
    return np.abs(a - b) / denom


@dataclass
class TensorCheck:
    max_rel_err: float
    worst_index: int  # flat index of the worst entry


@dataclass
class GradReport:
    tolerance: float
    checks: dict           # tensor name -> TensorCheck
    projection: np.ndarray  # the random projection defining the loss

    @property
    def max_rel_err(self) -> float:
        return max(c.max_rel_err for c in self.checks.values())

    @property
    def passed(self) -> bool:
        return all(c.max_rel_err < self.tolerance for c in self.checks.values())


def _compare(name: str, analytic: np.ndarray, numeric: np.ndarray, checks: dict) -> None:
    e = rel_err(analytic, numeric)
    k = int(np.argmax(e))
    checks[name] = TensorCheck(max_rel_err=float(e.reshape(-1)[k]), worst_index=k)


def check_all_gradients(
    config: NlRoiConfig,
    seed: int,
    step: float = 1e-5,
    tol: float = 1e-6,
    n: int = 4,
) -> GradReport:
    """Verify dX and all eight parameter gradients of the operator.

    The blob (n RoIs) and every parameter tensor are drawn from the seeded
    PRNG; the loss is sum(forward(X) * R) for a fixed random projection R,
    which exercises every output coordinate with an independent weight.
    """
    prng = Prng(seed)
    x = prng.normals(n * config.d * config.h * config.w).reshape(
        n, config.d, config.h, config.w
    )
    shapes = NlRoiParams.shapes(config)
    drawn = {}
    for name, shape in shapes.items():
        drawn[name] = 0.5 * prng.normals(int(np.prod(shape))).reshape(shape)
    params = NlRoiParams(**drawn)

    out, cache = nlroi_forward(x, params, config)
    projection = PROJECTION_SCALE * prng.normals(out.size).reshape(out.shape)
    d_x, d_params = nlroi_backward(cache, params, config, projection)

    checks: dict = {}

    def loss_of_x(blob):
        return np.sum(nlroi_forward(blob, params, config)[0] * projection)

    _compare("x", d_x, finite_diff(loss_of_x, x, step), checks)

    for name in shapes:
        def loss_of_param(value, _name=name):
            trial = dataclasses.replace(params, **{_name: value})
            return np.sum(nlroi_forward(x, trial, config)[0] * projection)

        numeric = finite_diff(loss_of_param, getattr(params, name), step)
        _compare(name, getattr(d_params, name), numeric, checks)

    return GradReport(tolerance=tol, checks=checks, projection=projection)


def format_report(report: GradReport) -> str:
    """Human-readable table, one row per checked tensor."""
    width = max(len(name) for name in report.checks)
    lines = [f"{'tensor'.ljust(width)}  max_rel_err   worst_index"]
    for name, c in report.checks.items():
        lines.append(f"{name.ljust(width)}  {c.max_rel_err:.6e}  {c.worst_index}")
    lines.append(f"tolerance {report.tolerance:g}")
    return "\n".join(lines)


def summary_line(report: GradReport) -> str:
    flag = "true" if report.passed else "false"
    return f"GRADCHECK pass={flag} max_rel_err={report.max_rel_err:.6e}"
