"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

SMOOTH_TOL = 1e-5
KINK_TOL = 1e-4
# denominator floor for the relative error, keeps near-zero gradients from
# turning round-off into huge relative errors
REL_FLOOR = 1e-3


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    tolerance: float
    n_coords: int
    error: str = ""
    worst: tuple = field(default=())

    @property
    def passed(self) -> bool:
        return not self.error and self.max_rel_err < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.error})" if self.error else ""
        return f"{status}  {self.name:<28s} max_rel_err={self.max_rel_err:.3e}  tol={self.tolerance:.0e}{extra}"


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    tolerance: float = SMOOTH_TOL,
    *,
    name: str = "op",
    seed: int = 0,
) -> GradcheckReport:
    """Compare backward() against central differences for every input coordinate.

    ``fn`` maps tensors to a tensor; it must be deterministic across calls
    (re-seed any dropout generator inside ``fn``).  The output is reduced to
    a scalar through a fixed random projection so every output coordinate
    contributes.  Step size per coordinate is ``1e-5 * max(1, |x|)``.

    Never raises: exceptions are captured in the report.
    """
    try:
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(*tensors)
        proj = np.random.default_rng(seed).standard_normal(out.shape)
        out.backward(proj)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        def objective() -> float:
            with no_grad():
                return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

        max_rel = max_abs = 0.0
        worst: tuple = ()
        n = 0
        for k, a in enumerate(arrays):
            flat = a.reshape(-1)
            ga = analytic[k].reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                h = 1e-5 * max(1.0, abs(orig))
                flat[idx] = orig + h
                fp = objective()
                flat[idx] = orig - h
                fm = objective()
                flat[idx] = orig
                num = (fp - fm) / (2 * h)
                abs_err = abs(num - ga[idx])
                rel = abs_err / max(abs(num), abs(ga[idx]), REL_FLOOR)
                n += 1
                max_abs = max(max_abs, abs_err)
                if rel > max_rel:
                    max_rel = rel
                    worst = (k, idx, float(ga[idx]), num)
        return GradcheckReport(name, max_rel, max_abs, tolerance, n, worst=worst)
    except Exception as exc:  # report, never raise
        return GradcheckReport(name, float("inf"), float("inf"), tolerance, 0, error=f"{type(exc).__name__}: {exc}")
