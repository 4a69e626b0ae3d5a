"""Finite-difference verification of reverse-mode gradients.

``check_gradients`` runs a scalar-valued builder twice: once on parameter
tensors of the working dtype to collect analytic gradients, and once per
perturbed coordinate in float64 to form central differences.  The float64
re-evaluation keeps truncation and roundoff of the reference far below the
comparison tolerance, so disagreement isolates backward-pass bugs rather
than finite-difference noise.  For large parameters a random subset of
coordinates can be probed instead of the full sweep.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor

Builder = Callable[[Sequence[Tensor]], Tensor]


@dataclass
class GradientCheckReport:
    max_rel_error: float
    rtol: float
    per_parameter: list[float] = field(default_factory=list)
    worst_parameter: int = -1
    coordinates_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.rtol


def _coordinate_subset(size: int, sample: int | None, rng: np.random.Generator | None) -> np.ndarray:
    if sample is None or size <= sample:
        return np.arange(size)
    if rng is None:
        rng = np.random.default_rng(0)
    return np.sort(rng.choice(size, size=sample, replace=False))


def finite_difference_gradients(
    f: Callable[[list[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    step: float = 1e-4,
    sample_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Central differences of ``f`` in float64.

    Returns one (indices, gradient_values) pair per parameter, where the
    flat indices name the probed coordinates.  The step is scaled by each
    coordinate's magnitude so large and small parameters see comparable
    relative perturbations.
    """
    work = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for i, arr in enumerate(work):
        flat = arr.reshape(-1)
        idx = _coordinate_subset(flat.size, sample_coords, rng)
        vals = np.zeros(idx.size)
        for row, j in enumerate(idx):
            orig = flat[j]
            h = step * max(1.0, abs(orig))
            flat[j] = orig + h
            fp = f(work)
            flat[j] = orig - h
            fm = f(work)
            flat[j] = orig
            vals[row] = (fp - fm) / (2.0 * h)
        out.append((idx, vals))
    return out


def check_gradients(
    builder: Builder,
    arrays: Sequence[np.ndarray],
    dtype=np.float32,
    rtol: float = 1e-3,
    step: float = 1e-4,
    sample_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradientCheckReport:
    """Compare analytic gradients of ``builder`` against central differences.

    ``builder`` maps a list of parameter tensors to a scalar tensor and must
    be deterministic in its inputs.  Relative error uses the larger of the
    two gradients as denominator, with a small floor tied to the overall
    gradient scale so exact zeros compare cleanly.
    """
    params = [Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for a in arrays]
    out = builder(params)
    if out.size != 1:
        raise ValueError("gradient check builder must return a scalar")
    out.backward()
    analytic = []
    for p in params:
        analytic.append(np.zeros_like(p.values, dtype=np.float64)
                        if p.grad is None else p.grad.astype(np.float64))

    def f(work: list[np.ndarray]) -> float:
        return float(builder([Tensor(w) for w in work]).values)

    reference = finite_difference_gradients(
        f, [p.values for p in params], step=step, sample_coords=sample_coords, rng=rng,
    )

    report = GradientCheckReport(max_rel_error=0.0, rtol=rtol)
    for i, (a, (idx, r)) in enumerate(zip(analytic, reference)):
        a_sel = a.reshape(-1)[idx]
        scale = max(float(np.max(np.abs(r))) if r.size else 0.0, 1e-6)
        denom = np.maximum(np.maximum(np.abs(a_sel), np.abs(r)), 1e-3 * scale)
        rel = float(np.max(np.abs(a_sel - r) / denom)) if r.size else 0.0
        report.per_parameter.append(rel)
        report.coordinates_checked += int(idx.size)
        if rel > report.max_rel_error:
            report.max_rel_error = rel
            report.worst_parameter = i
    return report
