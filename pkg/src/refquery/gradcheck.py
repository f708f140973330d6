"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.diagnostics and self.worst <= self.tol

    def failures(self) -> list[str]:
        bad = [f"{k}: {v:.3e}" for k, v in self.max_rel_error.items() if not v <= self.tol]
        return self.diagnostics + bad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
                      step: float = 1e-5, tol: float = 1e-4, max_coords: int | None = None,
                      seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` must read its parameters from ``params`` (the same tensor objects).
    Everything runs in float64 so the comparison is not dominated by round-off.
    When ``max_coords`` is set, that many random coordinates per parameter are
    checked instead of all of them.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    report = GradCheckReport(tol=tol)
    originals = {name: p.data for name, p in params.items()}
    flags = {name: p.requires_grad for name, p in params.items()}
    rng = np.random.default_rng(seed)
    try:
        with T.using_dtype(np.float64):
            for p in params.values():
                p.data = p.data.astype(np.float64)
                p.requires_grad = True
                p.grad = None
            with T.Tape() as tape:
                out = f()
            if out.size != 1:
                raise T.ShapeError(f"finite_diff_check needs a scalar function, got {out.shape}")
            if not np.isfinite(out.data).all():
                report.diagnostics.append("non-finite function value at the check point")
                return report
            tape.backward(out)
            tape.clear()
            analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                        for name, p in params.items()}
            for name, p in params.items():
                if not np.isfinite(analytic[name]).all():
                    report.diagnostics.append(f"{name}: non-finite tape gradient")
                    continue
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                numeric = np.empty(idx.size)
                for k, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = float(f().data)
                    flat[i] = orig - step
                    fm = float(f().data)
                    flat[i] = orig
                    numeric[k] = (fp - fm) / (2 * step)
                if not np.isfinite(numeric).all():
                    report.diagnostics.append(f"{name}: non-finite value under perturbation")
                    continue
                err = relative_error(analytic[name].reshape(-1)[idx], numeric, floor)
                report.max_rel_error[name] = float(err.max()) if err.size else 0.0
                report.checked[name] = int(idx.size)
    finally:
        for name, p in params.items():
            p.data = originals[name]
            p.requires_grad = flags[name]
            p.grad = None
    return report
