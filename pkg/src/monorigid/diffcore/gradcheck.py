"""Finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor

REL_EPS = 1e-12


@dataclass
class ParamReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradReport:
    params: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def __str__(self):
        lines = [f"max relative error {self.max_rel_error:.3e}"]
        for p in self.params:
            lines.append(
                f"  {p.name}: {p.max_rel_error:.3e} at {p.worst_index} "
                f"(analytic {p.analytic:.6e}, numeric {p.numeric:.6e}, {p.checked} elements)"
            )
        return "\n".join(lines)


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_EPS)


def _scalar(f):
    out = f()
    value = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])
    if isinstance(out, Tensor) and out.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if not np.isfinite(value):
        raise ContractError("grad_check: function value is not finite")
    return out, value


def grad_check(f, params, eps=1e-6, max_elements=None, seed=0, names=None):
    """Compare analytic gradients of ``f()`` to central differences.

    ``f`` takes no arguments and must rebuild its graph from ``params`` on
    every call. Tensors with more than ``max_elements`` entries are checked on
    a random subset of positions.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    out, _ = _scalar(f)
    if isinstance(out, Tensor) and out.requires_grad:
        out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    report = GradReport()
    for k, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            _, fp = _scalar(f)
            flat[i] = orig - eps
            _, fm = _scalar(f)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * eps)
        an = a.reshape(-1)[idx].astype(np.float64)
        err = relative_error(an, numeric)
        w = int(np.argmax(err)) if err.size else 0
        name = names[k] if names else (p.name or f"param{k}")
        report.params.append(ParamReport(
            name=name,
            max_rel_error=float(err[w]) if err.size else 0.0,
            worst_index=tuple(int(v) for v in np.unravel_index(idx[w], p.shape)) if err.size else (),
            analytic=float(an[w]) if err.size else 0.0,
            numeric=float(numeric[w]) if err.size else 0.0,
            checked=int(idx.size),
        ))
    return report
