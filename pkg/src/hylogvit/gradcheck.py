"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, finite_checks


@dataclass
class GradcheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    checked: int
    passed: bool

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name} checked={self.checked} max_rel_err={self.max_rel_err:.3e}"


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    eps: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    max_checks: Optional[int] = None,
    seed: int = 0,
    name: str = "gradcheck",
) -> GradcheckResult:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    ``fn`` closes over ``inputs`` and returns a scalar tensor. Each checked
    coordinate must satisfy ``|analytic - numeric| <= max(atol, rtol*|g|)``
    with ``|g|`` the larger magnitude of the two estimates. With
    ``max_checks`` set, that many coordinates per input are sampled instead of
    checking every element.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst_rel = 0.0
    worst_abs = 0.0
    checked = 0
    passed = True
    with finite_checks(False):
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                idx = rng.choice(flat.size, size=max_checks, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn().data)
                flat[i] = orig - eps
                fm = float(fn().data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(ga.reshape(-1)[i])
                err = abs(num - ana)
                scale = max(abs(num), abs(ana))
                tol = max(atol, rtol * scale)
                if err > tol:
                    passed = False
                worst_abs = max(worst_abs, err)
                # normalised so that passing <=> rel < rtol
                worst_rel = max(worst_rel, err / max(scale, atol / rtol))
                checked += 1
    return GradcheckResult(name, worst_rel, worst_abs, checked, passed)


def weighted_sum(out: Tensor, seed: int = 1) -> Tensor:
    """Reduce ``out`` to a scalar with fixed random weights (avoids symmetric cancellations)."""
    w = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    return (out * w).sum()
