"""
Central finite-difference checking of tape gradients.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from ..errors import GradCheckError
from .tensor import Tape, Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-5
# Denominator floor for the relative error; below it the error is absolute.
DEFAULT_ABS_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between analytic and numeric gradients."""

    errors: Dict[str, float]
    worst_index: Dict[str, int]
    checked_entries: Dict[str, int]
    tol: float
    step: float
    failed: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def summary_lines(self) -> List[str]:
        lines = []
        for name, err in self.errors.items():
            status = "FAIL" if name in self.failed else "ok"
            lines.append(
                f"{name:<40s} {err:.3e}  ({self.checked_entries[name]} entries)  {status}"
            )
        return lines


def _evaluate(f: Callable[[], Tensor], label: str) -> float:
    value = f().item()
    if not math.isfinite(value):
        raise GradCheckError(f"objective is non-finite ({value}) {label}", component=label)
    return value


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    entries: Optional[int] = None,
    seed: int = 0,
    abs_floor: float = DEFAULT_ABS_FLOOR,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` is re-evaluated with each parameter entry nudged by ``±step``;
    parameters are restored afterwards. With ``entries`` set, that many
    entries per parameter are sampled (deterministically from ``seed``)
    instead of checking all of them.
    """
    if not isinstance(params, Mapping):
        params = {p.name or f"param_{i}": p for i, p in enumerate(params)}

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        base = loss.item()
        if not math.isfinite(base):
            raise GradCheckError(f"objective is non-finite ({base}) at the base point")
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in params.items()
    }

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    worst: Dict[str, int] = {}
    counts: Dict[str, int] = {}
    failed: List[str] = []
    for name, p in params.items():
        original = p.numpy()
        flat_indices = np.arange(p.size)
        if entries is not None and entries < p.size:
            flat_indices = np.sort(rng.choice(p.size, size=entries, replace=False))

        worst_err, worst_at = 0.0, -1
        with no_grad():
            for idx in flat_indices:
                nudged = original.copy().reshape(-1)
                nudged[idx] += step
                p.assign(nudged.reshape(p.shape))
                f_plus = _evaluate(f, f"at {name}[{idx}] + step")
                nudged[idx] -= 2 * step
                p.assign(nudged.reshape(p.shape))
                f_minus = _evaluate(f, f"at {name}[{idx}] - step")
                numeric = (f_plus - f_minus) / (2 * step)
                exact = float(analytic[name].reshape(-1)[idx])
                err = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
                if err > worst_err or worst_at < 0:
                    worst_err, worst_at = err, int(idx)
        p.assign(original)

        errors[name] = worst_err
        worst[name] = worst_at
        counts[name] = len(flat_indices)
        if worst_err >= tol:
            failed.append(name)
            logger.warning(f"Gradient mismatch for {name}: rel. error {worst_err:.3e} at entry {worst_at}")
        else:
            logger.debug(f"Gradient check {name}: rel. error {worst_err:.3e}")

    return GradCheckReport(
        errors=errors, worst_index=worst, checked_entries=counts, tol=tol, step=step, failed=failed
    )
