"""Central finite-difference verification of the analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .objective import backward, loss_value
from .synthetic import gradcheck_instance

MAX_PARAMETERS = 5000
# denominators below this are treated as absolute errors
REL_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    h: float
    num_parameters: int
    seconds: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failing(self) -> list[str]:
        return [name for name, e in self.errors.items() if not e < self.tolerance]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def to_json(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance, "h": self.h,
                "max_relative_error": self.max_error, "per_tensor": self.errors,
                "failing": self.failing, "num_parameters": self.num_parameters,
                "seconds": self.seconds}

    def summary(self) -> str:
        lines = [f"{name:<16} max rel err {err:.3e}  {'ok' if err < self.tolerance else 'FAIL'}"
                 for name, err in self.errors.items()]
        verdict = "PASS" if self.passed else "FAIL: " + ", ".join(self.failing)
        return "\n".join(lines + [f"{verdict} (tolerance {self.tolerance:g}, h {self.h:g})"])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(instance=None, h: float = 1e-5, tolerance: float = 1e-4,
                      grad_fn=None) -> GradCheckReport:
    """Sweep every parameter coordinate with ``(f(x+h) - f(x-h)) / 2h``.

    ``instance`` is ``(model, batch, config)``; the default is the 6x8 fixture.
    ``grad_fn(batch, trace, model, config)`` replaces the analytic gradient
    (used to check that the harness catches a broken gradient).
    """
    if not h > 0:
        raise ValueError("h must be positive")
    t0 = time.perf_counter()
    model, batch, config = instance if instance is not None else gradcheck_instance()
    tensors = model.params.tensors()
    n_params = sum(t.size for t in tensors.values())
    if n_params > MAX_PARAMETERS:
        raise ValueError(f"{n_params} parameters is too many to sweep (max {MAX_PARAMETERS})")
    trace = model.forward()
    analytic = (grad_fn or backward)(batch, trace, model, config)
    errors = {}
    for name, t in tensors.items():
        numeric = np.zeros_like(t)
        flat = t.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = loss_value(model, batch, config)
            flat[j] = orig - h
            minus = loss_value(model, batch, config)
            flat[j] = orig
            num_flat[j] = (plus - minus) / (2 * h)
        errors[name] = float(relative_error(analytic[name], numeric).max())
    return GradCheckReport(errors, tolerance, h, n_params, time.perf_counter() - t0)
