"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_coordinate: tuple | None
    n_checked: int
    tol: float
    failure: str | None = None
    n_one_sided: int = 0
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_relative_error < self.tol


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), 1e-6)
    return abs(analytic - numeric) / denom


def finite_diff_check(
    fn: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: int | None = None,
    seed: int = 0,
    samples_per_input: Mapping[str, int] | None = None,
    signature: Callable[[], bytes] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients from ``fn`` against central differences.

    ``fn()`` evaluates a scalar from the current contents of the arrays in
    ``inputs`` and returns ``(value, grads)`` where ``grads[name]`` has the
    shape of ``inputs[name]``. Inputs are perturbed in place and restored.
    With ``samples`` set, only that many randomly chosen coordinates per
    input are checked (``samples_per_input`` overrides it per name);
    otherwise every coordinate is.

    ``signature``, when given, is called after each ``fn()`` and should
    describe the active piece of a piecewise-smooth function (for example
    the sign pattern of every ReLU input). If a perturbation lands on a
    different piece than the base point, the central difference straddles a
    kink and says nothing about the derivative there; the one-sided
    difference from the side that stayed on the base piece is used instead,
    and the coordinate is skipped when both sides left it.
    """
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise TypeError(f"finite_diff_check needs float64 inputs, {name!r} is {arr.dtype}")

    value, grads = fn()
    base_sig = signature() if signature is not None else None
    if not np.isfinite(value):
        return GradCheckReport(np.inf, None, 0, tol, f"non-finite value {value} at base point")
    analytic = {name: np.array(grads[name], dtype=np.float64, copy=True) for name in inputs}
    for name, g in analytic.items():
        if g.shape != inputs[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {inputs[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(g))[0])
            return GradCheckReport(np.inf, (name, bad), 0, tol, f"non-finite analytic gradient at {name}{list(bad)}")

    rng = np.random.default_rng(seed)
    worst, worst_at, n_checked, n_one_sided, n_skipped = 0.0, None, 0, 0, 0
    for name, arr in inputs.items():
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"input {name!r} must be contiguous to be perturbed in place")
        k = samples if samples_per_input is None else samples_per_input.get(name, samples)
        if k is None or k >= flat.size:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            i = int(i)
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn()[0]
            same_plus = signature is None or signature() == base_sig
            flat[i] = orig - h
            f_minus = fn()[0]
            same_minus = signature is None or signature() == base_sig
            flat[i] = orig
            index = np.unravel_index(i, arr.shape)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return GradCheckReport(
                    np.inf, (name, index), n_checked, tol,
                    f"non-finite value while perturbing {name}{list(index)}",
                )
            if same_plus and same_minus:
                numeric = (f_plus - f_minus) / (2 * h)
            elif same_plus:
                numeric = (f_plus - value) / h
                n_one_sided += 1
            elif same_minus:
                numeric = (value - f_minus) / h
                n_one_sided += 1
            else:
                n_skipped += 1
                continue
            err = relative_error(float(analytic[name].reshape(-1)[i]), numeric)
            n_checked += 1
            if err > worst or worst_at is None:
                worst, worst_at = err, (name, tuple(int(j) for j in index))
    if signature is not None:
        fn()  # leave caches describing the unperturbed point
    return GradCheckReport(worst, worst_at, n_checked, tol, None, n_one_sided, n_skipped)
