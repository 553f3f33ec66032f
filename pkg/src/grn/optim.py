"""Adam and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class Adam:
    """Bias-corrected Adam over a dict of named float64 arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        for name in params:
            g = grads[name]
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in parameter block {name!r}")

        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name in params:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(fn, array, index, h=1e-5):
    """Central difference of scalar ``fn()`` w.r.t. ``array[index]`` (mutated and restored)."""
    old = array[index]
    array[index] = old + h
    f_plus = fn()
    array[index] = old - h
    f_minus = fn()
    array[index] = old
    return (f_plus - f_minus) / (2.0 * h)


def grad_check(fn, params, analytic_grads, h=1e-5, indices=None):
    """Worst relative error between ``analytic_grads`` and central differences.

    ``fn`` maps the current ``params`` dict (mutated in place during probing)
    to a scalar. ``indices`` optionally restricts probing to a list of
    ``(name, flat_index)`` pairs; by default every entry is probed.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    if indices is None:
        indices = [(name, i) for name, arr in params.items() for i in range(arr.size)]
    worst = 0.0
    for name, i in indices:
        arr = params[name]
        idx = np.unravel_index(i, arr.shape)
        num = numeric_grad(fn, arr, idx, h)
        worst = max(worst, float(relative_error(analytic_grads[name][idx], num)))
    return worst
