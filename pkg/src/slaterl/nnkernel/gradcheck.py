"""Finite-difference verification of reverse-mode gradients.

Central differences with a configurable step are compared against the
engine's gradients parameter block by parameter block. Relative error uses
``|a - n| / max(|a| + |n|, floor)`` so that near-zero gradients are judged
on an absolute scale well above finite-difference noise at 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, zero_grads

REL_ERROR_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    per_block: dict[str, float] = field(default_factory=dict)
    skipped: bool = False
    reason: str | None = None

    @property
    def max_rel_error(self) -> float:
        return max(self.per_block.values()) if self.per_block else 0.0

    def passed(self, tolerance: float) -> bool:
        return not self.skipped and self.max_rel_error <= tolerance


def _rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), REL_ERROR_FLOOR)


def check_loss_gradients(loss_fn, params: dict[str, Tensor], *, step: float = 1e-5,
                         max_coords_per_block: int | None = None,
                         seed: int = 0) -> GradCheckReport:
    """Compare engine gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must be deterministic and return a scalar ``Tensor`` built
    with the current parameter values every time it is called.
    """
    report = GradCheckReport()
    zero_grads(params.values())
    loss = loss_fn()
    loss.backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
                for n, p in params.items()}
    zero_grads(params.values())

    rng = np.random.default_rng(seed)
    for name, p in params.items():
        flat = p.values.reshape(-1)
        n_coords = flat.size
        if max_coords_per_block is not None and n_coords > max_coords_per_block:
            coords = rng.choice(n_coords, size=max_coords_per_block, replace=False)
        else:
            coords = np.arange(n_coords)
        worst = 0.0
        grad_flat = analytic[name].reshape(-1)
        for c in coords:
            original = flat[c]
            flat[c] = original + step
            up = loss_fn().item()
            flat[c] = original - step
            down = loss_fn().item()
            flat[c] = original
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, _rel_error(float(grad_flat[c]), numeric))
        report.per_block[name] = worst
    return report


def gradient_check(module, input_sampler, tolerance: float = 1e-4, *,
                   step: float = 1e-5, seed: int = 0,
                   max_coords_per_block: int | None = None) -> GradCheckReport:
    """Check a module's parameter gradients on sampled inputs.

    The scalar objective is the sum of the module's outputs. Modules with
    active dropout are skipped and flagged non-deterministic rather than
    checked against a moving target.
    """
    if module.has_dropout():
        return GradCheckReport(skipped=True, reason="dropout active: non-deterministic forward")

    rng = np.random.default_rng(seed)
    inputs = input_sampler(rng)
    if not isinstance(inputs, tuple):
        inputs = (inputs,)

    def loss_fn():
        out = module(*inputs, training=True)
        return out.sum()

    report = check_loss_gradients(loss_fn, module.named_parameters(), step=step,
                                  max_coords_per_block=max_coords_per_block, seed=seed)
    return report
