"""Shared critic over (state, latent-action), inverse pooling, targets.

One Q network evaluates both action spaces: hyper-actions directly, and
recommendation lists through mean pooling of their item kernel rows. There
is deliberately no second parameterization for list evaluation.
"""

from __future__ import annotations

import numpy as np

from . import nnkernel as nk
from .nnkernel import Tensor
from .policy import EffectAction, ItemKernel

Q_HIDDEN = (256, 64)


class QNetwork(nk.Module):
    """MLP over concat(state, latent) -> scalar, hidden layers 256 and 64."""

    def __init__(self, state_dim: int, *, hidden: tuple[int, int] = Q_HIDDEN,
                 seed: int = 0, dtype=np.float64):
        self.state_dim = state_dim
        self.hidden = hidden
        self.mlp = nk.MLP((2 * state_dim, *hidden, 1),
                          rng=np.random.default_rng(seed), dtype=dtype)

    def q_hyper(self, state: Tensor, latent: Tensor) -> Tensor:
        """Q(s, Z): scalar per batch row."""
        if state.shape[-1] != self.state_dim or latent.shape[-1] != self.state_dim:
            raise ValueError(
                f"expected dim {self.state_dim}, got state {state.shape} / "
                f"latent {latent.shape}"
            )
        x = nk.concat([state, latent], axis=-1)
        out = self.mlp(x)
        return nk.reshape(out, (out.shape[0],))

    def q_effect(self, state: Tensor, action, kernel: ItemKernel) -> Tensor:
        """Q(s, a) = Q(s, pool(a)) through the shared network."""
        return self.q_hyper(state, inverse_pool(action, kernel))

    def named_parameters(self):
        return {f"q.{n}": p for n, p in self.mlp.named_parameters().items()}

    def spec_dict(self):
        return {"kind": "q-network", "state_dim": self.state_dim,
                "hidden": list(self.hidden)}


class VNetwork(nk.Module):
    """State-value MLP with the same hidden sizes, state input only."""

    def __init__(self, state_dim: int, *, hidden: tuple[int, int] = Q_HIDDEN,
                 seed: int = 0, dtype=np.float64):
        self.state_dim = state_dim
        self.hidden = hidden
        self.mlp = nk.MLP((state_dim, *hidden, 1),
                          rng=np.random.default_rng(seed), dtype=dtype)

    def value(self, state: Tensor) -> Tensor:
        out = self.mlp(state)
        return nk.reshape(out, (out.shape[0],))

    def named_parameters(self):
        return {f"v.{n}": p for n, p in self.mlp.named_parameters().items()}

    def spec_dict(self):
        return {"kind": "v-network", "state_dim": self.state_dim,
                "hidden": list(self.hidden)}


def inverse_pool(action, kernel: ItemKernel) -> Tensor:
    """Mean of the item kernel rows of a recommendation list, shape (B, d).

    Reconstructs a latent-action vector from a discrete list; gradient flows
    into the kernel rows of the listed items.
    """
    items = action.items if isinstance(action, EffectAction) else np.asarray(action, dtype=np.int64)
    if items.ndim == 1:
        items = items[None, :]
    if items.shape[1] == 0:
        raise ValueError("cannot pool an empty action")
    rows = kernel.rows(items)          # (B, k, d)
    return nk.tmean(rows, axis=1)


class TargetPair:
    """Live network plus a slowly tracking copy updated by convex blending."""

    def __init__(self, live: nk.Module, target: nk.Module, tau: float):
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {tau}")
        live_names = set(live.named_parameters())
        target_names = set(target.named_parameters())
        if live_names != target_names:
            raise ValueError("live and target networks have different parameter sets")
        self.live = live
        self.target = target
        self.tau = tau
        target.copy_values_from(live)

    def soft_update(self) -> None:
        """target <- tau * live + (1 - tau) * target, per parameter."""
        live_params = self.live.named_parameters()
        for name, tp in self.target.named_parameters().items():
            tp.values *= (1.0 - self.tau)
            tp.values += self.tau * live_params[name].values
