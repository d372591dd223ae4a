"""Recommendation policy: state encoder, hyper-action head, scorer, selection.

The policy turns an observation (static user features plus the positive-item
history) into a continuous hyper-action vector, scores the whole catalog by
dot product against the shared item kernel, and selects the recommendation
list either greedily (top-k) or by categorical sampling without replacement.

Internally, item id ``i`` lives at embedding row ``i + 1``; row 0 is a
trainable padding row that is masked out of attention, which also gives
empty histories a well-defined encoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnkernel as nk
from .nnkernel import Tensor


@dataclass(frozen=True)
class PolicyConfig:
    catalog_size: int
    slate_size: int
    user_feature_cards: tuple[int, ...]
    state_dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    max_history: int = 50
    user_hidden: int = 128
    ffn_dim: int | None = None
    dtype: str = "float64"

    def validate(self) -> None:
        if self.catalog_size < self.slate_size:
            raise ValueError("catalog smaller than slate size")
        if self.state_dim % self.n_heads != 0:
            raise ValueError("n_heads must divide state_dim")
        if not self.user_feature_cards:
            raise ValueError("need at least one user feature slot")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["user_feature_cards"] = list(self.user_feature_cards)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        d["user_feature_cards"] = tuple(d["user_feature_cards"])
        if d.get("ffn_dim") is not None:
            d["ffn_dim"] = int(d["ffn_dim"])
        return cls(**d)


@dataclass
class Observation:
    """Raw per-user observation: static feature codes + positive history ids."""
    user_features: np.ndarray
    history: np.ndarray

    def extended(self, new_positives: np.ndarray) -> "Observation":
        return Observation(self.user_features,
                           np.concatenate([self.history, new_positives]))


class ObservationBatch:
    """Fixed-width batch: histories are left-padded with -1 to ``max_history``."""

    def __init__(self, features: np.ndarray, history: np.ndarray):
        self.features = np.asarray(features, dtype=np.int64)
        self.history = np.asarray(history, dtype=np.int64)
        if self.features.ndim != 2 or self.history.ndim != 2:
            raise ValueError("ObservationBatch arrays must be 2-d")

    @classmethod
    def from_observations(cls, observations: list[Observation], max_history: int
                          ) -> "ObservationBatch":
        n = len(observations)
        feats = np.stack([o.user_features for o in observations])
        hist = np.full((n, max_history), -1, dtype=np.int64)
        for i, o in enumerate(observations):
            recent = o.history[-max_history:]
            if len(recent):
                hist[i, max_history - len(recent):] = recent
        return cls(feats, hist)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class UserState:
    """Encoded state vector alongside the raw observation batch it came from."""
    observations: ObservationBatch
    vector: Tensor  # (batch, state_dim)


@dataclass
class HyperAction:
    mean: Tensor          # (batch, d)
    sigma: float
    sample: Tensor        # (batch, d); equals mean in deterministic mode
    mode: str             # deterministic | gaussian
    noise: np.ndarray | None = None  # recorded epsilon for gaussian mode


@dataclass
class EffectAction:
    items: np.ndarray       # (batch, k) distinct item ids per row
    probs: np.ndarray       # (batch, k) catalog-softmax probability of each chosen item
    log_prob: np.ndarray    # (batch,) sum of item log-probabilities
    mode: str               # topk | categorical


def gaussian_sample(mean: Tensor, sigma: float, mode: str,
                    rng: np.random.Generator | None = None) -> HyperAction:
    """Reparameterized draw around ``mean``: sample = mean + sigma * eps."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if mode not in ("deterministic", "gaussian"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if mode == "deterministic" or sigma == 0.0:
        return HyperAction(mean=mean, sigma=sigma, sample=mean, mode=mode)
    if rng is None:
        raise ValueError("gaussian mode needs a random generator")
    eps = rng.standard_normal(mean.shape).astype(mean.dtype)
    sample = nk.add(mean, Tensor(sigma * eps))
    return HyperAction(mean=mean, sigma=sigma, sample=sample, mode=mode, noise=eps)


def select_items(scores: np.ndarray, k: int, mode: str,
                 rng: np.random.Generator | None = None) -> EffectAction:
    """Pick ``k`` distinct items per row from catalog scores.

    topk: highest scores, ties broken toward the lower item id.
    categorical: sequential draws without replacement proportional to
    softmax(scores), renormalizing after each draw.

    In both modes the reported per-item probability is the softmax over the
    full candidate set, and the list log-probability is the sum of item
    log-probabilities.
    """
    scores = np.asarray(scores)
    if scores.ndim == 1:
        scores = scores[None, :]
    batch, n = scores.shape
    if k > n:
        raise ValueError(f"cannot select {k} items from {n} candidates")

    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs_full = e / e.sum(axis=1, keepdims=True)

    items = np.empty((batch, k), dtype=np.int64)
    if mode == "topk":
        order = np.lexsort((np.broadcast_to(np.arange(n), scores.shape), -scores), axis=1)
        items[:] = order[:, :k]
    elif mode == "categorical":
        if rng is None:
            raise ValueError("categorical mode needs a random generator")
        for b in range(batch):
            remaining = probs_full[b].copy()
            for j in range(k):
                total = remaining.sum()
                u = rng.random() * total
                choice = int(np.searchsorted(np.cumsum(remaining), u))
                choice = min(choice, n - 1)
                while remaining[choice] == 0.0:  # boundary hit on a spent item
                    choice = (choice + 1) % n
                items[b, j] = choice
                remaining[choice] = 0.0
    else:
        raise ValueError(f"unknown selection mode {mode!r}")

    chosen_probs = np.take_along_axis(probs_full, items, axis=1)
    log_prob = np.log(np.maximum(chosen_probs, 1e-300)).sum(axis=1)
    return EffectAction(items=items, probs=chosen_probs, log_prob=log_prob, mode=mode)


class ItemKernel(nk.Module):
    """Shared item embedding table mapping external ids into the kernel space."""

    def __init__(self, catalog_size: int, dim: int, *, rng, dtype=np.float64):
        self.catalog_size, self.dim = catalog_size, dim
        self.embedding = nk.Embedding(catalog_size + 1, dim, rng=rng, dtype=dtype)

    def rows(self, item_ids: np.ndarray) -> Tensor:
        ids = np.asarray(item_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.catalog_size):
            raise ValueError(
                f"item id outside catalog [0, {self.catalog_size}): "
                f"min={ids.min()}, max={ids.max()}"
            )
        return self.embedding(ids + 1)

    def padded_rows(self, padded_ids: np.ndarray) -> Tensor:
        """Lookup where -1 marks padding (mapped to the reserved row 0)."""
        return self.embedding(np.asarray(padded_ids) + 1)

    def matrix(self) -> Tensor:
        """Kernel rows for the whole catalog, shape (catalog_size, dim)."""
        return nk.narrow(self.embedding.table, 0, 1, self.catalog_size)

    def named_parameters(self):
        return {"kernel.table": self.embedding.table}


class Policy(nk.Module):
    """SASRec-backbone policy with a linear hyper-action head."""

    def __init__(self, config: PolicyConfig, seed: int):
        config.validate()
        self.config = config
        dtype = config.np_dtype
        seeds = np.random.SeedSequence(seed).spawn(6)
        d = config.state_dim

        self.kernel = ItemKernel(config.catalog_size, d,
                                 rng=np.random.default_rng(seeds[0]), dtype=dtype)
        self.pos_embedding = nk.Embedding(config.max_history, d,
                                          rng=np.random.default_rng(seeds[1]), dtype=dtype)
        onehot_dim = sum(config.user_feature_cards)
        self.user_mlp = nk.MLP((onehot_dim, config.user_hidden, d),
                               rng=np.random.default_rng(seeds[2]), dtype=dtype)
        self.encoder = nk.TransformerEncoder(
            d, config.n_heads, config.n_layers,
            config.ffn_dim if config.ffn_dim is not None else d,
            dropout_rate=config.dropout,
            rng=np.random.default_rng(seeds[3]), dtype=dtype)
        self.head = nk.Linear(d, d, rng=np.random.default_rng(seeds[4]), dtype=dtype)
        self._emb_drop_rng = np.random.default_rng(seeds[5])
        self.dropout_rate = config.dropout

    # -- encoding -------------------------------------------------------

    def _one_hot(self, features: np.ndarray) -> np.ndarray:
        cards = self.config.user_feature_cards
        batch = features.shape[0]
        if features.shape[1] != len(cards):
            raise ValueError(f"expected {len(cards)} feature slots, got {features.shape[1]}")
        out = np.zeros((batch, sum(cards)), dtype=self.config.np_dtype)
        offset = 0
        for j, card in enumerate(cards):
            codes = features[:, j]
            if codes.min() < 0 or codes.max() >= card:
                raise ValueError(f"feature slot {j} code outside [0, {card})")
            out[np.arange(batch), offset + codes] = 1.0
            offset += card
        return out

    def batch(self, observations: list[Observation] | ObservationBatch) -> ObservationBatch:
        if isinstance(observations, ObservationBatch):
            return observations
        if isinstance(observations, Observation):
            observations = [observations]
        return ObservationBatch.from_observations(observations, self.config.max_history)

    def encode_state(self, observations, training: bool = False) -> UserState:
        """Encode observations into state vectors (batch, state_dim).

        The history embeddings get positional embeddings added, the encoded
        user-feature vector is appended as the final sequence element, and the
        transformer output at that final position is the state.
        """
        obs = self.batch(observations)
        bsz, hist_len = obs.history.shape
        if hist_len != self.config.max_history:
            raise ValueError("history width must equal config.max_history")

        item_seq = self.kernel.padded_rows(obs.history)           # (B, H, d)
        positions = self.pos_embedding(np.arange(hist_len))        # (H, d)
        seq = nk.add(item_seq, positions)

        user_vec = self.user_mlp(Tensor(self._one_hot(obs.features)))
        user_tok = nk.reshape(user_vec, (bsz, 1, self.config.state_dim))
        x = nk.concat([seq, user_tok], axis=1)                     # (B, H+1, d)
        x = nk.dropout(x, self.dropout_rate, self._emb_drop_rng, training)

        valid = np.concatenate(
            [obs.history >= 0, np.ones((bsz, 1), dtype=bool)], axis=1)
        encoded = self.encoder(x, valid, training)
        state = nk.reshape(nk.narrow(encoded, 1, hist_len, 1),
                           (bsz, self.config.state_dim))
        return UserState(observations=obs, vector=state)

    # -- acting -----------------------------------------------------------

    def propose_hyper_action(self, state: UserState, sigma: float, mode: str,
                             rng: np.random.Generator | None = None) -> HyperAction:
        mean = self.head(state.vector)
        return gaussian_sample(mean, sigma, mode, rng)

    def score_items(self, hyper, candidate_ids: np.ndarray | None = None) -> Tensor:
        """Dot product of each candidate's kernel row with the hyper-action."""
        z = hyper.sample if isinstance(hyper, HyperAction) else nk.as_tensor(hyper)
        if candidate_ids is None:
            kernel_matrix = self.kernel.matrix()                  # (N, d)
        else:
            kernel_matrix = self.kernel.rows(np.asarray(candidate_ids))
        return nk.matmul(z, nk.swapaxes(kernel_matrix, 0, 1))      # (B, N)

    def act(self, observations, *, sigma: float, z_mode: str, select_mode: str,
            rng: np.random.Generator | None = None
            ) -> tuple[EffectAction, HyperAction, UserState]:
        """Full inference pipeline, no gradient recording."""
        with nk.no_grad():
            state = self.encode_state(observations, training=False)
            hyper = self.propose_hyper_action(state, sigma, z_mode, rng)
            scores = self.score_items(hyper)
        action = select_items(scores.values, self.config.slate_size, select_mode, rng)
        return action, hyper, state

    # -- parameters --------------------------------------------------------

    def named_parameters(self):
        out = {}
        out.update(self.kernel.named_parameters())
        for name, p in self.pos_embedding.named_parameters().items():
            out[f"pos.{name}"] = p
        for name, p in self.user_mlp.named_parameters().items():
            out[f"user.{name}"] = p
        for name, p in self.encoder.named_parameters().items():
            out[f"encoder.{name}"] = p
        for name, p in self.head.named_parameters().items():
            out[f"head.{name}"] = p
        return out

    def kernel_parameters(self):
        return self.kernel.named_parameters()

    def spec_dict(self):
        return {"kind": "slate-policy", "config": self.config.to_dict()}

    def has_dropout(self):
        return self.dropout_rate > 0.0

    def clone(self) -> "Policy":
        other = Policy(self.config, seed=0)
        other.copy_values_from(self)
        return other

    # -- persistence --------------------------------------------------------

    def save(self, path, sidecar: dict | None = None) -> None:
        path = Path(path)
        nk.save_parameters(self, path)
        meta = {"config": self.config.to_dict()}
        if sidecar:
            meta.update(sidecar)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path, seed: int = 0) -> "Policy":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        policy = cls(PolicyConfig.from_dict(meta["config"]), seed=seed)
        nk.load_parameters(policy, path)
        return policy
