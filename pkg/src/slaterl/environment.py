"""Simulated online users: trained response model, rewards, temper leave model.

Feedback on a recommended list is Bernoulli per item, with probabilities from
a trained scorer (two stacked attention stages over the user's history and
features, then a dot product with the candidate item embedding). Each step:

* reward = mean over the list of (+1 for a positive, -0.2 for a negative),
* the user's temper budget drops by ``1 + alpha * (1 - positive_fraction)``,
* the session ends when temper reaches zero or at the depth cap (20),
* positive items are appended to the running history.

Item id ``i`` lives at embedding row ``i + 2``; rows 0/1 are a padding row
and a session-start token, so empty histories are well-defined.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnkernel as nk
from .nnkernel import Tensor
from .datasets import SessionLog
from .policy import Observation

POSITIVE_REWARD = 1.0
NEGATIVE_REWARD = -0.2
MAX_DEPTH = 20


def reward_from_feedback(feedback: np.ndarray) -> float:
    """Average item-wise reward: +1 per positive, -0.2 per negative.

    Computed as -0.2 + 1.2 * positive_fraction so the endpoints are exact in
    floating point and the value never drifts outside [-0.2, 1.0].
    """
    feedback = np.asarray(feedback)
    k = feedback.shape[-1]
    positives = int(feedback.sum())
    span = POSITIVE_REWARD - NEGATIVE_REWARD
    return NEGATIVE_REWARD + span * positives / k


def temper_update(temper: float, feedback: np.ndarray, alpha: float = 2.0
                  ) -> tuple[float, bool]:
    """Deplete the patience budget; worse slates deplete it faster.

    Decrement is ``1 + alpha * (1 - positive_fraction)``; the user leaves when
    the budget reaches zero.
    """
    feedback = np.asarray(feedback)
    positive_fraction = float(feedback.mean())
    new_temper = temper - (1.0 + alpha * (1.0 - positive_fraction))
    return new_temper, new_temper <= 0.0


@dataclass(frozen=True)
class ResponseModelConfig:
    catalog_size: int
    user_feature_cards: tuple[int, ...]
    dim: int = 32
    heads: int = 1
    dropout: float = 0.0
    max_history: int = 50
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["user_feature_cards"] = list(self.user_feature_cards)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResponseModelConfig":
        d = dict(d)
        d["user_feature_cards"] = tuple(d["user_feature_cards"])
        return cls(**d)


class ResponseModel(nk.Module):
    """User click model: P(positive | user, history, item) = sigmoid(e_u . e_i)."""

    _PAD, _BOS = 0, 1

    def __init__(self, config: ResponseModelConfig, seed: int):
        self.config = config
        dtype = config.np_dtype
        seeds = np.random.SeedSequence(seed).spawn(4)
        d = config.dim
        self.embedding = nk.Embedding(config.catalog_size + 2, d,
                                      rng=np.random.default_rng(seeds[0]), dtype=dtype)
        self.pos_embedding = nk.Embedding(config.max_history + 1, d,
                                          rng=np.random.default_rng(seeds[1]), dtype=dtype)
        self.user_linear = nk.Linear(sum(config.user_feature_cards), d,
                                     rng=np.random.default_rng(seeds[2]), dtype=dtype)
        self.pool = nk.AttentionPool(d, config.heads, dropout_rate=config.dropout,
                                     rng=np.random.default_rng(seeds[3]), dtype=dtype)
        self.dropout_rate = config.dropout

    def _one_hot(self, features: np.ndarray) -> np.ndarray:
        cards = self.config.user_feature_cards
        out = np.zeros((features.shape[0], sum(cards)), dtype=self.config.np_dtype)
        offset = 0
        for j, card in enumerate(cards):
            out[np.arange(features.shape[0]), offset + features[:, j]] = 1.0
            offset += card
        return out

    def _padded_history(self, histories: list[np.ndarray]) -> np.ndarray:
        """Left-pad to max_history and prepend the session-start token."""
        h = self.config.max_history
        out = np.zeros((len(histories), h + 1), dtype=np.int64)  # 0 = PAD
        for i, hist in enumerate(histories):
            recent = np.asarray(hist)[-h:]
            out[i, 0] = self._BOS
            if len(recent):
                out[i, h + 1 - len(recent):] = recent + 2
        return out

    def user_embedding(self, features: np.ndarray, histories: list[np.ndarray],
                       training: bool = False) -> Tensor:
        idx = self._padded_history(histories)
        seq = self.embedding(idx)
        seq = nk.add(seq, self.pos_embedding(np.arange(idx.shape[1])))
        user_vec = self.user_linear(Tensor(self._one_hot(np.asarray(features))))
        valid = idx != self._PAD
        return self.pool(seq, user_vec, valid, training)

    def item_logits(self, user_vec: Tensor, items: np.ndarray) -> Tensor:
        ids = np.asarray(items)
        if ids.min() < 0 or ids.max() >= self.config.catalog_size:
            raise ValueError(
                f"item id outside catalog [0, {self.config.catalog_size})")
        item_vecs = self.embedding(ids + 2)                      # (B, k, d)
        bsz, k, d = item_vecs.shape
        u = nk.reshape(user_vec, (bsz, 1, d))
        return nk.tsum(nk.mul(u, item_vecs), axis=-1)            # (B, k)

    def probabilities(self, features: np.ndarray, histories: list[np.ndarray],
                      items: np.ndarray) -> np.ndarray:
        """Per-item positive-feedback probabilities, shape (batch, k)."""
        with nk.no_grad():
            user_vec = self.user_embedding(features, histories, training=False)
            logits = self.item_logits(user_vec, items)
            return nk.sigmoid(logits).values

    def named_parameters(self):
        out = {}
        for prefix, mod in (("emb", self.embedding), ("pos", self.pos_embedding),
                            ("user", self.user_linear), ("pool", self.pool)):
            for name, p in mod.named_parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def spec_dict(self):
        return {"kind": "response-model", "config": self.config.to_dict()}

    def save(self, path, sidecar: dict | None = None) -> None:
        path = Path(path)
        nk.save_parameters(self, path)
        meta = {"config": self.config.to_dict()}
        if sidecar:
            meta.update(sidecar)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "ResponseModel":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        model = cls(ResponseModelConfig.from_dict(meta["config"]), seed=0)
        nk.load_parameters(model, path)
        return model


@dataclass(frozen=True)
class ResponseFitConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    clamp: float = 1e-7


def fit_response_model(log: SessionLog, config: ResponseModelConfig,
                       fit: ResponseFitConfig = ResponseFitConfig()
                       ) -> tuple[ResponseModel, list[float]]:
    """Train the response model on logged feedback with binary cross-entropy.

    Returns the model and the per-epoch mean training loss. Aborts with a
    diagnostic if the loss diverges to a non-finite value.
    """
    if not log.records:
        raise ValueError("cannot fit a response model on an empty log")
    model = ResponseModel(config, seed=fit.seed)
    opt = nk.Adam(model.named_parameters(), lr=fit.lr)
    rng = np.random.default_rng(fit.seed)
    n = len(log.records)
    losses: list[float] = []
    for epoch in range(fit.epochs):
        order = rng.permutation(n)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, fit.batch_size):
            batch = [log.records[i] for i in order[start:start + fit.batch_size]]
            features = np.stack([r.user_features for r in batch])
            histories = [r.history for r in batch]
            items = np.stack([r.exposed for r in batch])
            labels = np.stack([r.feedback for r in batch]).astype(config.np_dtype)

            user_vec = model.user_embedding(features, histories, training=True)
            logits = model.item_logits(user_vec, items)
            probs = nk.clip(nk.sigmoid(logits), fit.clamp, 1.0 - fit.clamp)
            y = Tensor(labels)
            ll = nk.add(nk.mul(y, nk.log(probs)),
                        nk.mul(nk.sub(1.0, y), nk.log(nk.sub(1.0, probs))))
            loss = nk.neg(nk.tmean(ll))
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"response-model training diverged (epoch {epoch}, "
                    f"batch {batches}): loss={value}")
            loss.backward()
            opt.step()
            epoch_loss += value
            batches += 1
        losses.append(epoch_loss / max(batches, 1))
    return model, losses


@dataclass
class SessionState:
    user_features: np.ndarray
    history: np.ndarray           # grows by sampled positives
    temper: float
    depth: int = 0
    done: bool = False

    def observation(self) -> Observation:
        return Observation(self.user_features, self.history)


@dataclass
class StepResult:
    feedback: np.ndarray
    reward: float
    done: bool
    next_observation: Observation


@dataclass(frozen=True)
class EnvConfig:
    slate_size: int
    temper_budget: float = 10.0
    temper_alpha: float = 2.0
    max_depth: int = MAX_DEPTH
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class UserPool:
    """Session seeds: (static features, initial history) pairs from a log."""

    def __init__(self, log: SessionLog):
        if not log.records:
            raise ValueError("user pool needs a non-empty log")
        self.entries = [(r.user_features.copy(), r.history.copy())
                        for r in log.records]

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        features, history = self.entries[int(rng.integers(len(self.entries)))]
        return features.copy(), history.copy()


class SimulatedEnvironment:
    """Batched sessions against a trained response model."""

    def __init__(self, model: ResponseModel, pool: UserPool, config: EnvConfig):
        self.model = model
        self.pool = pool
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self.sessions: list[SessionState] = []

    # -- session lifecycle ----------------------------------------------

    def _fresh_session(self, rng: np.random.Generator) -> SessionState:
        features, history = self.pool.sample(rng)
        return SessionState(user_features=features, history=history,
                            temper=self.config.temper_budget)

    def reset(self, batch_size: int, seed: int | None = None) -> list[Observation]:
        """Start ``batch_size`` fresh sessions; returns their observations."""
        rng = self._rng if seed is None else np.random.default_rng(seed)
        if seed is not None:
            self._rng = rng
        self.sessions = [self._fresh_session(rng) for _ in range(batch_size)]
        return [s.observation() for s in self.sessions]

    def reset_indices(self, indices: list[int]) -> list[Observation]:
        """Replace finished sessions with fresh users (keeps the batch full)."""
        for i in indices:
            self.sessions[i] = self._fresh_session(self._rng)
        return [self.sessions[i].observation() for i in indices]

    def active_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.sessions) if not s.done]

    def observations(self) -> list[Observation]:
        return [self.sessions[i].observation() for i in self.active_indices()]

    # -- stepping ----------------------------------------------------------

    def response_probabilities(self, session: SessionState, items: np.ndarray
                               ) -> np.ndarray:
        """Per-item positive probability for one session (trained model)."""
        return self.model.probabilities(
            session.user_features[None, :], [session.history],
            np.asarray(items)[None, :])[0]

    def step(self, actions: np.ndarray) -> list[StepResult]:
        """Advance every active session by one recommendation list."""
        active = self.active_indices()
        actions = np.asarray(actions)
        if actions.ndim != 2 or actions.shape[0] != len(active):
            raise ValueError(
                f"expected one action per active session "
                f"({len(active)}), got shape {actions.shape}")
        return self.step_indices(active, actions)

    def step_indices(self, indices: list[int], actions: np.ndarray) -> list[StepResult]:
        actions = np.asarray(actions)
        if actions.shape[1] != self.config.slate_size:
            raise ValueError(
                f"action length {actions.shape[1]} != k={self.config.slate_size}")
        for i in indices:
            if self.sessions[i].done:
                raise ValueError(f"session {i} is already done")
        sessions = [self.sessions[i] for i in indices]
        probs = self.model.probabilities(
            np.stack([s.user_features for s in sessions]),
            [s.history for s in sessions], actions)
        draws = self._rng.random(probs.shape)
        feedback = (draws < probs).astype(np.int64)

        results = []
        for row, session in enumerate(sessions):
            fb = feedback[row]
            reward = reward_from_feedback(fb)
            session.temper, left = temper_update(session.temper, fb,
                                                 self.config.temper_alpha)
            session.depth += 1
            positives = actions[row][fb == 1]
            session.history = np.concatenate([session.history, positives])
            session.done = left or session.depth >= self.config.max_depth
            results.append(StepResult(feedback=fb, reward=reward,
                                      done=session.done,
                                      next_observation=session.observation()))
        return results
