"""Interaction-log loading, validation, preprocessing, and synthetic logs.

The unified on-disk format is a UTF-8 TSV with a header line and columns

    session_id  user_id  user_features  history  exposed  feedback  timestamp

where ``user_features``, ``history``, ``exposed`` and ``feedback`` are
comma-separated integers (``history`` may be empty). Every record in one log
exposes the same number of items ``k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DEFAULT_MAX_HISTORY = 50

_COLUMNS = ("session_id", "user_id", "user_features", "history",
            "exposed", "feedback", "timestamp")

BINARIZE_RULES = ("rating_gt_3", "watch_ratio_gt_0.8", "identity")


class LogFormatError(ValueError):
    """Malformed log content; message carries the offending line number."""


@dataclass
class InteractionRecord:
    session_id: str
    user_id: str | None
    user_features: np.ndarray  # int codes, one per feature slot
    history: np.ndarray        # item ids of earlier positives, oldest first
    exposed: np.ndarray        # item ids shown, length k
    feedback: np.ndarray       # 0/1, length k
    timestamp: int

    def validate(self, catalog_size: int, list_size: int) -> None:
        if len(self.exposed) != list_size or len(self.feedback) != list_size:
            raise LogFormatError(
                f"record {self.session_id}@{self.timestamp}: exposed/feedback "
                f"length {len(self.exposed)}/{len(self.feedback)} != k={list_size}"
            )
        if not np.isin(self.feedback, (0, 1)).all():
            raise LogFormatError(f"record {self.session_id}: non-binary feedback")
        for name, ids in (("history", self.history), ("exposed", self.exposed)):
            if len(ids) and (ids.min() < 0 or ids.max() >= catalog_size):
                raise LogFormatError(
                    f"record {self.session_id}: {name} item id outside catalog "
                    f"[0, {catalog_size})"
                )


@dataclass
class SessionLog:
    catalog_size: int
    list_size: int
    records: list[InteractionRecord]
    feature_cards: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.feature_cards and self.records:
            feats = np.stack([r.user_features for r in self.records])
            self.feature_cards = tuple(int(c) + 1 for c in feats.max(axis=0))

    def __len__(self) -> int:
        return len(self.records)

    def validate(self) -> None:
        if self.catalog_size < self.list_size:
            raise LogFormatError("catalog smaller than the recommendation list")
        last_ts = None
        for rec in self.records:
            rec.validate(self.catalog_size, self.list_size)
            if last_ts is not None and rec.timestamp < last_ts:
                raise LogFormatError("records not sorted by timestamp")
            last_ts = rec.timestamp

    def positive_rate(self) -> float:
        total = sum(len(r.feedback) for r in self.records)
        pos = sum(int(r.feedback.sum()) for r in self.records)
        return pos / total if total else 0.0


def _parse_int_list(text: str, line_no: int, column: str) -> np.ndarray:
    text = text.strip()
    if not text:
        return np.array([], dtype=np.int64)
    try:
        return np.array([int(tok) for tok in text.split(",")], dtype=np.int64)
    except ValueError as exc:
        raise LogFormatError(f"line {line_no}: bad integer list in {column!r}") from exc


def load_session_log(path, catalog_size: int | None = None,
                     feature_cards: tuple[int, ...] | None = None) -> SessionLog:
    """Load and validate a unified TSV log; ``k`` is inferred and must be uniform."""
    path = Path(path)
    records: list[InteractionRecord] = []
    list_size = None
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != _COLUMNS:
            raise LogFormatError(f"line 1: expected header {_COLUMNS}, got {tuple(header)}")
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(_COLUMNS):
                raise LogFormatError(
                    f"line {line_no}: expected {len(_COLUMNS)} columns, got {len(parts)}"
                )
            sid, uid, feats, hist, exposed, feedback, ts = parts
            exposed_ids = _parse_int_list(exposed, line_no, "exposed")
            labels = _parse_int_list(feedback, line_no, "feedback")
            if len(exposed_ids) != len(labels):
                raise LogFormatError(
                    f"line {line_no}: exposed has {len(exposed_ids)} items but "
                    f"feedback has {len(labels)} labels"
                )
            if list_size is None:
                list_size = len(exposed_ids)
            elif len(exposed_ids) != list_size:
                raise LogFormatError(
                    f"line {line_no}: list size {len(exposed_ids)} != {list_size} "
                    "inferred from earlier records"
                )
            try:
                timestamp = int(ts)
            except ValueError as exc:
                raise LogFormatError(f"line {line_no}: bad timestamp {ts!r}") from exc
            records.append(InteractionRecord(
                session_id=sid,
                user_id=uid or None,
                user_features=_parse_int_list(feats, line_no, "user_features"),
                history=_parse_int_list(hist, line_no, "history"),
                exposed=exposed_ids,
                feedback=labels,
                timestamp=timestamp,
            ))
    if not records:
        raise LogFormatError("log contains no records")
    if catalog_size is None:
        catalog_size = int(max(
            max((int(r.exposed.max()) for r in records), default=0),
            max((int(r.history.max()) for r in records if len(r.history)), default=0),
        )) + 1
    records.sort(key=lambda r: r.timestamp)
    log = SessionLog(catalog_size, list_size, records,
                     feature_cards=feature_cards or ())
    log.validate()
    return log


def save_session_log(log: SessionLog, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    def ints(arr):
        return ",".join(str(int(v)) for v in arr)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(_COLUMNS) + "\n")
        for r in log.records:
            fh.write("\t".join([
                r.session_id, r.user_id or "", ints(r.user_features), ints(r.history),
                ints(r.exposed), ints(r.feedback), str(r.timestamp),
            ]) + "\n")


def binarize_feedback(raw_value: float, rule: str) -> int:
    """Map a raw feedback value to a binary label under the given rule."""
    if rule == "rating_gt_3":
        if not 0 <= raw_value <= 5:
            raise ValueError(f"rating {raw_value} outside [0, 5]")
        return int(raw_value > 3)
    if rule == "watch_ratio_gt_0.8":
        if raw_value < 0:
            raise ValueError(f"watch ratio {raw_value} must be non-negative")
        return int(raw_value > 0.8)
    if rule == "identity":
        if raw_value not in (0, 1):
            raise ValueError(f"identity rule expects 0/1, got {raw_value}")
        return int(raw_value)
    raise ValueError(f"unknown binarization rule {rule!r}; use one of {BINARIZE_RULES}")


def _item_counts(records: list[InteractionRecord], catalog_size: int) -> np.ndarray:
    counts = np.zeros(catalog_size, dtype=np.int64)
    for r in records:
        np.add.at(counts, r.exposed, 1)
    return counts


def kcore_filter(log: SessionLog, threshold: int) -> SessionLog:
    """Drop items occurring fewer than ``threshold`` times, to a fixpoint.

    A record survives only if its full exposed list survives (list sizes stay
    uniform at k). Histories are purged of removed items. Iterates until no
    surviving item is below the threshold.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    records = log.records
    while records:
        counts = _item_counts(records, log.catalog_size)
        keep_item = counts >= threshold
        changed = False
        kept_records = []
        for r in records:
            if not keep_item[r.exposed].all():
                changed = True
                continue
            if len(r.history) and not keep_item[r.history].all():
                r = replace(r, history=r.history[keep_item[r.history]])
                changed = True
            kept_records.append(r)
        records = kept_records
        if not changed:
            break
    result = SessionLog(log.catalog_size, log.list_size, records,
                        feature_cards=log.feature_cards)
    if not result.records:
        raise ValueError(f"k-core filtering at threshold {threshold} removed every record")
    return result


@dataclass
class Event:
    """One raw interaction before segmentation into fixed-size lists."""
    user_id: str
    user_features: np.ndarray
    item_id: int
    label: int
    timestamp: int


def segment_sessions(events: list[Event], list_size: int,
                     max_history: int = DEFAULT_MAX_HISTORY) -> SessionLog:
    """Cut each user's chronological event stream into length-k records.

    Windows are consecutive and non-overlapping; a trailing remainder shorter
    than ``list_size`` is dropped. The history of a record contains only the
    positive items strictly before its window, capped at ``max_history`` by
    keeping the most recent.
    """
    by_user: dict[str, list[Event]] = {}
    for ev in events:
        by_user.setdefault(ev.user_id, []).append(ev)
    records: list[InteractionRecord] = []
    max_item = 0
    for user_id, stream in by_user.items():
        stream = sorted(stream, key=lambda e: e.timestamp)
        history: list[int] = []
        for start in range(0, len(stream) - list_size + 1, list_size):
            window = stream[start:start + list_size]
            records.append(InteractionRecord(
                session_id=user_id,
                user_id=user_id,
                user_features=window[0].user_features.copy(),
                history=np.array(history[-max_history:], dtype=np.int64),
                exposed=np.array([e.item_id for e in window], dtype=np.int64),
                feedback=np.array([e.label for e in window], dtype=np.int64),
                timestamp=window[-1].timestamp,
            ))
            history.extend(e.item_id for e in window if e.label == 1)
        max_item = max(max_item, max((e.item_id for e in stream), default=0))
    records.sort(key=lambda r: r.timestamp)
    return SessionLog(max_item + 1, list_size, records)


def temporal_split(log: SessionLog, fraction: float) -> tuple[SessionLog, SessionLog]:
    """Split at the ceil(fraction * n) boundary in timestamp order.

    Ties are broken stably by (timestamp, session_id, input position), so the
    two parts always partition the input.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    if len(log.records) < 2:
        raise ValueError("need at least 2 records to split")
    order = sorted(range(len(log.records)),
                   key=lambda i: (log.records[i].timestamp, log.records[i].session_id, i))
    cut = math.ceil(fraction * len(order))
    train_idx, eval_idx = order[:cut], order[cut:]
    make = lambda idx: SessionLog(log.catalog_size, log.list_size,
                                  [log.records[i] for i in idx],
                                  feature_cards=log.feature_cards)
    return make(train_idx), make(eval_idx)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 50
    n_items: int = 200
    k: int = 5
    n_records: int = 2000
    latent_dim: int = 8
    noise_scale: float = 1.0
    seed: int = 0
    max_history: int = DEFAULT_MAX_HISTORY

    def validate(self) -> None:
        if self.n_items < self.k:
            raise ValueError("n_items must be >= k")
        if min(self.n_users, self.n_items, self.k, self.n_records, self.latent_dim) <= 0:
            raise ValueError("all counts must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


def generate_synthetic(config: SynthConfig) -> SessionLog:
    """Synthesize a log from a planted latent-factor model.

    User and item vectors are drawn so the preference dot product has unit
    variance. Exposure is noisy top-k under Gumbel perturbation; a label is 1
    when ``dot + noise_scale * logistic_noise > 0``, i.e. Bernoulli with
    probability sigmoid(dot / noise_scale), degenerating to the sign of the
    dot product when the noise scale is zero. Fully deterministic per seed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    scale = config.latent_dim ** -0.25
    users = rng.normal(0.0, scale, size=(config.n_users, config.latent_dim))
    items = rng.normal(0.0, scale, size=(config.n_items, config.latent_dim))
    # two coarse categorical features derived from the user vector, so that
    # static features carry real (if weak) preference signal
    feature_a = (users[:, 0] > 0).astype(np.int64)
    feature_b = (users[:, 1 % config.latent_dim] > 0).astype(np.int64) + 2 * (
        users[:, 2 % config.latent_dim] > 0).astype(np.int64)

    histories: list[list[int]] = [[] for _ in range(config.n_users)]
    records: list[InteractionRecord] = []
    for step in range(config.n_records):
        uid = step % config.n_users
        scores = items @ users[uid]
        gumbel = rng.gumbel(0.0, 1.0, size=config.n_items)
        exposed = np.argsort(-(scores + config.noise_scale * gumbel),
                             kind="stable")[:config.k]
        margin = scores[exposed] + config.noise_scale * rng.logistic(0.0, 1.0, size=config.k)
        labels = (margin > 0).astype(np.int64)
        records.append(InteractionRecord(
            session_id=f"u{uid}",
            user_id=f"u{uid}",
            user_features=np.array([feature_a[uid], feature_b[uid]], dtype=np.int64),
            history=np.array(histories[uid][-config.max_history:], dtype=np.int64),
            exposed=exposed.astype(np.int64),
            feedback=labels,
            timestamp=step,
        ))
        histories[uid].extend(int(i) for i in exposed[labels == 1])
    log = SessionLog(config.n_items, config.k, records, feature_cards=(2, 4))
    log.validate()
    return log


def load_event_stream(path, rule: str = "identity") -> list[Event]:
    """Load a raw event TSV (user_id, user_features, item_id, value, timestamp),
    binarizing the value column with the given rule."""
    path = Path(path)
    events = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        expected = ["user_id", "user_features", "item_id", "value", "timestamp"]
        if header != expected:
            raise LogFormatError(f"line 1: expected header {expected}, got {header}")
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise LogFormatError(f"line {line_no}: expected 5 columns")
            uid, feats, item, value, ts = parts
            try:
                label = binarize_feedback(float(value), rule)
            except ValueError as exc:
                raise LogFormatError(f"line {line_no}: {exc}") from exc
            events.append(Event(
                user_id=uid,
                user_features=_parse_int_list(feats, line_no, "user_features"),
                item_id=int(item),
                label=label,
                timestamp=int(ts),
            ))
    return events
