"""Experiment orchestration: train/evaluate protocol, metrics, result files.

An experiment fits two simulated environments (one on the temporally earlier
training split, one on the full log), trains the chosen algorithm against the
first, and periodically evaluates the greedy policy against the second.
Everything is seeded; a run writes

    config.json        resolved experiment configuration
    losses.csv         per-iteration training losses
    metrics.csv        per-evaluation aggregate metrics
    eval_sessions.csv  per-session totals behind each evaluation round
    policy.npz/.json   final policy checkpoint
    env_train.npz / env_eval.npz  response-model checkpoints + sidecars
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nnkernel as nk
from .agents import TrainConfig, Trainer, build_agent
from .datasets import SessionLog, SynthConfig, generate_synthetic, load_session_log, temporal_split
from .environment import (
    EnvConfig,
    ResponseFitConfig,
    ResponseModel,
    ResponseModelConfig,
    SimulatedEnvironment,
    UserPool,
    fit_response_model,
)
from .policy import Policy, PolicyConfig

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("iteration", "algo", "seed", "mean_total_reward", "mean_depth",
                   "reward_variance")
LOSS_COLUMNS = ("iteration", "L_TD", "L_QMax", "L_Hyper", "L_BCE", "aux")
SESSION_COLUMNS = ("iteration", "session", "total_reward", "depth")


@dataclass
class SessionMetrics:
    total_reward: float
    depth: int


@dataclass
class AggregateMetrics:
    mean_total_reward: float
    mean_depth: float
    reward_variance: float
    sessions: list[SessionMetrics] = field(default_factory=list)

    @classmethod
    def from_sessions(cls, sessions: list[SessionMetrics]) -> "AggregateMetrics":
        totals = np.array([s.total_reward for s in sessions], dtype=float)
        depths = np.array([s.depth for s in sessions], dtype=float)
        return cls(mean_total_reward=float(totals.mean()),
                   mean_depth=float(depths.mean()),
                   reward_variance=float(totals.var()),
                   sessions=sessions)


@dataclass
class EnvSettings:
    temper_budget: float = 10.0
    temper_alpha: float = 2.0
    max_depth: int = 20
    response_dim: int = 32
    response_heads: int = 1
    response_max_history: int = 50
    response_epochs: int = 5
    response_batch: int = 64
    response_lr: float = 1e-2

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ExperimentConfig:
    algorithm: str = "HAC"
    data_path: str | None = None
    synth: SynthConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    env: EnvSettings = field(default_factory=EnvSettings)
    policy_overrides: dict = field(default_factory=dict)
    iterations: int = 5000
    eval_every: int = 500
    eval_sessions: int = 100
    train_fraction: float = 0.8
    seed: int = 0
    out_dir: str = "runs/experiment"

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iteration budget must be positive")
        if self.eval_sessions <= 0:
            raise ValueError("evaluation session count must be positive")

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "data_path": self.data_path,
            "synth": dict(self.synth.__dict__) if self.synth else None,
            "train": self.train.to_dict(),
            "env": self.env.to_dict(),
            "policy_overrides": dict(self.policy_overrides),
            "iterations": self.iterations,
            "eval_every": self.eval_every,
            "eval_sessions": self.eval_sessions,
            "train_fraction": self.train_fraction,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.get("synth"):
            d["synth"] = SynthConfig(**d["synth"])
        if d.get("train"):
            d["train"] = TrainConfig(**d["train"])
        if d.get("env"):
            d["env"] = EnvSettings(**d["env"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate(policy: Policy, environment: SimulatedEnvironment, n_sessions: int,
             seed: int) -> AggregateMetrics:
    """Run sessions to termination under the greedy policy and aggregate.

    The policy runs deterministically (zero latent noise, top-k selection);
    neither the policy nor the environment parameters are touched.
    """
    environment.reset(n_sessions, seed=seed)
    totals = np.zeros(n_sessions)
    depths = np.zeros(n_sessions, dtype=int)
    while True:
        active = environment.active_indices()
        if not active:
            break
        observations = [environment.sessions[i].observation() for i in active]
        action, _, _ = policy.act(observations, sigma=0.0, z_mode="deterministic",
                                  select_mode="topk")
        results = environment.step_indices(active, action.items)
        for i, res in zip(active, results):
            totals[i] += res.reward
            depths[i] += 1
    sessions = [SessionMetrics(float(t), int(d)) for t, d in zip(totals, depths)]
    return AggregateMetrics.from_sessions(sessions)


def emit_results(records: list[dict], path, columns: tuple[str, ...]) -> None:
    """Write records as CSV with the exact declared header; overwrites."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for rec in records:
            writer.writerow({c: rec.get(c, "") for c in columns})


def load_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _loss_row(iteration: int, report: dict) -> dict:
    aux = "|".join(f"{k[4:]}={report[k]:.6g}" for k in sorted(report)
                   if k.startswith("aux_"))
    row = {"iteration": iteration, "aux": aux}
    for key in ("L_TD", "L_QMax", "L_Hyper", "L_BCE"):
        row[key] = f"{report[key]:.10g}" if key in report else ""
    return row


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[dict]
    out_dir: Path

    def final_metrics(self) -> dict:
        return self.metrics[-1] if self.metrics else {}


def _load_log(config: ExperimentConfig) -> SessionLog:
    if config.data_path:
        return load_session_log(config.data_path)
    synth = config.synth if config.synth is not None else SynthConfig(seed=config.seed)
    return generate_synthetic(synth)


def build_policy_config(log: SessionLog, overrides: dict) -> PolicyConfig:
    base = dict(catalog_size=log.catalog_size, slate_size=log.list_size,
                user_feature_cards=log.feature_cards)
    base.update(overrides)
    return PolicyConfig(**base)


def fit_environments(log: SessionLog, config: ExperimentConfig
                     ) -> tuple[SimulatedEnvironment, SimulatedEnvironment,
                                SessionLog, dict]:
    """Fit the training-split and full-data environments per the protocol."""
    train_log, _ = temporal_split(log, config.train_fraction)
    es = config.env
    rm_config = ResponseModelConfig(
        catalog_size=log.catalog_size, user_feature_cards=log.feature_cards,
        dim=es.response_dim, heads=es.response_heads,
        max_history=es.response_max_history,
        dtype=config.policy_overrides.get("dtype", "float64"))
    fit_cfg = ResponseFitConfig(epochs=es.response_epochs, batch_size=es.response_batch,
                                lr=es.response_lr, seed=config.seed)
    train_model, train_losses = fit_response_model(train_log, rm_config, fit_cfg)
    eval_model, eval_losses = fit_response_model(log, rm_config, fit_cfg)

    env_config = EnvConfig(slate_size=log.list_size, temper_budget=es.temper_budget,
                           temper_alpha=es.temper_alpha, max_depth=es.max_depth,
                           seed=config.seed)
    train_env = SimulatedEnvironment(train_model, UserPool(train_log), env_config)
    eval_env = SimulatedEnvironment(eval_model, UserPool(log),
                                    replace(env_config, seed=config.seed + 1))
    info = {"train_env_losses": train_losses, "eval_env_losses": eval_losses}
    return train_env, eval_env, train_log, info


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))

    log = _load_log(config)
    train_env, eval_env, train_log, env_info = fit_environments(log, config)

    policy_config = build_policy_config(log, config.policy_overrides)
    agent = build_agent(config.algorithm, policy_config, config.train,
                        seed=config.seed)
    trainer = Trainer(
        agent,
        env=None if config.algorithm == "OfflineSL" else train_env,
        offline_log=train_log if config.algorithm == "OfflineSL" else None,
        seed=config.seed)

    loss_rows: list[dict] = []
    metric_rows: list[dict] = []
    session_rows: list[dict] = []

    def record_eval(iteration: int) -> None:
        agg = evaluate(agent.policy, eval_env, config.eval_sessions,
                       seed=config.seed + iteration)
        metric_rows.append({
            "iteration": iteration, "algo": config.algorithm, "seed": config.seed,
            "mean_total_reward": f"{agg.mean_total_reward:.10g}",
            "mean_depth": f"{agg.mean_depth:.10g}",
            "reward_variance": f"{agg.reward_variance:.10g}",
        })
        for i, s in enumerate(agg.sessions):
            session_rows.append({"iteration": iteration, "session": i,
                                 "total_reward": f"{s.total_reward:.10g}",
                                 "depth": s.depth})

    record_eval(0)
    for _ in range(config.iterations):
        report = trainer.run_iteration()
        loss_rows.append(_loss_row(trainer.iteration, report))
        if trainer.iteration % config.eval_every == 0:
            record_eval(trainer.iteration)
    if config.iterations % config.eval_every != 0:
        record_eval(config.iterations)

    emit_results(loss_rows, out / "losses.csv", LOSS_COLUMNS)
    emit_results(metric_rows, out / "metrics.csv", METRICS_COLUMNS)
    emit_results(session_rows, out / "eval_sessions.csv", SESSION_COLUMNS)

    sidecar = {"gamma": config.train.gamma, "seed": config.seed,
               "env": config.env.to_dict(), "slate_size": log.list_size,
               "catalog_size": log.catalog_size}
    agent.policy.save(out / "policy.npz", sidecar={"algorithm": config.algorithm,
                                                   **sidecar})
    train_env.model.save(out / "env_train.npz", sidecar=sidecar)
    eval_env.model.save(out / "env_eval.npz", sidecar=sidecar)
    logger.info("experiment %s finished: %s", config.algorithm,
                metric_rows[-1] if metric_rows else "no evaluations")
    return ExperimentResult(config=config, metrics=metric_rows, out_dir=out)
