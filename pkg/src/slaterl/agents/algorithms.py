"""Agent compositions and the interaction/training loop.

All algorithms share the same policy backbone and critic machinery and differ
only in which losses they apply and which action space feeds the critic:

    HAC       critic on pooled lists, value-max actor, latent alignment,
              item supervision
    DDPG      critic on stored latents, value-max actor
    TD3       DDPG with twin critics and a min bootstrap target
    DDPG-RA   DDPG plus inverse-dynamics alignment of consecutive states
    A2C       on-policy slate policy gradient with a state-value critic
    OnlineSL  item supervision on fresh rollouts
    OfflineSL item supervision on logged data

Per training step the losses run in a fixed order (critic, actor, alignment,
supervision), each with its own Adam optimizer, with target networks softly
updated at the end. A phase whose learning rate (or alignment weight) is zero
is skipped entirely, which keeps random-stream consumption identical across
ablations that only zero out phases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .. import nnkernel as nk
from ..nnkernel import Adam, Tensor
from ..critic import QNetwork, TargetPair, VNetwork
from ..datasets import SessionLog
from ..environment import SimulatedEnvironment
from ..policy import Policy, PolicyConfig
from .buffer import DEFAULT_CAPACITY, DEFAULT_MIN_FILL, ReplayBuffer, TransitionBatch
from . import losses as L

logger = logging.getLogger(__name__)

ALGORITHMS = ("HAC", "DDPG", "TD3", "A2C", "OnlineSL", "OfflineSL", "DDPG-RA")

Q_DIVERGENCE_THRESHOLD = 15.0  # gamma=0.9 over <=20 steps bounds true returns by 10


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "HAC"
    gamma: float = 0.9
    sigma_explore: float = 0.1
    selection_mode: str = "topk"
    tau: float = 0.01
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    supervision_lr: float = 1e-4
    alignment_lr: float = 1e-4
    lambda_align: float = 0.1
    batch_size: int = 64
    episodes_per_step: int = 32
    buffer_capacity: int = DEFAULT_CAPACITY
    buffer_min_fill: int = DEFAULT_MIN_FILL
    critic_action_space: str = "auto"   # auto | effect | hyper

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; "
                             f"expected one of {ALGORITHMS}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        for name in ("actor_lr", "critic_lr", "supervision_lr", "alignment_lr",
                     "lambda_align", "sigma_explore"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.critic_action_space not in ("auto", "effect", "hyper"):
            raise ValueError("critic_action_space must be auto|effect|hyper")

    def resolved_action_space(self) -> str:
        if self.critic_action_space != "auto":
            return self.critic_action_space
        return "effect" if self.algorithm == "HAC" else "hyper"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class AgentBase:
    """Common surface: exploration settings plus a train_step over a batch."""

    uses_buffer = True

    def __init__(self, policy: Policy, config: TrainConfig):
        config.validate()
        self.policy = policy
        self.config = config
        self._warned_divergence = False

    # -- exploration defaults per algorithm -------------------------------

    def rollout_modes(self) -> tuple[float, str, str]:
        """(sigma, latent mode, selection mode) used when collecting episodes."""
        sigma = self.config.sigma_explore
        z_mode = "gaussian" if sigma > 0 else "deterministic"
        return sigma, z_mode, self.config.selection_mode

    def train_step(self, batch: TransitionBatch) -> dict:
        raise NotImplementedError

    # -- shared helpers -----------------------------------------------------

    def _all_params(self) -> list[Tensor]:
        return list(self.policy.parameters())

    def _run_phase(self, loss: Tensor, opt: Adam) -> float:
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"loss diverged to {value}")
        nk.zero_grads(self._all_params())
        loss.backward()
        opt.step()
        nk.zero_grads(self._all_params())
        return value

    def _check_divergence(self, q_abs_max: float) -> None:
        if q_abs_max > Q_DIVERGENCE_THRESHOLD and not self._warned_divergence:
            logger.warning(
                "critic values reached |Q|=%.2f, beyond the %.1f bound implied "
                "by the reward range and discount; training may be diverging",
                q_abs_max, Q_DIVERGENCE_THRESHOLD)
            self._warned_divergence = True


class DdpgFamilyAgent(AgentBase):
    """Deterministic-latent actor-critic family: HAC, DDPG, TD3, DDPG-RA."""

    def __init__(self, policy: Policy, config: TrainConfig, seed: int):
        super().__init__(policy, config)
        cfg = config
        seed_rng = np.random.default_rng(seed)
        dtype = policy.config.np_dtype
        d = policy.config.state_dim

        n_critics = 2 if cfg.algorithm == "TD3" else 1
        self.qnets = [QNetwork(d, seed=int(seed_rng.integers(2**31)), dtype=dtype)
                      for _ in range(n_critics)]
        self.target_policy = policy.clone()
        self.policy_pair = TargetPair(policy, self.target_policy, cfg.tau)
        self.target_qnets = [QNetwork(d, seed=0, dtype=dtype) for _ in range(n_critics)]
        self.q_pairs = [TargetPair(live, target, cfg.tau)
                        for live, target in zip(self.qnets, self.target_qnets)]

        self.use_supervision = cfg.algorithm == "HAC"
        self.alignment = {"HAC": "latent", "DDPG-RA": "inverse-dynamics"}.get(
            cfg.algorithm)
        self.ra_head = None
        if self.alignment == "inverse-dynamics":
            self.ra_head = nk.MLP(
                (2 * d, 128, d),
                rng=np.random.default_rng(int(seed_rng.integers(2**31))), dtype=dtype)

        critic_params = {}
        for i, qnet in enumerate(self.qnets):
            for name, p in qnet.named_parameters().items():
                critic_params[f"critic{i}.{name}"] = p
        self.opt_actor = Adam(policy.named_parameters(), lr=cfg.actor_lr)
        self.opt_critic = Adam(critic_params, lr=cfg.critic_lr)
        align_params = dict(policy.named_parameters())
        if self.ra_head is not None:
            # the inverse-dynamics loss reads states and the kernel but never
            # the latent-action head, so the optimizer must not own it
            align_params = {n: p for n, p in align_params.items()
                            if not n.startswith("head.")}
            align_params.update(
                {f"ra.{n}": p for n, p in self.ra_head.named_parameters().items()})
        self.opt_align = Adam(align_params, lr=cfg.alignment_lr)
        self.opt_supervise = Adam(policy.named_parameters(), lr=cfg.supervision_lr)

    def _all_params(self):
        params = list(self.policy.parameters())
        for qnet in self.qnets:
            params.extend(qnet.parameters())
        if self.ra_head is not None:
            params.extend(self.ra_head.parameters())
        return params

    def train_step(self, batch: TransitionBatch) -> dict:
        cfg = self.config
        report: dict = {}

        if cfg.critic_lr > 0:
            loss, info = L.loss_td(
                batch, policy=self.policy, target_policy=self.target_policy,
                qnets=self.qnets, target_qnets=self.target_qnets,
                gamma=cfg.gamma, action_space=cfg.resolved_action_space())
            report["L_TD"] = self._run_phase(loss, self.opt_critic)
            report["q_abs_max"] = info["q_abs_max"]
            self._check_divergence(info["q_abs_max"])

        if cfg.actor_lr > 0:
            loss = L.loss_qmax(batch, policy=self.policy, qnets=self.qnets)
            report["L_QMax"] = self._run_phase(loss, self.opt_actor)

        if self.alignment == "latent" and cfg.alignment_lr > 0 and cfg.lambda_align > 0:
            loss = nk.mul(L.loss_hyper(batch, policy=self.policy), cfg.lambda_align)
            report["L_Hyper"] = self._run_phase(loss, self.opt_align)
        elif self.alignment == "inverse-dynamics" and cfg.alignment_lr > 0:
            loss = L.loss_ra_align(batch, policy=self.policy, head=self.ra_head)
            report["aux_ra"] = self._run_phase(loss, self.opt_align)

        if self.use_supervision and cfg.supervision_lr > 0:
            loss = L.loss_bce(batch, policy=self.policy)
            report["L_BCE"] = self._run_phase(loss, self.opt_supervise)

        self.policy_pair.soft_update()
        for pair in self.q_pairs:
            pair.soft_update()
        return report


class A2CAgent(AgentBase):
    """On-policy advantage actor-critic on the discrete list space."""

    uses_buffer = False

    def __init__(self, policy: Policy, config: TrainConfig, seed: int):
        super().__init__(policy, config)
        self.vnet = VNetwork(policy.config.state_dim, seed=seed,
                             dtype=policy.config.np_dtype)
        self.opt_actor = Adam(policy.named_parameters(), lr=config.actor_lr)
        self.opt_critic = Adam(self.vnet.named_parameters(), lr=config.critic_lr)

    def rollout_modes(self):
        # exploration lives on the list sampling, not the latent
        return 0.0, "deterministic", "categorical"

    def _all_params(self):
        return list(self.policy.parameters()) + list(self.vnet.parameters())

    def train_step(self, batch: TransitionBatch) -> dict:
        cfg = self.config
        report: dict = {}
        # both losses share one advantage estimate from the pre-update value net
        actor_loss, value_loss, info = L.loss_pg_advantage(
            batch, policy=self.policy, vnet=self.vnet, gamma=cfg.gamma)
        if cfg.critic_lr > 0:
            report["L_TD"] = self._run_phase(value_loss, self.opt_critic)
        if cfg.actor_lr > 0:
            report["aux_pg"] = self._run_phase(actor_loss, self.opt_actor)
        self._check_divergence(info["q_abs_max"])
        return report


class SupervisedAgent(AgentBase):
    """Item-level supervision only (shared by the online and offline variants)."""

    uses_buffer = False

    def __init__(self, policy: Policy, config: TrainConfig, seed: int,
                 online: bool):
        super().__init__(policy, config)
        self.online = online
        self.opt_supervise = Adam(policy.named_parameters(), lr=config.supervision_lr)

    def train_step(self, batch: TransitionBatch) -> dict:
        if self.config.supervision_lr <= 0:
            return {}
        loss = L.loss_bce(batch, policy=self.policy)
        return {"L_BCE": self._run_phase(loss, self.opt_supervise)}


def build_agent(algorithm: str, policy_config: PolicyConfig, config: TrainConfig,
                seed: int) -> AgentBase:
    """Construct the named algorithm with deterministic seeding."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    config = replace(config, algorithm=algorithm)
    seed_rng = np.random.default_rng(seed)
    policy = Policy(policy_config, seed=int(seed_rng.integers(2**31)))
    agent_seed = int(seed_rng.integers(2**31))
    if algorithm in ("HAC", "DDPG", "TD3", "DDPG-RA"):
        return DdpgFamilyAgent(policy, config, seed=agent_seed)
    if algorithm == "A2C":
        return A2CAgent(policy, config, seed=agent_seed)
    if algorithm == "OnlineSL":
        return SupervisedAgent(policy, config, seed=agent_seed, online=True)
    return SupervisedAgent(policy, config, seed=agent_seed, online=False)


def train_step(agent: AgentBase, data: TransitionBatch) -> dict:
    """Run one optimization step of the agent's algorithm on ``data``."""
    return agent.train_step(data)


class Trainer:
    """Alternates episode collection with training updates.

    Off-policy agents push every fresh transition into the replay buffer and
    sample uniformly once it is filled; on-policy agents consume the newest
    rollout batch exactly once; the offline supervised agent never touches
    the environment and draws mini-batches from the logged data instead.
    """

    def __init__(self, agent: AgentBase, env: SimulatedEnvironment | None = None,
                 offline_log: SessionLog | None = None, seed: int = 0):
        self.agent = agent
        self.env = env
        self.offline_log = offline_log
        cfg = agent.config
        self.offline = cfg.algorithm == "OfflineSL"
        if self.offline and offline_log is None:
            raise ValueError("OfflineSL needs an offline log")
        if not self.offline and env is None:
            raise ValueError("online algorithms need an environment")
        seeds = np.random.SeedSequence(seed).spawn(3)
        self._explore_rng = np.random.default_rng(seeds[0])
        self._sample_rng = np.random.default_rng(seeds[1])
        self._offline_rng = np.random.default_rng(seeds[2])
        self.iteration = 0

        pcfg = agent.policy.config
        self.buffer = None
        if agent.uses_buffer:
            self.buffer = ReplayBuffer(
                cfg.buffer_capacity, cfg.buffer_min_fill,
                feature_dim=len(pcfg.user_feature_cards),
                history_len=pcfg.max_history, slate_size=pcfg.slate_size,
                latent_dim=pcfg.state_dim, dtype=pcfg.np_dtype)
        if not self.offline:
            self.env.reset(cfg.episodes_per_step)

    # -- rollout -----------------------------------------------------------

    def _pad_history(self, history: np.ndarray) -> np.ndarray:
        width = self.agent.policy.config.max_history
        row = np.full(width, -1, dtype=np.int64)
        recent = np.asarray(history)[-width:]
        if len(recent):
            row[width - len(recent):] = recent
        return row

    def collect_step(self) -> TransitionBatch:
        """Advance all parallel sessions one step under the current policy."""
        env = self.env
        observations = [s.observation() for s in env.sessions]
        sigma, z_mode, select_mode = self.agent.rollout_modes()
        action, hyper, _ = self.agent.policy.act(
            observations, sigma=sigma, z_mode=z_mode, select_mode=select_mode,
            rng=self._explore_rng)
        results = env.step(action.items)

        n = len(results)
        pcfg = self.agent.policy.config
        batch = TransitionBatch(
            features=np.stack([o.user_features for o in observations]),
            history=np.stack([self._pad_history(o.history) for o in observations]),
            hyper=hyper.sample.values.copy(),
            action=action.items.copy(),
            feedback=np.stack([r.feedback for r in results]).astype(pcfg.np_dtype),
            reward=np.array([r.reward for r in results], dtype=pcfg.np_dtype),
            next_history=np.stack(
                [self._pad_history(r.next_observation.history) for r in results]),
            done=np.array([float(r.done) for r in results], dtype=pcfg.np_dtype),
        )
        if self.buffer is not None:
            for i in range(n):
                self.buffer.push(
                    features=batch.features[i], history=batch.history[i],
                    hyper=batch.hyper[i], action=batch.action[i],
                    feedback=batch.feedback[i], reward=batch.reward[i],
                    next_history=batch.next_history[i], done=batch.done[i])
        done_idx = [i for i, r in enumerate(results) if r.done]
        if done_idx:
            env.reset_indices(done_idx)
        return batch

    def _offline_batch(self) -> TransitionBatch:
        cfg = self.agent.config
        pcfg = self.agent.policy.config
        records = self.offline_log.records
        idx = self._offline_rng.integers(0, len(records), size=cfg.batch_size)
        chosen = [records[i] for i in idx]
        history = np.stack([self._pad_history(r.history) for r in chosen])
        return TransitionBatch(
            features=np.stack([r.user_features for r in chosen]),
            history=history,
            hyper=np.zeros((len(chosen), pcfg.state_dim), dtype=pcfg.np_dtype),
            action=np.stack([r.exposed for r in chosen]),
            feedback=np.stack([r.feedback for r in chosen]).astype(pcfg.np_dtype),
            reward=np.zeros(len(chosen), dtype=pcfg.np_dtype),
            next_history=history,
            done=np.ones(len(chosen), dtype=pcfg.np_dtype),
        )

    # -- main loop -----------------------------------------------------------

    def run_iteration(self) -> dict:
        """One unit of Algorithm-style training: collect, then update."""
        self.iteration += 1
        cfg = self.agent.config
        if self.offline:
            return self.agent.train_step(self._offline_batch())
        rollout = self.collect_step()
        if self.buffer is not None:
            if not self.buffer.ready:
                return {"skipped": "buffer below fill threshold"}
            batch = self.buffer.sample(cfg.batch_size, rng=self._sample_rng)
            return self.agent.train_step(batch)
        return self.agent.train_step(rollout)

    def run(self, iterations: int, report_hook=None) -> list[dict]:
        reports = []
        for _ in range(iterations):
            report = self.run_iteration()
            report["iteration"] = self.iteration
            reports.append(report)
            if report_hook is not None:
                report_hook(self.iteration, report)
        return reports
