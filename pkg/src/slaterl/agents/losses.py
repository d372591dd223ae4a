"""Training objectives over shared policy/critic components.

Gradient routing is the load-bearing part here:

* the temporal-difference loss trains critics only (states and pooled action
  vectors enter as constants),
* the value-maximization loss trains the policy while the critics are frozen,
* the latent-alignment and item-supervision losses train the policy including
  the item kernel table.

Bootstrap targets always come from target networks; the next action is
produced greedily (deterministic latent + top-k) by the target policy.
"""

from __future__ import annotations

import numpy as np

from .. import nnkernel as nk
from ..nnkernel import Tensor
from ..critic import QNetwork, VNetwork, inverse_pool
from ..policy import Policy, select_items
from .buffer import TransitionBatch

BCE_CLAMP = 1e-7


def td_target(reward: np.ndarray, next_q: np.ndarray, gamma: float,
              done: np.ndarray) -> np.ndarray:
    """Bootstrapped target r + gamma * (1 - d) * Q'; terminal rows pass r."""
    return reward + gamma * (1.0 - done) * next_q


def greedy_target_latent(target_policy: Policy, batch: TransitionBatch,
                         action_space: str) -> np.ndarray:
    """Latent input of the target critic for the next state, no gradients.

    effect: greedily select the next list with the target policy and pool its
    kernel rows. hyper: use the target policy's deterministic latent directly.
    """
    with nk.no_grad():
        state = target_policy.encode_state(batch.next_observations())
        latent = target_policy.head(state.vector)
        if action_space == "hyper":
            return latent.values, state.vector.values
        scores = target_policy.score_items(latent)
        greedy = select_items(scores.values, target_policy.config.slate_size, "topk")
        pooled = inverse_pool(greedy.items, target_policy.kernel)
        return pooled.values, state.vector.values


def loss_td(batch: TransitionBatch, *, policy: Policy, target_policy: Policy,
            qnets: list[QNetwork], target_qnets: list[QNetwork], gamma: float,
            action_space: str) -> tuple[Tensor, dict]:
    """Mean squared TD error on the critic(s); gradients reach critics only.

    ``action_space`` selects the critic's view of the taken action: "effect"
    pools the stored list through the item kernel, "hyper" feeds the stored
    latent-action sample. With twin critics the bootstrap target uses their
    elementwise minimum and both regress to it.
    """
    if action_space not in ("effect", "hyper"):
        raise ValueError(f"unknown critic action space {action_space!r}")
    next_latent, next_state = greedy_target_latent(target_policy, batch, action_space)
    with nk.no_grad():
        next_qs = [tq.q_hyper(Tensor(next_state), Tensor(next_latent)).values
                   for tq in target_qnets]
    next_q = next_qs[0] if len(next_qs) == 1 else np.minimum(next_qs[0], next_qs[1])
    target = td_target(batch.reward, next_q, gamma, batch.done)

    with nk.no_grad():
        state = policy.encode_state(batch.observations()).vector
        if action_space == "effect":
            latent = inverse_pool(batch.action, policy.kernel)
        else:
            latent = Tensor(batch.hyper)
    state_const = Tensor(state.values)
    latent_const = Tensor(latent.values)
    target_t = Tensor(target)

    total = None
    q_values = []
    for qnet in qnets:
        q = qnet.q_hyper(state_const, latent_const)
        q_values.append(q.values.copy())
        err = nk.sub(q, target_t)
        term = nk.tmean(nk.mul(err, err))
        total = term if total is None else nk.add(total, term)
    info = {"q_mean": float(np.mean(q_values)), "q_abs_max": float(np.abs(q_values).max())}
    return total, info


def loss_qmax(batch: TransitionBatch, *, policy: Policy, qnets: list[QNetwork],
              training: bool = True) -> Tensor:
    """Negated critic value of the re-inferred latent action.

    The latent is recomputed from the current policy (deterministic head, not
    the stored sample); critic parameters are frozen so gradients reach the
    policy and state encoder only. Twin critics contribute their elementwise
    minimum.
    """
    state = policy.encode_state(batch.observations(), training=training)
    latent = policy.head(state.vector)
    critic_params = [p for qnet in qnets for p in qnet.parameters()]
    with nk.frozen(critic_params):
        q = qnets[0].q_hyper(state.vector, latent)
        if len(qnets) > 1:
            q = nk.minimum(q, qnets[1].q_hyper(state.vector, latent))
    return nk.neg(nk.tmean(q))


def loss_hyper(batch: TransitionBatch, *, policy: Policy,
               training: bool = True) -> Tensor:
    """Squared distance between the latent action and its list reconstruction.

    The list is the greedy selection under the current latent; its pooled
    kernel rows should land close to the latent itself. Gradients flow both
    into the policy (through the latent) and into the item kernel rows
    (through the pooling).
    """
    state = policy.encode_state(batch.observations(), training=training)
    latent = policy.head(state.vector)
    scores = policy.score_items(latent)
    greedy = select_items(scores.values, policy.config.slate_size, "topk")
    pooled = inverse_pool(greedy.items, policy.kernel)
    diff = nk.sub(latent, pooled)
    return nk.tmean(nk.tsum(nk.mul(diff, diff), axis=1))


def loss_bce(batch: TransitionBatch, *, policy: Policy, clamp: float = BCE_CLAMP,
             training: bool = True) -> Tensor:
    """Item-level supervision: binary cross-entropy on catalog softmax scores.

    Per sample, sums y*log P + (1-y)*log(1-P) over the exposed items, with P
    the catalog softmax probability of each item under the current latent;
    returns the negated batch mean. Probabilities are clamped away from 0/1.
    """
    state = policy.encode_state(batch.observations(), training=training)
    latent = policy.head(state.vector)
    scores = policy.score_items(latent)
    probs = nk.clip(nk.softmax(scores, axis=-1), clamp, 1.0 - clamp)
    chosen = nk.take_rows(probs, batch.action)
    y = Tensor(np.asarray(batch.feedback, dtype=chosen.dtype))
    ll = nk.add(nk.mul(y, nk.log(chosen)),
                nk.mul(nk.sub(1.0, y), nk.log(nk.sub(1.0, chosen))))
    return nk.neg(nk.tmean(nk.tsum(ll, axis=1)))


def loss_pg_advantage(batch: TransitionBatch, *, policy: Policy, vnet: VNetwork,
                      gamma: float, training: bool = True
                      ) -> tuple[Tensor, Tensor, dict]:
    """Advantage-weighted slate policy gradient plus the value TD loss.

    advantage = r + gamma * (1 - d) * V(s') - V(s), all evaluated without
    gradients; the actor loss is -mean(advantage * log P(a|s)) with the list
    log-probability decomposed into item log-probabilities. The value loss
    regresses V(s) onto the bootstrapped target with the state detached.
    """
    with nk.no_grad():
        state_const = policy.encode_state(batch.observations()).vector.values
        next_state = policy.encode_state(batch.next_observations()).vector
        v_next = vnet.value(next_state).values
        v_now = vnet.value(Tensor(state_const)).values
    target = td_target(batch.reward, v_next, gamma, batch.done)
    advantage = target - v_now

    state = policy.encode_state(batch.observations(), training=training)
    latent = policy.head(state.vector)
    scores = policy.score_items(latent)
    log_probs = nk.log_softmax(scores, axis=-1)
    list_log_prob = nk.tsum(nk.take_rows(log_probs, batch.action), axis=1)
    actor_loss = nk.neg(nk.tmean(nk.mul(Tensor(advantage), list_log_prob)))

    v = vnet.value(Tensor(state_const))
    err = nk.sub(v, Tensor(target))
    value_loss = nk.tmean(nk.mul(err, err))
    info = {"advantage_mean": float(advantage.mean()),
            "v_mean": float(v_now.mean()), "q_abs_max": float(np.abs(v_now).max())}
    return actor_loss, value_loss, info


def loss_ra_align(batch: TransitionBatch, *, policy: Policy, head: nk.MLP,
                  training: bool = True) -> Tensor:
    """Inverse-dynamics alignment: -mean log P(taken items | s, s').

    The head maps the concatenated consecutive states to a vector in kernel
    space; catalog logits are its dot products with the item kernel, and the
    loss is the negative log-likelihood of the observed list items.
    """
    state = policy.encode_state(batch.observations(), training=training)
    next_state = policy.encode_state(batch.next_observations(), training=training)
    joint = nk.concat([state.vector, next_state.vector], axis=-1)
    predicted = head(joint)
    logits = nk.matmul(predicted, nk.swapaxes(policy.kernel.matrix(), 0, 1))
    log_probs = nk.log_softmax(logits, axis=-1)
    chosen = nk.take_rows(log_probs, batch.action)
    return nk.neg(nk.tmean(nk.tsum(chosen, axis=1)))
