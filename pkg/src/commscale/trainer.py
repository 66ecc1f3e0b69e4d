"""Batch REINFORCE with entropy regularization for the shared CommNet policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .env import EnvConfig, one_hot, reset_batch, step_rewards
from .model import ModelConfig, as_tensors, forward_joint, init_params, policy_probs

STD_EPS = 1e-8

# entropy weight per agent count
BETA_BY_AGENTS = {3: 0.44, 8: 0.15, 16: 0.01, 24: 0.01}


def default_beta(n_agents: int) -> float:
    """Entropy weight for ``n_agents``; unlisted counts take the nearest listed one."""
    if n_agents in BETA_BY_AGENTS:
        return BETA_BY_AGENTS[n_agents]
    nearest = min(BETA_BY_AGENTS, key=lambda n: (abs(n - n_agents), n))
    return BETA_BY_AGENTS[nearest]


@dataclass
class TrainConfig:
    learning_rate: float = 0.002
    discount: float = 0.99  # kept for completeness; one-step episodes never discount
    batch_size: int = 80
    beta: float | None = None
    total_updates: int = 2500
    seed: int = 0
    optimizer: str = "adam"
    eval_window_fraction: float = 0.10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0 < self.eval_window_fraction <= 1:
            raise ValueError("eval_window_fraction must lie in (0, 1]")
        if self.total_updates < 0:
            raise ValueError("total_updates must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def resolved_beta(self, n_agents: int) -> float:
        return default_beta(n_agents) if self.beta is None else self.beta


@dataclass
class Batch:
    """One update's worth of episodes; every array is indexed ``[episode, agent, ...]``."""

    observations: np.ndarray  # [B, N, L] one-hot
    assignment: np.ndarray  # [B, N] label index
    actions: np.ndarray  # [B, N]
    rewards: np.ndarray  # [B, N] in {0, 1}
    probs: np.ndarray  # [B, N, N] sampling distribution

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def mean_normalized_reward(self) -> float:
        return float(self.rewards.mean())


@dataclass
class MetricHistory:
    update: list[int] = field(default_factory=list)
    episodes: list[int] = field(default_factory=list)
    mean_norm_reward: list[float] = field(default_factory=list)
    policy_entropy: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)

    def append(self, update, episodes, reward, entropy, loss) -> None:
        self.update.append(update)
        self.episodes.append(episodes)
        self.mean_norm_reward.append(reward)
        self.policy_entropy.append(entropy)
        self.loss.append(loss)

    def __len__(self) -> int:
        return len(self.update)

    def rows(self):
        return zip(self.update, self.episodes, self.mean_norm_reward, self.policy_entropy, self.loss)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one categorical sample per row of ``probs[..., A]``."""
    u = rng.random(probs.shape[:-1] + (1,))
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum((cdf < u).sum(axis=-1), probs.shape[-1] - 1)


def collect_batch(env: EnvConfig, params, model: ModelConfig, batch_size: int,
                  rng: np.random.Generator, policy=None) -> Batch:
    """Play ``batch_size`` episodes with the current policy.

    ``policy`` optionally replaces the network: it maps ``[B, N, L]``
    observations to ``[B, N, N]`` action distributions.
    """
    assignment = reset_batch(env, rng, batch_size)
    obs = one_hot(assignment, env.n_labels)
    probs = policy(obs) if policy is not None else policy_probs(obs, params, model)
    actions = sample_actions(probs, rng)
    rewards = step_rewards(assignment, actions)
    return Batch(obs, assignment, actions, rewards, probs)


def standardize(rewards: np.ndarray, eps: float = STD_EPS) -> np.ndarray:
    """``(r - mean) / (std + eps)`` over every reward in the batch."""
    r = np.asarray(rewards, dtype=np.float64)
    return (r - r.mean()) / (r.std() + eps)


def loss_from_log_probs(log_probs: ad.Tensor, actions: np.ndarray, advantages: np.ndarray,
                        beta: float) -> ad.Tensor:
    """Mean over samples of ``-log pi(u) * adv + beta * sum_u' pi(u') log pi(u')``."""
    chosen = ad.take_last(log_probs, actions)
    pg = ad.mul(chosen, -np.asarray(advantages, dtype=np.float64))
    neg_entropy = ad.sum(ad.mul(ad.exp(log_probs), log_probs), axis=-1)
    per_sample = ad.add(pg, ad.mul(neg_entropy, beta))
    return ad.mean(per_sample)


def compute_loss(batch: Batch, params, model: ModelConfig, beta: float) -> ad.Tensor:
    """Re-run the policy on the batch observations and build the training loss on the tape."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    trace = forward_joint(batch.observations, params, model)
    log_probs = ad.log_softmax_rows(trace.logits)
    return loss_from_log_probs(log_probs, batch.actions, standardize(batch.rewards), beta)


def policy_entropy(probs: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the per-agent action distributions."""
    p = np.clip(probs, 1e-300, 1.0)
    return float(-(probs * np.log(p)).sum(axis=-1).mean())


def train(env: EnvConfig, model: ModelConfig, config: TrainConfig, params=None,
          on_update=None):
    """Run ``config.total_updates`` rounds of collect, loss, backward, optimizer step.

    Everything random flows from ``config.seed``: one generator initializes the
    weights, then drives episode sampling. ``on_update(history)`` is invoked
    after every update for streaming.
    """
    if (env.n_agents, env.n_labels) != (model.n_agents, model.n_labels):
        raise ValueError("environment and model disagree on agents/labels")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(model, rng)
    beta = config.resolved_beta(env.n_agents)
    opt = ad.make_optimizer(config.optimizer, config.learning_rate)
    history = MetricHistory()
    for update in range(config.total_updates):
        batch = collect_batch(env, params, model, config.batch_size, rng)
        leaves = as_tensors(params, requires_grad=True)
        loss = compute_loss(batch, leaves, model, beta)
        ad.backward(loss)
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in leaves.items()}
        opt.step(params, grads)
        history.append(update, (update + 1) * config.batch_size, batch.mean_normalized_reward,
                       policy_entropy(batch.probs), loss.item())
        if on_update is not None:
            on_update(history)
    return params, history


def final_window_score(values, fraction: float = 0.10) -> tuple[float, float]:
    """Mean and (population) std over the last ``ceil(fraction * len)`` entries."""
    if isinstance(values, MetricHistory):
        values = values.mean_norm_reward
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty history")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = max(1, math.ceil(fraction * values.size))
    window = values[-k:]
    return float(window.mean()), float(window.std())


def evaluate(env: EnvConfig, params, model: ModelConfig, n_episodes: int,
             rng: np.random.Generator, greedy: bool = True) -> float:
    """Mean normalized reward over fresh episodes, greedy or sampled."""
    assignment = reset_batch(env, rng, n_episodes)
    probs = policy_probs(one_hot(assignment, env.n_labels), params, model)
    actions = probs.argmax(axis=-1) if greedy else sample_actions(probs, rng)
    return float(step_rewards(assignment, actions).mean())
