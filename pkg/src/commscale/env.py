"""Matrix communication game.

Each episode draws two distinct labels out of ``n_labels``; every agent
independently receives one of the two, one-hot encoded. Each agent must answer
how many *other* agents hold its label, so answers range over ``0 .. N-1`` and
the action space has ``N`` entries. Episodes last a single step.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np


@dataclass(frozen=True)
class EnvConfig:
    n_agents: int
    n_labels: int

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError(f"need at least 2 agents, got {self.n_agents}")
        if self.n_labels < 2:
            raise ValueError(f"need at least 2 labels, got {self.n_labels}")

    @property
    def n_actions(self) -> int:
        return self.n_agents


@dataclass(frozen=True)
class EpisodeState:
    label_pair: tuple[int, int]
    assignment: tuple[int, ...]


@dataclass(frozen=True)
class StepResult:
    rewards: np.ndarray
    normalized_reward: float
    done: bool = True


def one_hot(labels, n_labels: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros(labels.shape + (n_labels,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def reset(config: EnvConfig, rng: np.random.Generator) -> tuple[EpisodeState, np.ndarray]:
    """Start an episode. Returns the state and an ``[N, L]`` observation matrix."""
    pair = rng.choice(config.n_labels, size=2, replace=False)
    lo, hi = sorted(int(x) for x in pair)
    picks = rng.integers(0, 2, size=config.n_agents)
    assignment = np.where(picks == 0, lo, hi)
    state = EpisodeState((lo, hi), tuple(int(x) for x in assignment))
    return state, one_hot(assignment, config.n_labels)


def reset_batch(config: EnvConfig, rng: np.random.Generator, n_episodes: int) -> np.ndarray:
    """Vectorized :func:`reset`; returns the ``[B, N]`` label assignment only.

    Draws a uniformly random unordered pair per episode (first label uniform,
    second uniform over the rest) and a fair coin per agent.
    """
    L = config.n_labels
    first = rng.integers(0, L, size=n_episodes)
    second = (first + rng.integers(1, L, size=n_episodes)) % L
    picks = rng.integers(0, 2, size=(n_episodes, config.n_agents))
    return np.where(picks == 0, first[:, None], second[:, None])


def correct_answers(assignment) -> np.ndarray:
    """Number of other agents sharing each agent's label, for ``[..., N]`` assignments."""
    a = np.asarray(assignment)
    same = a[..., :, None] == a[..., None, :]
    return same.sum(axis=-1) - 1


def step_rewards(assignment, actions) -> np.ndarray:
    """Per-agent 0/1 rewards for ``[..., N]`` assignments and actions."""
    actions = np.asarray(actions)
    n = np.asarray(assignment).shape[-1]
    if actions.shape != np.asarray(assignment).shape:
        raise ValueError(f"actions shape {actions.shape} does not match assignment")
    if (actions < 0).any() or (actions >= n).any():
        raise ValueError(f"actions must lie in [0, {n})")
    return (actions == correct_answers(assignment)).astype(np.float64)


def step(state: EpisodeState, actions) -> StepResult:
    rewards = step_rewards(state.assignment, actions)
    return StepResult(rewards=rewards, normalized_reward=float(rewards.mean()), done=True)


def random_policy_reward(config: EnvConfig) -> float:
    """Expected normalized reward of a uniform guess over the N answers."""
    return 1.0 / config.n_agents


def bayes_optimal_no_comm_reward(config: EnvConfig) -> float:
    """Best expected reward using only one's own label.

    The count of like-labelled others is Binomial(N-1, 1/2), so the best
    blind answer is its mode.
    """
    k = config.n_agents - 1
    return max(comb(k, j) for j in range(k + 1)) / 2**k


def decode_assignment(observations: np.ndarray) -> np.ndarray:
    """Recover the per-agent labels from the stacked one-hot observations."""
    return np.asarray(observations).argmax(axis=-1)
