import math

import numpy as np
import pytest

from commscale import autodiff as ad
from commscale.autodiff import Tensor
from commscale.env import EnvConfig, correct_answers, one_hot
from commscale.model import ModelConfig, as_tensors, forward_joint, init_params
from commscale.trainer import (
    Batch,
    TrainConfig,
    collect_batch,
    compute_loss,
    default_beta,
    final_window_score,
    loss_from_log_probs,
    policy_entropy,
    sample_actions,
    standardize,
    train,
)

from conftest import rel_error


def _uniform(obs):
    n = obs.shape[-2]
    return np.full(obs.shape[:-1] + (n,), 1.0 / n)


def _oracle(obs):
    """Scripted policy that reads every agent's label and answers exactly."""
    answers = correct_answers(obs.argmax(axis=-1))
    return one_hot(answers, obs.shape[-2])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(eval_window_fraction=0)


@pytest.mark.parametrize("n,beta", [(3, 0.44), (8, 0.15), (16, 0.01), (24, 0.01)])
def test_default_beta_table(n, beta):
    assert default_beta(n) == beta
    assert TrainConfig().resolved_beta(n) == beta
    assert TrainConfig(beta=0.3).resolved_beta(n) == 0.3


def test_sample_actions_frequencies():
    rng = np.random.default_rng(0)
    probs = np.tile([0.2, 0.5, 0.3], (100000, 1))
    freq = np.bincount(sample_actions(probs, rng), minlength=3) / 100000
    np.testing.assert_allclose(freq, [0.2, 0.5, 0.3], atol=0.01)


def test_uniform_policy_scores_one_over_n():
    rng = np.random.default_rng(1)
    env = EnvConfig(3, 3)
    batch = collect_batch(env, None, None, 10000, rng, policy=_uniform)
    assert abs(batch.mean_normalized_reward - 1 / 3) <= 0.01


def test_scripted_optimal_policy_always_rewarded():
    rng = np.random.default_rng(2)
    batch = collect_batch(EnvConfig(5, 4), None, None, 500, rng, policy=_oracle)
    assert (batch.rewards == 1).all()


def test_collect_batch_deterministic_and_well_formed():
    env, cfg = EnvConfig(3, 4), ModelConfig(3, 4, 5, 1, "mean")
    p = init_params(cfg, np.random.default_rng(0))
    a = collect_batch(env, p, cfg, 20, np.random.default_rng(9))
    b = collect_batch(env, p, cfg, 20, np.random.default_rng(9))
    for field in ("observations", "actions", "rewards", "probs"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    assert len(a) == 20
    assert set(np.unique(a.rewards)) <= {0.0, 1.0}
    assert np.abs(a.probs.sum(axis=-1) - 1).max() <= 1e-9


def test_loss_hand_example():
    log_probs = Tensor(np.log([[0.5, 0.5], [0.25, 0.75]]))
    loss = loss_from_log_probs(log_probs, np.array([0, 0]), np.array([1.0, -1.0]), beta=0.0)
    assert loss.item() == pytest.approx((math.log(2) - math.log(4)) / 2, abs=1e-12)
    assert loss.item() == pytest.approx(-0.3466, abs=1e-4)


def test_identical_rewards_leave_only_entropy_term():
    env, cfg = EnvConfig(3, 3), ModelConfig(3, 3, 4, 1, "mean")
    p = init_params(cfg, np.random.default_rng(0))
    batch = collect_batch(env, p, cfg, 10, np.random.default_rng(1))
    batch.rewards[:] = 1.0
    np.testing.assert_array_equal(standardize(batch.rewards), 0.0)
    probs = forward_joint(batch.observations, p, cfg).probs.data
    expected = 0.3 * (probs * np.log(probs)).sum(axis=-1).mean()
    assert compute_loss(batch, p, cfg, beta=0.3).item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("n", [2, 3, 8])
def test_uniform_policy_entropy_term(n):
    log_probs = Tensor(np.full((5, n), -math.log(n)))
    loss = loss_from_log_probs(log_probs, np.zeros(5, dtype=int), np.zeros(5), beta=0.7)
    assert loss.item() == pytest.approx(-0.7 * math.log(n), abs=1e-12)


def test_standardized_advantages():
    rng = np.random.default_rng(3)
    for _ in range(50):
        r = (rng.random((80, 3)) < rng.uniform(0.1, 0.9)).astype(float)
        adv = standardize(r)
        assert abs(adv.mean()) <= 1e-9
        assert abs(adv.std() - 1) <= 1e-6


def test_empty_batch_rejected():
    cfg = ModelConfig(3, 3, 4, 1, "mean")
    empty = Batch(np.zeros((0, 3, 3)), np.zeros((0, 3), int), np.zeros((0, 3), int), np.zeros((0, 3)),
                  np.zeros((0, 3, 3)))
    with pytest.raises(ValueError):
        compute_loss(empty, init_params(cfg, np.random.default_rng(0)), cfg, 0.1)


def _kink_margin(batch, params, cfg):
    """Smallest |pre-activation| of any ReLU in the forward pass."""
    trace = forward_joint(batch.observations, params, cfg)
    pre = [batch.observations @ params["encoder.weight"] + params["encoder.bias"]]
    for h, c in zip(trace.hidden[:-1], trace.comm):
        x = np.concatenate([h.data, c.data], axis=-1)
        pre.append(x @ params["comm.weight"] + params["comm.bias"])
    return min(np.abs(p).min() for p in pre)


def loss_gradient_error(kind: str, seed: int) -> float:
    """Relative error between tape and finite-difference gradients of the full loss."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    L = int(rng.integers(2, 5))
    M = int(rng.integers(2, 5))
    env = EnvConfig(n, L)
    cfg = ModelConfig(n, L, M, 0 if kind == "none" else 1, kind)
    while True:
        params = init_params(cfg, rng)
        for v in params.values():
            v *= 2.0
        batch = collect_batch(env, params, cfg, 4, rng)
        # central differences straddling a ReLU kink are meaningless
        if _kink_margin(batch, params, cfg) > 1e-3 and batch.rewards.std() > 0:
            break
    beta = float(rng.uniform(0, 0.5))
    leaves = as_tensors(params, requires_grad=True)
    ad.backward(compute_loss(batch, leaves, cfg, beta))
    names = sorted(params)
    numeric = ad.numerical_grad(lambda: compute_loss(batch, params, cfg, beta).item(),
                                [params[k] for k in names], step=1e-5)
    return max(rel_error(leaves[k].grad, g) for k, g in zip(names, numeric))


@pytest.mark.parametrize("kind", ["mean", "attention", "none"])
@pytest.mark.parametrize("seed", range(10))
def test_loss_gradient_matches_finite_differences(kind, seed):
    assert loss_gradient_error(kind, seed) <= 1e-4


def test_train_zero_updates_returns_initial_params():
    env, cfg = EnvConfig(3, 3), ModelConfig(3, 3, 4, 1, "mean")
    init = init_params(cfg, np.random.default_rng(0))
    snapshot = {k: v.copy() for k, v in init.items()}
    params, history = train(env, cfg, TrainConfig(total_updates=0), params=init)
    assert len(history) == 0
    for k in snapshot:
        np.testing.assert_array_equal(params[k], snapshot[k])


def test_train_is_reproducible():
    env, cfg = EnvConfig(3, 3), ModelConfig(3, 3, 8, 1, "attention")
    tc = TrainConfig(total_updates=15, seed=11, batch_size=16)
    p1, h1 = train(env, cfg, tc)
    p2, h2 = train(env, cfg, tc)
    assert list(h1.rows()) == list(h2.rows())
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])


def test_history_fields():
    env, cfg = EnvConfig(3, 3), ModelConfig(3, 3, 8, 1, "mean")
    _, h = train(env, cfg, TrainConfig(total_updates=5, batch_size=10))
    assert h.update == list(range(5))
    assert h.episodes == [10, 20, 30, 40, 50]
    assert all(0 <= r <= 1 for r in h.mean_norm_reward)
    assert all(0 <= e <= math.log(3) + 1e-12 for e in h.policy_entropy)


def test_train_rejects_mismatched_configs():
    with pytest.raises(ValueError):
        train(EnvConfig(3, 3), ModelConfig(4, 3, 8, 1, "mean"), TrainConfig(total_updates=1))


def test_final_window_examples():
    assert final_window_score([1.0] * 20) == (1.0, 0.0)
    assert final_window_score([0.0] * 19 + [1.0], fraction=0.05) == (1.0, 0.0)
    values = [0.1, 0.4, 0.2, 0.9]
    assert final_window_score(values, 1.0) == pytest.approx((np.mean(values), np.std(values)))
    assert final_window_score(list(range(100)), 0.1) == pytest.approx((94.5, np.std(range(90, 100))))
    with pytest.raises(ValueError):
        final_window_score([])


def test_policy_entropy_bounds():
    assert policy_entropy(np.full((4, 3), 1 / 3)) == pytest.approx(math.log(3))
    assert policy_entropy(np.tile([1.0, 0.0, 0.0], (4, 1))) == 0.0


@pytest.mark.slow
def test_entropy_weight_keeps_policy_softer():
    # Blind agents on N=2 earn 0.5 whatever they answer, so the only systematic
    # force on the policy is the entropy term; without it the policy drifts.
    env, cfg = EnvConfig(2, 2), ModelConfig(2, 2, 8, 0, "none")
    for seed in range(5):
        ent = {}
        for beta in (0.0, 0.5):
            _, h = train(env, cfg, TrainConfig(total_updates=1500, seed=seed, beta=beta))
            ent[beta] = np.mean(h.policy_entropy[-150:])
        assert ent[0.5] > ent[0.0], (seed, ent)
