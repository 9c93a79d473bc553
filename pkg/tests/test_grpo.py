import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chartrl.chartenv import featurize, generate_corpus
from chartrl.errors import ConfigError, TrainingError
from chartrl.grpo import (
    GroupSample,
    TrainConfig,
    TrainState,
    clipped_term,
    compute_advantages,
    exact_kl,
    grpo_loss,
    kl_estimate,
    load_state,
    read_metrics_csv,
    run_training,
    save_state,
    smooth,
    train_step,
    write_metrics_csv,
)
from chartrl.policy import Rollout, init_params, sample_batch, sequence_logprob
from chartrl.reward import RewardConfig


def test_advantage_examples():
    assert np.allclose(compute_advantages([1, 0, 0, 0]), [math.sqrt(3), -1 / math.sqrt(3), -1 / math.sqrt(3), -1 / math.sqrt(3)])
    assert np.allclose(compute_advantages([1, 0, 0, 0]), [1.7321, -0.5774, -0.5774, -0.5774], atol=1e-4)
    assert np.array_equal(compute_advantages([2.0] * 8), np.zeros(8))
    assert np.array_equal(compute_advantages([1.0, 1.0 + 1e-12]), np.zeros(2))
    with pytest.raises(ConfigError):
        compute_advantages([1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=16))
def test_advantages_zero_mean_unit_std(rewards):
    a = compute_advantages(rewards)
    if np.std(rewards) >= 1e-8:
        assert abs(a.mean()) < 1e-9
        assert abs(a.std() - 1.0) < 1e-6
    else:
        assert np.all(a == 0)


def test_kl_examples():
    assert kl_estimate(np.array([math.log(0.5)]), np.array([0.0])) == pytest.approx(1 - math.log(2), abs=1e-12)
    assert kl_estimate(np.array([math.log(0.5)]), np.array([0.0])) == pytest.approx(0.3069, abs=1e-4)
    assert kl_estimate(np.array([-1.0, -2.0]), np.array([-1.0, -2.0])) == 0.0
    assert kl_estimate(np.zeros(0), np.zeros(0)) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 0), st.floats(-20, 0)), min_size=1, max_size=10))
def test_kl_nonnegative(pairs):
    cur, ref = np.array(pairs).T
    assert kl_estimate(cur, ref) >= 0


def test_clipped_term_examples():
    assert clipped_term(1.0, 2.0, 0.2) == 2.0
    assert clipped_term(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_term(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert clipped_term(0.5, 1.0, 0.2) == 0.5  # pessimistic side keeps the ratio
    with pytest.raises(ValueError):
        clipped_term(0.0, 1.0, 0.2)


def _group(rng, n=4, lengths=(3, 5, 4, 6)):
    old = [rng.normal(-1.5, 0.5, size=t) for t in lengths[:n]]
    ref = [o + rng.normal(0, 0.3, size=len(o)) for o in old]
    rewards = rng.integers(0, 3, size=n).astype(float)
    ros = [Rollout(tuple(range(len(o))), o, np.zeros(1)) for o in old]
    return GroupSample("g", ros, rewards, compute_advantages(rewards), old, ref)


def _scalar_loss(group, cur, eps, beta):
    total = 0.0
    for i, ro in enumerate(group.rollouts):
        T = len(cur[i])
        acc = 0.0
        for t in range(T):
            ratio = math.exp(cur[i][t] - group.old_logprobs[i][t])
            d = group.ref_logprobs[i][t] - cur[i][t]
            acc += clipped_term(ratio, group.advantages[i], eps) - beta * (math.exp(d) - d - 1)
        total += acc / T
    return -total / len(group.rollouts)


def test_grpo_loss_matches_scalar_reference():
    rng = np.random.default_rng(0)
    cfg = TrainConfig(clip_eps=0.2, kl_beta=0.1)
    for _ in range(20):
        g = _group(rng)
        if np.all(g.advantages == 0):
            continue
        cur = [o + rng.normal(0, 0.4, size=len(o)) for o in g.old_logprobs]
        parts = grpo_loss(g, cur, cfg)
        assert parts.loss == pytest.approx(_scalar_loss(g, cur, 0.2, 0.1), abs=1e-12)
        h = 1e-6
        for i in range(len(cur)):
            for t in range(len(cur[i])):
                up = [c.copy() for c in cur]
                dn = [c.copy() for c in cur]
                up[i][t] += h
                dn[i][t] -= h
                fd = (_scalar_loss(g, up, 0.2, 0.1) - _scalar_loss(g, dn, 0.2, 0.1)) / (2 * h)
                assert parts.coefficients[i][t] == pytest.approx(fd, abs=1e-6)


def test_on_policy_ratios_are_one():
    rng = np.random.default_rng(1)
    g = _group(rng)
    parts = grpo_loss(g, g.old_logprobs, TrainConfig(kl_beta=0.0))
    assert parts.clip_fraction == 0.0
    # with ratio 1 the surrogate is the mean advantage, which is zero
    assert parts.loss == pytest.approx(0.0, abs=1e-12)


def test_overflowing_ratio_raises():
    rng = np.random.default_rng(2)
    g = _group(rng)
    cur = [c.copy() for c in g.old_logprobs]
    cur[0][0] += 1000.0
    with pytest.raises(TrainingError):
        grpo_loss(g, cur, TrainConfig())


def test_kl_estimate_unbiased_for_exact_kl():
    corpus = generate_corpus(50, "hard", seed=4)
    ref = init_params(3)
    cur = init_params(3)
    cur.W_out += np.random.default_rng(0).normal(0, 0.3, size=cur.W_out.shape)
    feats = [featurize(t) for t in corpus for _ in range(40)]
    rollouts = sample_batch(cur, feats, np.random.default_rng(5))
    est, ex = [], []
    for ro in rollouts:
        _, ref_lp = sequence_logprob(ref, ro.features, ro.tokens)
        est.append(kl_estimate(ro.per_step_logprobs, ref_lp))
        ex.append(exact_kl(cur, ref, ro.features, ro.tokens))
    diff = np.array(est) - np.array(ex)
    se = diff.std() / math.sqrt(len(diff))
    assert abs(diff.mean()) < 4 * se
    assert np.mean(ex) > 0


@pytest.mark.parametrize("bad", [
    dict(group_size=1), dict(clip_eps=0.0), dict(clip_eps=1.0), dict(kl_beta=-0.1),
    dict(lr=-1.0), dict(tasks_per_step=0), dict(inner_epochs=0), dict(reward=RewardConfig(tau=2.0)),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_config_dict_round_trip():
    cfg = TrainConfig(group_size=4, reward=RewardConfig(tau=0.1), structural_masking=False)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


SMALL = TrainConfig(group_size=4, tasks_per_step=2, steps=8, lr=1e-2, seed=3)


def _fingerprint(state):
    return state.params.checksum(), [(m.loss, m.mean_total_reward, m.mean_kl) for m in state.metrics]


def test_training_is_deterministic():
    corpus = generate_corpus(20, "easy", seed=1)
    a = run_training(SMALL, corpus, init_params(0))
    b = run_training(SMALL, corpus, init_params(0))
    assert _fingerprint(a) == _fingerprint(b)
    assert a.params.checksum() != init_params(0).checksum()
    assert a.ref_params.checksum() == init_params(0).checksum()


def test_resume_matches_uninterrupted(tmp_path):
    corpus = generate_corpus(20, "easy", seed=1)
    full = run_training(SMALL, corpus, init_params(0))
    half = run_training(SMALL, corpus, init_params(0), until=4)
    save_state(tmp_path / "ck.json", half, SMALL)
    state, cfg = load_state(tmp_path / "ck.json")
    assert cfg == SMALL and state.step == 4
    resumed = run_training(cfg, corpus, state=state)
    assert _fingerprint(resumed) == _fingerprint(full)


def test_lr_zero_keeps_policy_fixed():
    corpus = generate_corpus(10, "easy", seed=1)
    cfg = TrainConfig(group_size=4, tasks_per_step=2, steps=3, lr=0.0)
    state = run_training(cfg, corpus, init_params(0))
    assert state.params.checksum() == init_params(0).checksum()
    assert all(m.mean_kl == 0.0 for m in state.metrics)


def test_first_step_is_on_policy():
    corpus = generate_corpus(10, "easy", seed=1)
    state = TrainState.fresh(init_params(0), SMALL)
    m = train_step(state, corpus, SMALL)
    assert m.clip_fraction == 0.0 and m.mean_kl == 0.0


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        run_training(SMALL, [], init_params(0))


def test_metrics_csv_round_trip(tmp_path):
    corpus = generate_corpus(10, "easy", seed=1)
    state = run_training(SMALL, corpus, init_params(0), until=3)
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, state.metrics)
    rows = read_metrics_csv(path)
    assert [r["loss"] for r in rows] == [m.loss for m in state.metrics]
    assert "wall_time" not in rows[0]
    assert (tmp_path / "metrics.timing.csv").exists()


def test_smooth():
    assert np.array_equal(smooth([1, 2, 3], 1), [1, 2, 3])
    assert np.allclose(smooth([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
