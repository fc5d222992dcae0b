import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from group_rlvr.groups import build_cyclic, group_from_name
from group_rlvr.policy import (FullAttention, MlpConfig, ReducedAttention, batch_rollout, build_pretrained_W,
                               reduced_step_law, rollout, trajectory_logprob)
from group_rlvr.spectral import exact_grad_q_instance, success_probability
from group_rlvr.tasks import Tokenizer, new_position_space, sample_batch, sample_instance
from group_rlvr.train import (ConfigError, EmaBaseline, EvalRecord, InstabilityError, TrainConfig, evaluate,
                              horizon_set, initial_state, load_checkpoint, reinforce_gradient, reinforce_step,
                              run_training, save_checkpoint, score_function_grad, sft_gradient, sft_step)


@pytest.mark.parametrize("R, L1, L_max, expected", [
    (3, 5, 45, [5, 15, 45]),
    (7, 5, 35, [5, 35]),
    (2, 4, 4, [4]),
    (2, 5, 45, [5, 10, 20, 40, 45]),
    (7, 5, 45, [5, 35, 45]),
])
def test_horizon_sets(R, L1, L_max, expected):
    assert horizon_set(R, L1, L_max) == expected


@pytest.mark.parametrize("R, L1, L_max", [(1.0, 5, 45), (0.5, 5, 45), (3, 1, 45), (3, 50, 45)])
def test_horizon_set_rejects_bad_inputs(R, L1, L_max):
    with pytest.raises(ConfigError):
        horizon_set(R, L1, L_max)


@pytest.mark.parametrize("kwargs", [dict(lr=0), dict(ema_momentum=1.0), dict(entropy_coef=-1), dict(lengths=()),
                                    dict(parametrization="dense"), dict(trainer="ppo"),
                                    dict(eval_mode="beam")])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_ema_baseline():
    b = EmaBaseline(0.95)
    b.update(1.0)
    assert math.isclose(b.value, 0.05)
    b.update(1.0)
    assert math.isclose(b.value, 0.05 + 0.95 * 0.05)


def small_setup(name="Z6", dpos=8, C_B=3.0):
    G = group_from_name(name)
    space = new_position_space(dpos, seed=1)
    return G, space, MlpConfig(G.order, C_B)


def test_score_function_grad_matches_finite_differences():
    G, space, cfg = small_setup()
    mlp = build_pretrained_W(G, Tokenizer.identity(6), cfg)
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(8, 8))
    for _ in range(3):
        inst = sample_instance(G, space, 2, rng)
        traj = rollout(FullAttention(Q), mlp, inst, rng, space=space)
        grad = score_function_grad(traj, inst, FullAttention(Q), cfg, G, space)
        h = 1e-6
        for a, b in itertools.product(range(8), repeat=2):
            plus, minus = Q.copy(), Q.copy()
            plus[a, b] += h
            minus[a, b] -= h
            fd = (trajectory_logprob(FullAttention(plus), mlp, inst, traj.states, space)
                  - trajectory_logprob(FullAttention(minus), mlp, inst, traj.states, space)) / (2 * h)
            assert math.isclose(grad[a, b], fd, rel_tol=1e-6, abs_tol=1e-8)


def test_score_function_grad_vanishes_at_saturation():
    G, space, cfg = small_setup()
    mlp = build_pretrained_W(G, Tokenizer.identity(6), cfg)
    inst = sample_instance(G, space, 3, np.random.default_rng(1))
    params = ReducedAttention(40.0, 0.0)
    traj = rollout(params, mlp, inst, mode="greedy", space=space)
    gq, gr = score_function_grad(traj, inst, params, cfg, G, space)
    assert abs(gq) < 1e-12 and abs(gr) < 1e-12


def test_reduced_gradient_aggregates_full_gradient():
    G, space, cfg = small_setup("S3")
    mlp = build_pretrained_W(G, Tokenizer.identity(6), cfg)
    rng = np.random.default_rng(2)
    inst = sample_instance(G, space, 3, rng)
    reduced = ReducedAttention(0.8, -0.2)
    traj = rollout(reduced, mlp, inst, rng, space=space)
    gq, gr = score_function_grad(traj, inst, reduced, cfg, G, space)
    full = score_function_grad(traj, inst, reduced.to_full(space), cfg, G, space)
    aligned = np.zeros((8, 8), dtype=bool)
    aligned[space.align, np.arange(8)] = True
    assert math.isclose(gq, full[aligned].sum(), abs_tol=1e-12)
    assert math.isclose(gr, full[~aligned].sum(), abs_tol=1e-12)


def test_inconsistent_trajectory_rejected():
    G, space, cfg = small_setup()
    mlp = build_pretrained_W(G, Tokenizer.identity(6), cfg)
    rng = np.random.default_rng(3)
    inst = sample_instance(G, space, 3, rng)
    traj = rollout(ReducedAttention(), mlp, inst, rng, space=space)
    traj.states[0] = (traj.states[0] + 1) % 6
    with pytest.raises(ValueError):
        score_function_grad(traj, inst, ReducedAttention(), cfg, G, space)
    traj.states.pop()
    with pytest.raises(ValueError):
        score_function_grad(traj, inst, ReducedAttention(), cfg, G, space)


def test_zero_advantage_leaves_params_unchanged():
    G, space, cfg = small_setup()
    config = TrainConfig(lr=1.0, lengths=(3,), entropy_coef=0.0)
    state = initial_state(config, space.dpos)
    # with every reward equal to the baseline the surrogate gradient is zero
    rng = np.random.default_rng(4)
    batch = sample_batch(G, space, np.full(64, 3), rng)
    roll = batch_rollout(state.params, cfg, G, batch, space, rng)
    grad = reinforce_gradient(replace(roll, reward=np.ones(64)), batch, 1.0, 0.0, space, state.params)
    assert np.abs(grad).max() == 0.0


def _exact_reduced_gradient(G, space, cfg, q, L):
    law, attn = reduced_step_law(q, 0.0, L, G.order, cfg.C_B)
    return np.mean([exact_grad_q_instance(law, attn, cfg.B, L, space.dpos, ctx, G) * space.dpos
                    for ctx in itertools.permutations(range(G.order), L)])


def _mean_gradients(G, space, cfg, params, L, baseline, n_batches, size, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_batches):
        b = sample_batch(G, space, np.full(size, L), rng)
        roll = batch_rollout(params, cfg, G, b, space, rng)
        out.append(reinforce_gradient(roll, b, baseline, 0.0, space, params)[0])
    return np.array(out)


def test_reinforce_mean_matches_exact_gradient():
    G, space, cfg = small_setup("S3")
    exact = _exact_reduced_gradient(G, space, cfg, 0.5, 3)
    g = _mean_gradients(G, space, cfg, ReducedAttention(0.5, 0.0), 3, 0.0, 40, 1000, 5)
    se = g.std(ddof=1) / math.sqrt(g.size)
    assert abs(g.mean() - exact) <= 4 * se


def test_baseline_does_not_shift_expected_gradient():
    G, space, cfg = small_setup("S3")
    params = ReducedAttention(0.5, 0.0)
    a = _mean_gradients(G, space, cfg, params, 3, 0.0, 40, 1000, 6)
    b = _mean_gradients(G, space, cfg, params, 3, 0.3, 40, 1000, 7)
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    assert abs(a.mean() - b.mean()) <= 4 * se


def test_length_normalization_applied_once():
    G, space, cfg = small_setup("Z12", dpos=16)
    rng = np.random.default_rng(8)
    batch = sample_batch(G, space, np.array([2, 4, 8]), rng)
    params = FullAttention.zeros(16)
    roll = batch_rollout(params, cfg, G, batch, space, rng)
    inside = roll.active[..., None] & (np.arange(8)[None, None, :] < batch.lengths[:, None, None])
    unit = replace(roll, reward=np.ones(3), score_grad=inside.astype(float),
                   entropy_grad=np.zeros_like(roll.entropy_grad))
    grad = reinforce_gradient(unit, batch, 0.0, 0.0, space, params)
    # each sample contributes L*L unit entries divided by L, then the batch mean divides by 3
    assert math.isclose(grad.sum(), (2 + 4 + 8) / 3)


def test_mixed_lengths_are_uniform():
    config = TrainConfig(lengths=(5, 15, 45), batch_size=30_000)
    rng = np.random.default_rng(9)
    draws = rng.choice(np.asarray(config.lengths), config.batch_size)
    counts = np.array([(draws == L).sum() for L in config.lengths])
    assert np.abs(counts - 10_000).max() < 4 * math.sqrt(30_000 * (1 / 3) * (2 / 3))


def test_symmetry_is_kept_in_expectation():
    # a non-abelian group, so the expected update at Q = 0 is not identically zero
    G, space, cfg = small_setup("S4", dpos=6)
    rng = np.random.default_rng(10)
    params = FullAttention.zeros(6)
    grads = []
    for _ in range(60):
        b = sample_batch(G, space, np.full(2000, 3), rng)
        roll = batch_rollout(params, cfg, G, b, space, rng)
        grads.append(reinforce_gradient(roll, b, 0.0, 0.0, space, params))
    grads = np.array(grads)
    mean = grads.mean(axis=0)
    se = grads.std(axis=0, ddof=1).mean() / math.sqrt(len(grads))
    aligned = np.zeros((6, 6), dtype=bool)
    aligned[space.align, np.arange(6)] = True
    a_vals, o_vals = mean[aligned], mean[~aligned]
    assert a_vals.mean() > 10 * se and o_vals.mean() < -3 * se
    # entries within each class differ only by Monte Carlo noise
    assert a_vals.std() < 3 * se
    assert o_vals.std() < 3 * se


def test_sft_and_rl_agree_in_direction_at_start():
    G, space, cfg = small_setup("Z12", dpos=16)
    params = ReducedAttention()
    rng = np.random.default_rng(11)
    batch = sample_batch(G, space, np.full(4000, 3), rng)
    sft_grad, _ = sft_gradient(params, cfg, G, batch, space)
    rl = _mean_gradients(G, space, cfg, params, 3, 0.0, 20, 2000, 12).mean()
    # the loss gradient points against the ascent direction
    assert -sft_grad[0] > 0 and rl > 0


def test_sft_loss_small_for_perfect_policy():
    G, space, cfg = small_setup("Z96", dpos=64)
    batch = sample_batch(G, space, np.full(50, 5), np.random.default_rng(13))
    _, loss = sft_gradient(ReducedAttention(60.0, 0.0), cfg, G, batch, space)
    assert loss <= G.order ** -(cfg.C_B - 1)


def test_sft_gradient_matches_finite_differences():
    G, space, cfg = small_setup()
    rng = np.random.default_rng(14)
    batch = sample_batch(G, space, np.full(5, 3), rng)
    Q = rng.normal(size=(8, 8))
    grad, _ = sft_gradient(FullAttention(Q), cfg, G, batch, space)
    h = 1e-6
    for a, b in itertools.product(range(8), repeat=2):
        plus, minus = Q.copy(), Q.copy()
        plus[a, b] += h
        minus[a, b] -= h
        fd = (sft_gradient(FullAttention(plus), cfg, G, batch, space)[1]
              - sft_gradient(FullAttention(minus), cfg, G, batch, space)[1]) / (2 * h)
        assert math.isclose(grad[a, b], fd, rel_tol=1e-6, abs_tol=1e-9)


def test_sft_ignores_model_predictions():
    G, space, cfg = small_setup()
    rng = np.random.default_rng(15)
    batch = sample_batch(G, space, np.full(20, 3), rng)
    config = TrainConfig(lr=0.1, lengths=(3,), trainer="sft")
    a = sft_step(initial_state(config, 8), batch, config, cfg, G, space)
    other = initial_state(config, 8)
    other.rng = np.random.default_rng(999)  # a different sampling stream changes rollouts, not teacher forcing
    b = sft_step(other, batch, config, cfg, G, space)
    assert np.array_equal(a.params.Q, b.params.Q)


def test_evaluate_perfect_and_zero_policy():
    G, space, cfg = small_setup("Z96", dpos=64)
    rng = np.random.default_rng(16)
    rec = evaluate(ReducedAttention(60.0, 0.0), cfg, G, space, (5, 45), 1, 256, rng)
    assert rec.success == {5: 1.0, 45: 1.0}
    assert rec.hit_rate == {5: 1.0, 45: 1.0}
    zero = evaluate(FullAttention.zeros(64), cfg, G, space, (5,), 40, 2500, rng, mode="sample")
    law, _ = reduced_step_law(0.0, 0.0, 5, 96, cfg.C_B)
    exact = success_probability(law, (0, 1, 2, 3, 4), build_cyclic(96))
    assert abs(zero.success[5] - exact) <= 4 * math.sqrt(exact * (1 - exact) / 100_000)
    assert abs(zero.hit_rate[5] - 1 / 5) < 0.01


def test_training_honours_the_evaluation_mode():
    G, space, cfg = small_setup("Z12", dpos=16)
    config = TrainConfig(lr=5.0, lengths=(4,), iterations=0, eval_batches=2, eval_batch_size=128, seed=2,
                         eval_mode="sample")
    records, _ = run_training(config, G, space, cfg)
    eval_rng = np.random.default_rng(np.random.SeedSequence(2).spawn(2)[1])
    direct = evaluate(FullAttention.zeros(16), cfg, G, space, (4,), 2, 128, eval_rng, mode="sample")
    assert records[0].success == direct.success


def test_runs_are_deterministic():
    G, space, cfg = small_setup("Z12", dpos=16)
    config = TrainConfig(lr=5.0, lengths=(3, 5), batch_size=64, iterations=6, eval_every=3, eval_batches=1,
                         eval_batch_size=64, seed=4)
    a, sa = run_training(config, G, space, cfg)
    b, sb = run_training(config, G, space, cfg)
    strip = lambda recs: [(r.iteration, r.success, r.hit_rate, r.q_mean, r.r_mean) for r in recs]  # noqa: E731
    assert strip(a) == strip(b)
    assert np.array_equal(sa.params.Q, sb.params.Q)
    assert [r.iteration for r in a] == [0, 3, 6]


def test_checkpoint_round_trip(tmp_path):
    G, space, cfg = small_setup("Z12", dpos=16)
    config = TrainConfig(lr=5.0, lengths=(3,), batch_size=32, iterations=2, eval_every=0, eval_batches=1,
                         eval_batch_size=32)
    _, state = run_training(config, G, space, cfg)
    save_checkpoint(tmp_path / "ck.json", state)
    back = load_checkpoint(tmp_path / "ck.json")
    assert np.array_equal(back.params.Q, state.params.Q)
    assert back.iteration == 2 and back.baseline.value == state.baseline.value
    assert back.rng.random() == state.rng.random()


def test_eval_record_json_round_trip():
    rec = EvalRecord(10, {5: 0.5}, {5: 0.25}, 1.0, -0.1, 0.01)
    assert EvalRecord.from_json(rec.to_json()) == rec


def test_instability_detected():
    G, space, cfg = small_setup("Z12", dpos=16)
    config = TrainConfig(lr=1e308, lengths=(3,), batch_size=64, entropy_coef=1e308)
    state = initial_state(config, space.dpos)
    state.params = FullAttention(np.random.default_rng(1).normal(size=(16, 16)))
    batch = sample_batch(G, space, np.full(64, 3), np.random.default_rng(0))
    with pytest.raises(InstabilityError):
        for _ in range(3):
            state = reinforce_step(state, batch, config, cfg, G, space)
