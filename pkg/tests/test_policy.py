from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_image
from retouch.bench import generate_tasks
from retouch.dsl import EditProgram, LocalOp, MaskSpec, ScalarOp, serialize_program
from retouch.goal import GOAL_DIM, GoalDescriptor
from retouch.grm import ConstantReward, GrmModel
from retouch.image import ImageBuffer
from retouch.policy import (
    ACTION_DIM,
    ACTION_SCALE,
    FEATURE_DIM,
    GLOBAL_ACTIONS,
    SPARSITY,
    GrpoConfig,
    PolicyModel,
    SingularSystemError,
    decode_action,
    encode_program,
    fit_sft,
    format_reward,
    group_advantages,
    load_model,
    log_prob_grad,
    mean_program,
    model_from_text,
    policy_features,
    sample_action,
    save_model,
    surrogate_objective,
    train_grpo,
)

GOAL = GoalDescriptor("warm", {"mean_luma": 0.05})
HINT = MaskSpec.radial(0.5, 0.5, 0.3, 0.2)


# --- features and actions -----------------------------------------------------------


def test_feature_layout():
    img = random_image(0, 8, 8)
    x = policy_features(img, GOAL)
    assert x.shape == (FEATURE_DIM,) and FEATURE_DIM == 6 + 8 + GOAL_DIM
    assert np.array_equal(x, policy_features(ImageBuffer(img.data.copy()), GOAL))
    assert np.array_equal(x[14:], GOAL.encode())


def test_mid_gray_histogram():
    from retouch.image import srgb_to_linear

    gray = ImageBuffer.filled(6, 6, srgb_to_linear(0.5))
    hist = policy_features(gray, GOAL)[6:14]
    # tone 0.5 has luma 0.5, which falls in bin floor(0.5 * 8) = 4
    assert np.allclose(hist, np.eye(8)[4])


def test_goal_without_deltas_has_zero_slots():
    x = policy_features(random_image(1), GoalDescriptor("vivid"))
    assert np.all(x[14 + 7 :] == 0.0)


def test_near_zero_action_is_nearly_empty_program():
    # std exp(-6) ~ 0.0025 is 0.25 native units for the x100 sliders, so only
    # draws beyond two sigma survive the 0.5-unit sparsity rule
    m = PolicyModel.initial(log_std=-6.0)
    programs = [sample_action(m, np.ones(FEATURE_DIM), seed)[1] for seed in range(50)]
    assert sum(p == EditProgram() for p in programs) >= 25
    for p in programs:
        assert all(abs(op.value) < 1.5 for op in p.ops)


def test_clamp_keeps_raw():
    raw = np.zeros(ACTION_DIM)
    raw[0] = 1.3
    p = decode_action(raw)
    assert p.scalar("exposure") == 5.0
    assert raw[0] == 1.3
    assert format_reward(raw) == 0.0


GOLDEN_SAMPLE = (
    "{temperature=+27.607556653972015; tint=+34.60144222515759; exposure=+0.5604957450772702; "
    "contrast=-38.258877183093546; highlights=-71.77457349077929; shadows=-47.904506928941395; "
    "whites=+4.702985607631282; blacks=-11.633914814596528; vibrance=-0.6180800433711147; "
    "saturation=-31.3817323370461}"
)


def test_sample_action_golden():
    # recorded from the first run with the default initial model
    x = policy_features(random_image(0, 8, 8), GOAL)
    raw, p = sample_action(PolicyModel.initial(), x, 42)
    assert serialize_program(p) == GOLDEN_SAMPLE
    raw2, p2 = sample_action(PolicyModel.initial(), x, 42)
    assert np.array_equal(raw, raw2) and p == p2


def test_local_actions_need_region_hint():
    raw = np.full(ACTION_DIM, 0.3)
    assert not decode_action(raw).local_ops()
    (op,) = decode_action(raw, HINT).local_ops()
    assert op.mask == HINT and op.exposure == pytest.approx(1.5) and op.saturation == pytest.approx(30.0)


@pytest.mark.parametrize("raw, want", [(np.zeros(ACTION_DIM), 1.0), (np.r_[1.3, np.zeros(12)], 0.0), (np.r_[1.0, -1.0, np.zeros(11)], 1.0)])
def test_format_reward(raw, want):
    assert format_reward(raw) == want


@given(st.lists(st.floats(-1.5, 1.5), min_size=ACTION_DIM, max_size=ACTION_DIM))
def test_encode_decode_round_trip(vals):
    raw = np.array(vals)
    clamped = np.clip(raw, -1, 1)
    # sub-threshold components decode to no op, so they come back as zero
    kept = np.where(np.abs(clamped * ACTION_SCALE) >= SPARSITY, clamped, 0.0)
    assert np.allclose(encode_program(decode_action(raw, HINT)), kept, atol=1e-9, rtol=0)


def test_encode_known_program():
    p = EditProgram((ScalarOp("exposure", 2.5), ScalarOp("saturation", -40.0), LocalOp(1, HINT, temperature=10.0)))
    a = encode_program(p)
    assert a[GLOBAL_ACTIONS.index("exposure")] == 0.5
    assert a[GLOBAL_ACTIONS.index("saturation")] == -0.4
    assert a[-1] == 0.1


def test_log_std_bounds_enforced():
    m = PolicyModel(np.zeros((ACTION_DIM, FEATURE_DIM)), np.full(ACTION_DIM, -20.0))
    assert np.all(m.log_std == -6.0)
    with pytest.raises(ValueError):
        PolicyModel(np.full((ACTION_DIM, FEATURE_DIM), np.inf), np.zeros(ACTION_DIM))


# --- SFT ----------------------------------------------------------------------------


def _demos(n, seed=0):
    return [(t.before, t.goal, t.program) for t in generate_tasks("quality", n, seed)]


def test_single_demo_exact_fit():
    demos = _demos(1)
    m = fit_sft(demos, ridge=1e-9)
    img, goal, prog = demos[0]
    pred = m.mean_map @ policy_features(img, goal)
    assert np.allclose(pred, encode_program(prog), atol=1e-6, rtol=0)


def test_huge_ridge_shrinks_to_zero():
    m = fit_sft(_demos(5), ridge=1e12)
    assert np.max(np.abs(m.mean_map)) < 1e-9


def test_duplicate_demos_same_solution():
    demos = _demos(6)
    a = fit_sft(demos)
    b = fit_sft(demos * 3)
    assert np.allclose(a.mean_map, b.mean_map, atol=1e-12, rtol=0)


def test_singular_without_ridge():
    with pytest.raises(SingularSystemError):
        fit_sft(_demos(2), ridge=0.0)
    with pytest.raises(ValueError):
        fit_sft([])


def test_sft_initial_log_std():
    assert np.all(fit_sft(_demos(3)).log_std == -1.0)


# --- GRPO ---------------------------------------------------------------------------


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=16))
def test_advantages_normalised(rewards):
    r = np.array(rewards)
    a = group_advantages(r)
    s = r.std()
    if s == 0:
        assert not a.any()
        return
    # (r - mean) / (std + 1e-8); cancellation noise scales with |r| / std
    assert np.allclose(a * (s + 1e-8), r - r.mean(), rtol=0, atol=1e-12 * max(1.0, np.abs(r).max()))
    if s > 1e-3:
        assert abs(a.mean()) <= 1e-6
        assert a.std() == pytest.approx(s / (s + 1e-8), abs=1e-9)


def test_policy_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    m = PolicyModel(rng.normal(0, 0.1, (ACTION_DIM, FEATURE_DIM)), rng.uniform(-2, 0, ACTION_DIM))
    x = rng.normal(0, 1, FEATURE_DIM)
    raws = rng.normal(0, 0.5, (8, ACTION_DIM))
    w = group_advantages(rng.normal(0, 1, 8))
    active = np.r_[np.ones(10), np.zeros(3)].astype(bool)
    gW, gls = log_prob_grad(m, x, raws, w, active)
    h = 1e-6
    for _ in range(30):
        i, j = rng.integers(ACTION_DIM), rng.integers(FEATURE_DIM)
        up, dn = m.mean_map.copy(), m.mean_map.copy()
        up[i, j] += h
        dn[i, j] -= h
        fd = (surrogate_objective(PolicyModel(up, m.log_std), x, raws, w, active) - surrogate_objective(PolicyModel(dn, m.log_std), x, raws, w, active)) / (2 * h)
        assert abs(fd - gW[i, j]) <= 1e-4 * max(abs(fd), abs(gW[i, j]), 1e-6)
    for i in range(ACTION_DIM):
        up, dn = m.log_std.copy(), m.log_std.copy()
        up[i] += h
        dn[i] -= h
        fd = (surrogate_objective(PolicyModel(m.mean_map, up), x, raws, w, active) - surrogate_objective(PolicyModel(m.mean_map, dn), x, raws, w, active)) / (2 * h)
        assert abs(fd - gls[i]) <= 1e-4 * max(abs(fd), abs(gls[i]), 1e-6)


def _tasks(n=4):
    return generate_tasks("quality", n, 1, size=12)


def test_constant_reward_leaves_model_unchanged():
    # exploration narrow enough that every raw action stays in range, so the
    # format bonus is constant too
    m = PolicyModel(np.zeros((ACTION_DIM, FEATURE_DIM)), np.full(ACTION_DIM, -3.0))
    res = train_grpo(m, ConstantReward(4.0), _tasks(), GrpoConfig(steps=5, tasks_per_step=0))
    assert res.model.same_as(m)
    assert res.degenerate_groups == 5 * 4


def test_reward_shift_invariance():
    sft = fit_sft(_demos(8))
    grm = GrmModel.initial()
    cfg = GrpoConfig(steps=3, tasks_per_step=0, explore_log_std=-2.0)
    from retouch.grm import score

    a = train_grpo(sft, grm, _tasks(), cfg).model
    b = train_grpo(sft, lambda bf, af, g: score(grm, bf, af, g) + 1234.5, _tasks(), cfg).model
    assert np.allclose(a.mean_map, b.mean_map, atol=1e-9, rtol=0)
    assert np.allclose(a.log_std, b.log_std, atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", [0, 1])
def test_quadratic_bowl_norm_decreases(seed):
    task = SimpleNamespace(before=random_image(0, 4, 4), goal=GOAL)
    x = policy_features(task.before, task.goal)
    W0 = np.outer(np.full(ACTION_DIM, 0.6), x) / (x @ x)
    m = PolicyModel(W0, np.full(ACTION_DIM, -1.5))
    active = slice(0, len(GLOBAL_ACTIONS))  # no region hint, so local dims never move

    def bowl(before, after, goal, raw):
        return -float(np.sum(raw**2))

    norms = [np.linalg.norm((m.mean_map @ x)[active])]
    # a run of k steps replays the first k steps of a longer run exactly
    for steps in range(1, 51):
        cfg = GrpoConfig(group_size=32, steps=steps, lr=0.003, adam=False, seed=seed)
        res = train_grpo(m, None, [task], cfg, reward_fn=bowl)
        norms.append(np.linalg.norm((res.model.mean_map @ x)[active]))
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.25 * norms[0]


def test_grpo_deterministic_and_thread_independent():
    sft = fit_sft(_demos(8))
    cfg = GrpoConfig(steps=3, tasks_per_step=2, explore_log_std=-2.5, seed=4)
    a = train_grpo(sft, GrmModel.initial(), _tasks(), cfg, threads=1)
    b = train_grpo(sft, GrmModel.initial(), _tasks(), cfg, threads=4)
    assert a.model.same_as(b.model)
    assert a.reward_trace == b.reward_trace


def test_grpo_argument_errors():
    with pytest.raises(ValueError):
        train_grpo(PolicyModel.initial(), GrmModel.initial(), _tasks(), GrpoConfig(group_size=1))
    with pytest.raises(ValueError):
        train_grpo(PolicyModel.initial(), GrmModel.initial(), [], GrpoConfig())


def test_explore_log_std_resets_scale():
    sft = fit_sft(_demos(4))
    res = train_grpo(sft, ConstantReward(), _tasks(), GrpoConfig(steps=1, explore_log_std=-3.5))
    assert np.all(res.model.log_std == -3.5)


# --- persistence --------------------------------------------------------------------


def test_policy_file_round_trip(tmp_path):
    m = fit_sft(_demos(5))
    path = tmp_path / "p.pol"
    save_model(m, path)
    assert load_model(path).same_as(m)
    with pytest.raises(ValueError):
        model_from_text("retouch-grm 1\n")


def test_mean_program_uses_region_hint():
    m = PolicyModel(np.zeros((ACTION_DIM, FEATURE_DIM)), np.zeros(ACTION_DIM))
    img = random_image(2)
    assert mean_program(m, img, GoalDescriptor("warm", region_hint=HINT)) == EditProgram()
