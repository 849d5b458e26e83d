import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ndigo.gradcheck import check_params
from ndigo.gridworld import EnvConfig, reset
from ndigo.rewards import (
    ICMModel,
    RewardGenerator,
    RewardKind,
    RewardSpec,
    icm_reward,
    ndigo_reward,
    pe_reward,
    pg_reward,
)
from ndigo.world_model import N_CLASSES, Batch, FramePrediction, ModelConfig, WorldModel, frame_loss

MINI = ModelConfig(conv1=2, conv2=2, fc=6, gru=5, head_hidden=4, K=3)
FIXED = EnvConfig.from_dict({"objects": [{"kind": "fixed", "room": "center"},
                                         {"kind": "white_noise", "room": "upper"}]})


def rollout(cfg, seed, T, actions=None):
    rng = np.random.default_rng(seed)
    actions = rng.integers(5, size=T) if actions is None else np.asarray(actions)
    w, o = reset(cfg, seed)
    obs = [o] + [w.step(int(a)) for a in actions]
    return np.stack(obs)[None], actions[None]


def test_ndigo_examples():
    assert ndigo_reward(1.3, 1.3) == 0.0
    assert ndigo_reward(-np.log(0.4), -np.log(0.8)) == pytest.approx(np.log(2), abs=1e-12)


@given(st.floats(0, 50), st.floats(0, 50))
def test_ndigo_antisymmetric(a, b):
    assert ndigo_reward(a, b) == -ndigo_reward(b, a)


def test_ndigo_bounded_by_floor():
    wm = WorldModel(3, MINI, 0)
    obs, acts = rollout(FIXED, 0, 30)
    rew, _ = RewardGenerator(RewardSpec(RewardKind.NDIGO, H=2), wm).episode_rewards(obs, acts, 0, 30)
    # each frame loss lies in [0, n_terms * |ln floor|]
    bound = (25 + 2) * -np.log(MINI.prob_floor)
    assert np.abs(rew).max() <= bound


def _exact_walls(obs):
    return (obs[..., 0].reshape(-1) > 0).astype(np.float64)


def test_pe_examples():
    obs = np.zeros((5, 5, 2), dtype=np.uint8)
    obs.reshape(25, 2)[12, 1] = 1
    walls = _exact_walls(obs)
    perfect = FramePrediction(walls, np.eye(N_CLASSES)[[12]])
    uniform = FramePrediction(walls, np.full((1, N_CLASSES), 1 / N_CLASSES))
    assert pe_reward(perfect, obs) == 0.0
    assert pe_reward(uniform, obs) == pytest.approx(np.log(26), abs=1e-12)
    assert pg_reward(None, perfect, obs) == 0.0
    assert pg_reward(uniform, uniform, obs) == 0.0
    assert pg_reward(uniform, perfect, obs) == pytest.approx(np.log(26), abs=1e-12)


def test_icm_reward_example():
    icm = ICMModel(3, MINI, 0, hidden=4)
    for k in icm.forward_model.params:
        if k.startswith("forward."):
            icm.params[k][...] = 0.0
    b = np.zeros((1, MINI.gru))
    target = np.zeros((1, MINI.gru))
    target[0, :2] = (3.0, 4.0)
    assert icm_reward(icm, b, [0], target)[0] == 25.0
    assert icm_reward(icm, b, [0], np.zeros((1, MINI.gru)))[0] == 0.0


def _icm_batch(seed=0, T=6):
    obs, acts = rollout(FIXED, seed, T)
    obs2, acts2 = rollout(FIXED, seed + 1, T)
    return Batch(np.concatenate([obs, obs2]), np.concatenate([acts, acts2]), np.array([0, 0]),
                 np.zeros((2, MINI.gru)))


def test_icm_gradients_and_isolation():
    icm = ICMModel(3, MINI, 0, hidden=6)
    rng = np.random.default_rng(0)
    for k, v in icm.params.items():
        if k.endswith(".b") or k.endswith(".bx") or k.endswith(".bh"):
            v[...] = 0.1 * rng.standard_normal(v.shape)
    batch = _icm_batch()
    _, grads, _ = icm.losses(batch, with_grads=True)
    B = len(batch.actions)
    inv = lambda: float(icm.losses(batch)[0]["inverse"].sum() / B)  # noqa: E731
    fwd = lambda: float(icm.losses(batch)[0]["forward"].sum() / B)  # noqa: E731
    own = {k: v for k, v in icm.params.items() if not k.startswith("forward.")}
    fwd_params = {k: v for k, v in icm.params.items() if k.startswith("forward.")}
    # encoder and inverse weights see the inverse loss only
    assert check_params(inv, own, grads, seed=1) < 1e-4
    assert check_params(fwd, fwd_params, grads, seed=2) < 1e-4


def test_icm_forward_loss_leaves_encoder_alone():
    icm = ICMModel(3, MINI, 0, hidden=6)
    for k in icm.inverse.params:
        if k.startswith("inverse."):
            icm.params[k][...] = 0.0
    # with a constant inverse model only the forward loss could move the encoder
    _, grads, _ = icm.losses(_icm_batch(), with_grads=True)
    enc = [k for k in grads if k.startswith("enc.")]
    assert enc and all(not grads[k].any() for k in enc)
    assert any(grads[k].any() for k in grads if k.startswith("forward."))


def test_icm_zero_lr_and_empty_batch():
    icm = ICMModel(3, ModelConfig(**{**MINI.__dict__, "lr": 0.0}), 0, hidden=4)
    before = {k: v.copy() for k, v in icm.params.items()}
    icm.train_step(_icm_batch())
    for k in before:
        np.testing.assert_array_equal(before[k], icm.params[k])
    with pytest.raises(ValueError):
        icm.train_step(Batch(np.zeros((0, 2, 5, 5, 3)), np.zeros((0, 1), int), np.zeros(0, int),
                             np.zeros((0, MINI.gru))))


def test_icm_reward_vanishes_on_deterministic_toy():
    """Two alternating frames with a fixed action pattern: the forward model
    learns the belief dynamics exactly."""
    cfg = ModelConfig(conv1=2, conv2=2, fc=6, gru=4, head_hidden=4, K=1, lr=3e-3)
    icm = ICMModel(2, cfg, 0, hidden=16)
    a = np.zeros((5, 5, 2), dtype=np.uint8)
    b = a.copy()
    b.reshape(25, 2)[6, 1] = 1
    obs = np.stack([a, b] * 4)[None]
    acts = np.array([[0, 1] * 3 + [0]])
    batch = Batch(obs, acts, np.array([0]), np.zeros((1, 4)))
    for _ in range(1500):
        icm.train_step(batch)
    rew, _ = RewardGenerator(RewardSpec(RewardKind.ICM), icm).episode_rewards(obs, acts, 0, 7)
    assert rew.max() < 1e-3


def test_ndigo_matches_hand_computation():
    wm = WorldModel(3, MINI, 3)
    obs, acts = rollout(FIXED, 3, 12)
    H = 2
    rew, hs = RewardGenerator(RewardSpec(RewardKind.NDIGO, H=H), wm).episode_rewards(obs, acts, 0, 12)
    assert (rew[0, :H] == 0).all()
    for s in range(H, 12):
        t = s - H + 1
        short = frame_loss(wm.predict(hs[0, t], acts[0, t : t + H], H), obs[0, t + H])
        long = frame_loss(wm.predict(hs[0, t - 1], acts[0, t - 1 : t + H], H + 1), obs[0, t + H])
        assert rew[0, s] == pytest.approx(float(long - short), abs=1e-12)


def test_pe_matches_hand_computation():
    wm = WorldModel(3, MINI, 3)
    obs, acts = rollout(FIXED, 4, 8)
    rew, hs = RewardGenerator(RewardSpec(RewardKind.PE), wm).episode_rewards(obs, acts, 0, 8)
    for s in range(8):
        pe = pe_reward(wm.predict(hs[0, s], acts[0, s : s + 1], 1), obs[0, s + 1])
        assert rew[0, s] == pytest.approx(float(pe), abs=1e-12)
    assert (rew >= 0).all()


@pytest.mark.parametrize("kind", ["ndigo-2", "pe", "pg", "icm"])
def test_reward_ignores_future_actions(kind):
    spec = RewardSpec.parse(kind)
    model = ICMModel(3, MINI, 0, hidden=4) if spec.kind is RewardKind.ICM else WorldModel(3, MINI, 0)
    gen = RewardGenerator(spec, model)
    if spec.kind is RewardKind.PG:
        gen.target = WorldModel(3, MINI, 9)
    T, s = 16, 7
    obs, acts = rollout(FIXED, 5, T)
    alt = acts.copy()
    alt[0, s + 1 :] = (alt[0, s + 1 :] + 1) % 5
    obs_alt, _ = rollout(FIXED, 5, T, alt[0])
    r1, _ = gen.episode_rewards(obs, acts, 0, T)
    r2, _ = gen.episode_rewards(obs_alt, alt, 0, T)
    np.testing.assert_array_equal(r1[:, : s + 1], r2[:, : s + 1])


def test_partial_windows_agree_with_full_episode():
    gen = RewardGenerator(RewardSpec(RewardKind.NDIGO, H=2), WorldModel(3, MINI, 1))
    obs, acts = rollout(FIXED, 6, 20)
    full, _ = gen.episode_rewards(obs, acts, 0, 20)
    parts = [gen.episode_rewards(obs, acts, a, b)[0] for a, b in ((0, 7), (7, 15), (15, 20))]
    np.testing.assert_array_equal(np.concatenate(parts, axis=1), full)


def test_pg_zero_before_first_copy_then_refreshes():
    wm = WorldModel(3, MINI, 0)
    gen = RewardGenerator(RewardSpec(RewardKind.PG, pg_copy_period=2), wm)
    obs, acts = rollout(FIXED, 1, 10)
    assert not gen.episode_rewards(obs, acts, 0, 10)[0].any()
    gen.on_learner_step()
    assert gen.target is None
    gen.on_learner_step()
    assert gen.target is not None
    # target equals live right after the copy
    np.testing.assert_allclose(gen.episode_rewards(obs, acts, 0, 10)[0], 0.0, atol=1e-12)


def test_pg_vanishes_after_convergence():
    cfg = ModelConfig(**{**MINI.__dict__, "K": 1, "lr": 3e-3})
    wm = WorldModel(2, cfg, 0)
    gen = RewardGenerator(RewardSpec(RewardKind.PG, pg_copy_period=2), wm)
    obs, acts = rollout(EnvConfig.from_dict({"objects": [{"kind": "fixed", "room": "center"}]}), 2, 20,
                        actions=[0] * 20)
    batch = Batch(obs, acts, np.array([0]), wm.initial_state(1))
    pg = []
    for _ in range(400):
        pg.append(gen.episode_rewards(obs, acts, 0, 20)[0].mean())
        wm.train_step(batch)
        gen.on_learner_step()
    assert abs(np.mean(pg[-50:])) < 0.05


def test_spec_parse_and_validate():
    assert RewardSpec.parse("ndigo-4") == RewardSpec(RewardKind.NDIGO, H=4)
    assert RewardSpec.parse("PE").kind is RewardKind.PE
    assert RewardSpec.parse("ndigo-2").label == "NDIGO-2"
    with pytest.raises(ValueError):
        RewardSpec.parse("count")
    with pytest.raises(ValueError):
        RewardSpec(RewardKind.NDIGO, H=4).validate(4)
    with pytest.raises(ValueError):
        RewardSpec(RewardKind.NDIGO, H=0).validate(4)
    RewardSpec(RewardKind.NDIGO, H=3).validate(4)
    with pytest.raises(TypeError):
        RewardGenerator(RewardSpec(RewardKind.ICM), WorldModel(3, MINI, 0))
