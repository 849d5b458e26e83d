import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndigo.gradcheck import check_params
from ndigo.gridworld import EnvConfig, reset
from ndigo.world_model import (
    ABSENT,
    N_CLASSES,
    Batch,
    FramePrediction,
    ModelConfig,
    WorldModel,
    frame_loss,
    observation_targets,
    representation_loss,
)

MINI = ModelConfig(conv1=2, conv2=2, fc=6, gru=5, head_hidden=4, K=3)


def random_batch(rng, B=2, T=5, c=3, H=5):
    obs = np.zeros((B, T + 1, 5, 5, c), dtype=np.uint8)
    obs[..., 0] = rng.random((B, T + 1, 5, 5)) < 0.4
    for ch in range(1, c):
        present = rng.random((B, T + 1)) < 0.7
        pix = rng.integers(25, size=(B, T + 1))
        flat = obs[..., ch].reshape(B, T + 1, 25)
        flat[present, pix[present]] = 1
        obs[..., ch] = flat.reshape(B, T + 1, 5, 5)
    return Batch(obs, rng.integers(5, size=(B, T)), rng.integers(5, size=B),
                 0.1 * rng.standard_normal((B, H)))


def gridworld_batch(B=2, T=30, seed=0):
    cfg = EnvConfig.from_dict({"objects": [{"kind": "fixed", "room": "center"},
                                           {"kind": "white_noise", "room": "upper"}]})
    rng = np.random.default_rng(seed)
    obs = np.zeros((B, T + 1, 5, 5, 3), dtype=np.uint8)
    acts = rng.integers(5, size=(B, T))
    for i in range(B):
        w, o = reset(cfg, seed + i)
        obs[i, 0] = o
        for t in range(T):
            obs[i, t + 1] = w.step(int(acts[i, t]))
    return obs, acts


def test_zero_weights_encoder_fixed_point():
    wm = WorldModel(3, MINI, 0)
    for v in wm.params.values():
        v[...] = 0.0
    rng = np.random.default_rng(1)
    obs = rng.integers(0, 2, size=(4, 5, 5, 3))
    b = wm.encoder.step(obs, rng.integers(5, size=4), wm.initial_state(4))
    np.testing.assert_array_equal(b, 0.0)
    h = rng.standard_normal((4, MINI.gru))
    np.testing.assert_allclose(wm.encoder.step(obs, np.zeros(4, int), h), 0.5 * h)


def test_encode_deterministic():
    wm = WorldModel(3, MINI, 0)
    rng = np.random.default_rng(2)
    obs = rng.integers(0, 2, size=(3, 5, 5, 3))
    h = rng.standard_normal((3, MINI.gru))
    a = rng.integers(5, size=3)
    np.testing.assert_array_equal(wm.encoder.step(obs, a, h), wm.encoder.step(obs, a, h))


def test_encoder_rejects_wrong_channels():
    wm = WorldModel(3, MINI, 0)
    with pytest.raises(ValueError):
        wm.encoder.step(np.zeros((1, 5, 5, 2)), np.zeros(1, int), wm.initial_state(1))


@pytest.mark.parametrize("seed", range(5))
def test_weight_perturbation_lipschitz(seed):
    """Bump one feature-layer weight and bound the change of b_t by the
    Jacobian norms of the downstream ReLU and gated cell."""
    wm = WorldModel(3, ModelConfig(), seed)
    enc = wm.encoder
    rng = np.random.default_rng(seed)
    obs = rng.integers(0, 2, size=(1, 5, 5, 3))
    h = rng.standard_normal((1, enc.hidden_size))
    a = np.array([2])
    b0 = enc.step(obs, a, h)
    z, cache = enc.features(obs)
    h2 = np.maximum(cache[2], 0.0).reshape(1, -1)
    i = int(np.argmax(np.abs(h2)))
    active = np.flatnonzero(cache[4][0] > 0)
    j = int(active[rng.integers(len(active))])
    delta = 1e-6
    enc.fc.params[enc.fc.W][i, j] += delta
    b1 = enc.step(obs, a, h)
    dz = delta * abs(h2[0, i])
    P, H = enc.gru.params, enc.hidden_size
    Wx = P[enc.gru.Wx][: enc.feature_size]
    x = np.concatenate([z, np.eye(5)[a]], axis=1)
    gh = h @ P[enc.gru.Wh] + P[enc.gru.bh]
    _, (_, _, r, u, n, _) = enc.gru.forward(x, h)
    norm = lambda m: np.linalg.norm(m, 2)  # noqa: E731
    L = (np.abs(h - n).max() * 0.25 * norm(Wx[:, H:2 * H]) + norm(Wx[:, 2 * H:])
         + 0.25 * np.abs(gh[:, 2 * H:]).max() * norm(Wx[:, :H]))
    assert 0 < np.linalg.norm(b1 - b0) <= 1.01 * L * dz


def test_zero_head_is_uniform():
    wm = WorldModel(2, MINI, 0)
    for k in wm.heads[0].params:
        if k.startswith("head1."):
            wm.params[k][...] = 0.0
    pred = wm.predict(np.ones(MINI.gru), [3], 1)
    np.testing.assert_allclose(pred.objects, 1.0 / N_CLASSES, atol=1e-12)
    np.testing.assert_allclose(pred.wall, 0.5)


def test_predict_validation():
    wm = WorldModel(2, MINI, 0)
    b = np.zeros(MINI.gru)
    with pytest.raises(ValueError):
        wm.predict(b, [], 0)
    with pytest.raises(ValueError):
        wm.predict(b, [0, 1, 2, 3], 4)
    with pytest.raises(ValueError):
        wm.predict(b, [0, 1], 1)


@settings(max_examples=20, deadline=None)
@given(k=st.integers(1, 3), seq=st.lists(st.integers(0, 4), min_size=3, max_size=3),
       tail=st.lists(st.integers(0, 4), min_size=3, max_size=3))
def test_head_k_ignores_later_actions(k, seq, tail):
    wm = WorldModel(2, MINI, 0)
    b = np.linspace(-1, 1, MINI.gru)
    other = seq[:k] + tail[k:]
    p1, p2 = wm.predict(b, seq[:k], k), wm.predict(b, other[:k], k)
    np.testing.assert_array_equal(p1.objects, p2.objects)


def test_predictions_normalised_and_floored():
    wm = WorldModel(3, MINI, 0)
    rng = np.random.default_rng(0)
    pred = wm.predict(50 * rng.standard_normal((10, MINI.gru)), rng.integers(5, size=(10, 2)), 2)
    np.testing.assert_allclose(pred.objects.sum(axis=-1), 1.0, atol=1e-12)
    assert pred.objects.min() >= 1e-6 and pred.wall.min() >= 1e-6 and pred.wall.max() <= 1 - 1e-6


def _obs_one_object(pixel):
    obs = np.zeros((5, 5, 2), dtype=np.uint8)
    obs[2, :, 0] = 1
    if pixel is not None:
        obs.reshape(25, 2)[pixel, 1] = 1
    return obs


def test_frame_loss_examples():
    obs = _obs_one_object(7)
    wall, cls = observation_targets(obs)
    exact_wall = wall.copy()
    perfect = FramePrediction(exact_wall, np.eye(N_CLASSES)[cls])
    assert frame_loss(perfect, obs) == 0.0
    uniform = FramePrediction(exact_wall, np.full((1, N_CLASSES), 1.0 / N_CLASSES))
    assert frame_loss(uniform, obs) == pytest.approx(np.log(26), abs=1e-12)
    quarter = np.full((1, N_CLASSES), 0.75 / 25)
    quarter[0, 7] = 0.25
    assert frame_loss(FramePrediction(exact_wall, quarter), obs) == pytest.approx(np.log(4), abs=1e-12)
    _, cls_absent = observation_targets(_obs_one_object(None))
    assert cls_absent[0] == ABSENT


def test_frame_loss_nonnegative_and_zero_iff_certain():
    wm = WorldModel(3, MINI, 0)
    rng = np.random.default_rng(3)
    batch = random_batch(rng)
    pred = wm.predict(rng.standard_normal((6, MINI.gru)), rng.integers(5, size=(6, 1)), 1)
    assert (frame_loss(pred, batch.obs[0]) > 0).all()


def test_model_gradients():
    rng = np.random.default_rng(0)
    wm = WorldModel(3, MINI, 0)
    for k, v in wm.params.items():
        if k.endswith(".b") or k.endswith(".bx") or k.endswith(".bh"):
            v[...] = 0.1 * rng.standard_normal(v.shape)
    batch = random_batch(rng)

    def loss():
        losses, _ = wm.sequence_losses(batch)
        return representation_loss(losses) / len(batch.actions)

    _, grads, _ = wm.sequence_losses(batch, with_grads=True)
    assert check_params(loss, wm.params, grads, seed=1) < 1e-4


def test_loss_decomposition():
    rng = np.random.default_rng(4)
    wm = WorldModel(3, MINI, 0)
    batch = random_batch(rng, B=2, T=4)
    losses, hs = wm.sequence_losses(batch)
    total = 0.0
    for k, table in losses.items():
        for i in range(2):
            for t in range(table.shape[1]):
                pred = wm.predict(hs[i, t], batch.actions[i, t:t + k], k)
                single = float(frame_loss(pred, batch.obs[i, t + k]))
                assert single == pytest.approx(table[i, t], rel=1e-12, abs=1e-12)
                total += single
    assert set(losses) == {1, 2, 3}
    assert representation_loss(losses) == pytest.approx(total, rel=1e-12)


def test_zero_lr_is_identity():
    rng = np.random.default_rng(5)
    wm = WorldModel(3, ModelConfig(**{**MINI.__dict__, "lr": 0.0}), 0)
    batch = random_batch(rng)
    before = {k: v.copy() for k, v in wm.params.items()}
    l1 = wm.train_step(batch)
    l2 = wm.train_step(batch)
    for k in before:
        np.testing.assert_array_equal(before[k], wm.params[k])
    for k in l1:
        np.testing.assert_array_equal(l1[k], l2[k])


def test_empty_batch_rejected():
    wm = WorldModel(3, MINI, 0)
    with pytest.raises(ValueError):
        wm.train_step(Batch(np.zeros((0, 2, 5, 5, 3)), np.zeros((0, 1), int), np.zeros(0, int),
                            np.zeros((0, MINI.gru))))


def test_learns_single_transition():
    cfg = ModelConfig(conv1=2, conv2=2, fc=8, gru=8, head_hidden=8, K=1)
    wm = WorldModel(2, cfg, 0)
    obs = np.stack([_obs_one_object(3), _obs_one_object(4)])[None]
    batch = Batch(obs, np.array([[3]]), np.array([0]), wm.initial_state(1))
    for _ in range(2000):
        losses = wm.train_step(batch)
    assert losses[1][0, 0] < 0.05


def test_training_deterministic():
    obs, acts = gridworld_batch(T=12)
    runs = []
    for _ in range(2):
        wm = WorldModel(3, MINI, 7)
        batch = Batch(obs, acts, np.zeros(2, int), wm.initial_state(2))
        for _ in range(3):
            wm.train_step(batch)
        runs.append({k: v.copy() for k, v in wm.params.items()})
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k], runs[1][k])


def test_training_reduces_loss_on_gridworld():
    obs, acts = gridworld_batch(B=4, T=30)
    wm = WorldModel(3, ModelConfig(K=2, lr=3e-3), 0)
    batch = Batch(obs, acts, np.zeros(4, int), wm.initial_state(4))
    first = representation_loss(wm.train_step(batch))
    for _ in range(60):
        last = representation_loss(wm.train_step(batch))
    assert last < 0.5 * first
