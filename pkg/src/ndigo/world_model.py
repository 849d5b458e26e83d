"""Recurrent world model: observation encoder, gated recurrent belief and K
open-loop frame predictors trained with cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .gridworld import NUM_ACTIONS, VIEW
from .nn import (
    MLP,
    Adam,
    Conv2d,
    GRUCell,
    Linear,
    Params,
    bernoulli_nll,
    bind,
    categorical_nll,
    sigmoid,
    softmax,
)

N_PIXELS = VIEW * VIEW
ABSENT = N_PIXELS  # class index for "object not in view"
N_CLASSES = N_PIXELS + 1


@dataclass(frozen=True)
class ModelConfig:
    conv1: int = 4
    conv2: int = 4
    fc: int = 32
    gru: int = 32
    head_hidden: int = 32
    K: int = 10
    lr: float = 5e-4
    batch_size: int = 16
    prob_floor: float = 1e-6
    clip_norm: float | None = None

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in MODEL_PRESETS:
            raise ValueError(f"unknown model preset {name!r}")
        return cls(**{**asdict(MODEL_PRESETS[name]), **overrides})


MODEL_PRESETS = {
    "full": ModelConfig(conv1=16, conv2=16, fc=256, gru=128, head_hidden=64, batch_size=256),
    "tiny": ModelConfig(),
}


def one_hot(actions: np.ndarray) -> np.ndarray:
    return np.eye(NUM_ACTIONS)[np.asarray(actions, dtype=np.int64)]


class Encoder:
    """conv(stride 1) -> ReLU -> conv(stride 2) -> ReLU -> FC -> ReLU gives the
    features z_t; the gated cell folds (z_t, a_{t-1}) into the belief b_t."""

    def __init__(self, name: str, n_channels: int, cfg: ModelConfig, rng: np.random.Generator):
        self.n_channels = n_channels
        self.conv1 = Conv2d(f"{name}.conv1", n_channels, cfg.conv1, 1, rng)
        self.conv2 = Conv2d(f"{name}.conv2", cfg.conv1, cfg.conv2, 2, rng)
        side = self.conv2.out_size(self.conv1.out_size(VIEW))
        self.fc = Linear(f"{name}.fc", side * side * cfg.conv2, cfg.fc, rng)
        self.gru = GRUCell(f"{name}.gru", cfg.fc + NUM_ACTIONS, cfg.gru, rng)
        self.modules = [self.conv1, self.conv2, self.fc, self.gru]

    @property
    def hidden_size(self) -> int:
        return self.gru.n_hidden

    @property
    def feature_size(self) -> int:
        return self.fc.n_out

    def _check(self, obs: np.ndarray) -> None:
        if obs.shape[-3:] != (VIEW, VIEW, self.n_channels):
            raise ValueError(
                f"observation shape {obs.shape[-3:]} != {(VIEW, VIEW, self.n_channels)}"
            )

    def features(self, obs: np.ndarray):
        self._check(obs)
        x = np.asarray(obs, dtype=np.float64)
        a1, c1 = self.conv1.forward(x)
        h1 = np.maximum(a1, 0.0)
        a2, c2 = self.conv2.forward(h1)
        h2 = np.maximum(a2, 0.0)
        a3, c3 = self.fc.forward(h2.reshape(len(x), -1))
        return np.maximum(a3, 0.0), (a1, c1, a2, c2, a3, c3)

    def features_backward(self, dz: np.ndarray, cache, grads: Params) -> None:
        a1, c1, a2, c2, a3, c3 = cache
        d = self.fc.backward(dz * (a3 > 0), c3, grads)
        d = d.reshape(a2.shape) * (a2 > 0)
        d = self.conv2.backward(d, c2, grads)
        self.conv1.backward(d * (a1 > 0), c1, grads, need_dx=False)

    def step(self, obs: np.ndarray, prev_action: np.ndarray, h: np.ndarray) -> np.ndarray:
        """One belief update for a batch: (N,5,5,c), (N,), (N,H) -> (N,H)."""
        z, _ = self.features(obs)
        h_new, _ = self.gru.forward(np.concatenate([z, one_hot(prev_action)], axis=1), h)
        return h_new

    def unroll(self, obs: np.ndarray, prev_actions: np.ndarray, h0: np.ndarray):
        """Encode sequences (B,T,5,5,c) with previous actions (B,T) from state h0.

        Returns beliefs (B,T,H), features (B,T,F) and a cache for backward.
        """
        B, T = obs.shape[:2]
        z, fcache = self.features(obs.reshape(B * T, *obs.shape[2:]))
        z = z.reshape(B, T, -1)
        x = np.concatenate([z, one_hot(prev_actions)], axis=2)
        hs = np.empty((B, T, self.hidden_size))
        caches = []
        h = h0
        for t in range(T):
            h, c = self.gru.forward(x[:, t], h)
            hs[:, t] = h
            caches.append(c)
        return hs, z, (fcache, caches)

    def unroll_backward(self, dhs: np.ndarray, cache, grads: Params,
                        dz: np.ndarray | None = None) -> np.ndarray:
        """Backpropagate through time; ``dz`` adds direct feature gradients."""
        fcache, caches = cache
        B, T, _ = dhs.shape
        F = self.feature_size
        dzs = np.zeros((B, T, F)) if dz is None else dz.copy()
        dh = np.zeros((B, self.hidden_size))
        for t in range(T - 1, -1, -1):
            dx, dh = self.gru.backward(dhs[:, t] + dh, caches[t], grads)
            dzs[:, t] += dx[:, :F]
        self.features_backward(dzs.reshape(B * T, F), fcache, grads)
        return dh


@dataclass
class FramePrediction:
    """Predicted distribution over a 5x5 observation.

    ``wall``: (..., 25) probability that each pixel is a wall.
    ``objects``: (..., n_objects, 26) categorical over the 25 pixels + absent.
    """

    wall: np.ndarray
    objects: np.ndarray


@dataclass
class Batch:
    """Trajectory segments: ``obs`` holds o_0..o_T, ``actions`` a_0..a_{T-1};
    ``prev_action`` is a_{-1} and ``h0`` the belief before o_0."""

    obs: np.ndarray  # (B, T+1, 5, 5, c) uint8
    actions: np.ndarray  # (B, T) int
    prev_action: np.ndarray  # (B,) int
    h0: np.ndarray  # (B, H)

    @property
    def encoder_actions(self) -> np.ndarray:
        return np.concatenate([self.prev_action[:, None], self.actions], axis=1)


def observation_targets(obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split observations (...,5,5,c) into wall bits (...,25) and object
    classes (..., c-1) in 0..25 (25 = absent)."""
    lead = obs.shape[:-3]
    flat = obs.reshape(*lead, N_PIXELS, obs.shape[-1])
    wall = flat[..., 0].astype(np.float64)
    objs = flat[..., 1:]
    present = objs.sum(axis=-2) > 0
    cls = np.where(present, objs.argmax(axis=-2), ABSENT)
    return wall, cls.astype(np.int64)


def frame_loss(pred: FramePrediction, obs: np.ndarray) -> np.ndarray:
    """-ln p(o): wall Bernoulli cross-entropy plus object categorical terms."""
    wall, cls = observation_targets(obs)
    p_wall = np.where(wall > 0, pred.wall, 1.0 - pred.wall)
    p_obj = np.take_along_axis(pred.objects, cls[..., None], axis=-1)[..., 0]
    return -np.log(p_wall).sum(axis=-1) - np.log(p_obj).sum(axis=-1)


class WorldModel:
    def __init__(self, n_channels: int, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.n_objects = n_channels - 1
        rng = np.random.default_rng([seed, 0x776D])
        self.encoder = Encoder("enc", n_channels, cfg, rng)
        H = self.encoder.hidden_size
        out = N_PIXELS + N_CLASSES * self.n_objects
        self.heads = [
            MLP(f"head{k}", H + NUM_ACTIONS * k, cfg.head_hidden, out, rng)
            for k in range(1, cfg.K + 1)
        ]
        self.params: Params = bind(*self.encoder.modules, *self.heads)
        self.optimizer = Adam(self.params, cfg.lr, clip_norm=cfg.clip_norm)

    @property
    def K(self) -> int:
        return self.cfg.K

    @property
    def hidden_size(self) -> int:
        return self.encoder.hidden_size

    def initial_state(self, n: int) -> np.ndarray:
        return np.zeros((n, self.hidden_size))

    # -- prediction -------------------------------------------------------

    def _split(self, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        wall = logits[..., :N_PIXELS]
        objs = logits[..., N_PIXELS:].reshape(*logits.shape[:-1], self.n_objects, N_CLASSES)
        return wall, objs

    def head_logits(self, k: int, b: np.ndarray, actions: np.ndarray):
        """Logits of head k from beliefs (N,H) and action ids (N,k)."""
        x = np.concatenate([b, one_hot(actions).reshape(len(b), -1)], axis=1)
        return self.heads[k - 1].forward(x)

    def predict(self, b: np.ndarray, actions, k: int) -> FramePrediction:
        """p_{t+k|t} for beliefs ``b`` (N,H) or (H,) and k actions each."""
        if not 1 <= k <= self.K:
            raise ValueError(f"horizon {k} outside 1..{self.K}")
        single = np.ndim(b) == 1
        b = np.atleast_2d(b)
        actions = np.asarray(actions, dtype=np.int64).reshape(len(b), -1)
        if actions.shape[1] != k:
            raise ValueError(f"head {k} needs exactly {k} actions, got {actions.shape[1]}")
        logits, _ = self.head_logits(k, b, actions)
        wl, ol = self._split(logits)
        eps = self.cfg.prob_floor
        pred = FramePrediction(
            wall=eps + (1.0 - 2.0 * eps) * sigmoid(wl),
            objects=eps + (1.0 - N_CLASSES * eps) * softmax(ol),
        )
        if single:
            pred = FramePrediction(pred.wall[0], pred.objects[0])
        return pred

    def head_losses(self, k: int, b: np.ndarray, actions: np.ndarray, target_obs: np.ndarray):
        """Cross-entropy of head k (rows of ``b``) against ``target_obs``;
        returns (losses, dlogits, head cache)."""
        logits, cache = self.head_logits(k, b, actions)
        wl, ol = self._split(logits)
        wall, cls = observation_targets(target_obs)
        eps = self.cfg.prob_floor
        lw, gw = bernoulli_nll(wl, wall, eps)
        lo, go = categorical_nll(ol, cls, eps)
        loss = lw.sum(axis=-1) + lo.sum(axis=-1)
        dlogits = np.concatenate([gw, go.reshape(len(go), -1)], axis=1)
        return loss, dlogits, cache

    # -- training ---------------------------------------------------------

    def sequence_losses(self, batch: Batch, with_grads: bool = False):
        """All L_{t+k|t} on a batch: dict k -> (B, T+1-k) array.

        With ``with_grads`` also returns gradients of sum(L)/B.
        """
        B, T = batch.actions.shape
        hs, _, ecache = self.encoder.unroll(batch.obs, batch.encoder_actions, batch.h0)
        losses: dict[int, np.ndarray] = {}
        grads = {k: np.zeros_like(v) for k, v in self.params.items()} if with_grads else None
        dhs = np.zeros_like(hs) if with_grads else None
        H = self.hidden_size
        for k in range(1, min(self.K, T) + 1):
            n = T - k + 1
            win = np.lib.stride_tricks.sliding_window_view(batch.actions, k, axis=1)[:, :n]
            b = hs[:, :n].reshape(B * n, H)
            target = batch.obs[:, k : k + n].reshape(B * n, *batch.obs.shape[2:])
            loss, dlogits, cache = self.head_losses(k, b, win.reshape(B * n, k), target)
            losses[k] = loss.reshape(B, n)
            if with_grads:
                dx = self.heads[k - 1].backward(dlogits / B, cache, grads)
                dhs[:, :n] += dx[:, :H].reshape(B, n, H)
        if with_grads:
            self.encoder.unroll_backward(dhs, ecache, grads)
            return losses, grads, hs
        return losses, hs

    def train_step(self, batch: Batch) -> dict[int, np.ndarray]:
        """One optimizer step on L_repr; returns the pre-update losses."""
        if len(batch.actions) == 0:
            raise ValueError("empty batch")
        losses, grads, _ = self.sequence_losses(batch, with_grads=True)
        self.optimizer.step(grads)
        return losses


def representation_loss(losses: dict[int, np.ndarray]) -> float:
    return float(sum(v.sum() for v in losses.values()))
