"""Intrinsic rewards: NDIGO-H, prediction error, prediction gain and the
recurrent ICM variant.

Indexing: the reward for transition ``s`` (action a_s, next observation
o_{s+1}) is ``rewards[:, s]``.  NDIGO-H credits the loss difference on
o_{t+H} to step s = t+H-1, so it only uses the history up to o_s and a_s.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

import numpy as np

from .gridworld import NUM_ACTIONS, Action
from .nn import MLP, Adam, Params, bind, categorical_nll, squared_error
from .world_model import Batch, Encoder, FramePrediction, ModelConfig, WorldModel, frame_loss, one_hot


class RewardKind(str, enum.Enum):
    NDIGO = "ndigo"
    PE = "pe"
    PG = "pg"
    ICM = "icm"


@dataclass(frozen=True)
class RewardSpec:
    kind: RewardKind = RewardKind.NDIGO
    H: int = 4
    pg_copy_period: int = 2

    @property
    def label(self) -> str:
        return f"NDIGO-{self.H}" if self.kind is RewardKind.NDIGO else self.kind.value.upper()

    def validate(self, K: int) -> None:
        if self.H < 1:
            raise ValueError("horizon must be >= 1")
        # the reward needs the (H+1)-step head evaluated one step earlier
        if self.kind is RewardKind.NDIGO and self.H + 1 > K:
            raise ValueError(f"NDIGO-{self.H} needs K >= {self.H + 1}, model has K={K}")
        if self.pg_copy_period < 1:
            raise ValueError("pg_copy_period must be >= 1")

    @classmethod
    def parse(cls, text: str, **kw) -> "RewardSpec":
        """'ndigo-4', 'pe', 'pg', 'icm'."""
        text = text.lower()
        if text.startswith("ndigo"):
            H = int(text.split("-")[1]) if "-" in text else kw.pop("H", 4)
            return cls(RewardKind.NDIGO, H=H, **kw)
        return cls(RewardKind(text), **kw)


def ndigo_reward(L_long, L_short):
    """Loss on o_{t+H} without o_t minus the loss with it (in nats)."""
    return np.subtract(L_long, L_short)


def pe_reward(pred_1step: FramePrediction, obs_next: np.ndarray):
    return frame_loss(pred_1step, obs_next)


def pg_reward(target_pred: FramePrediction | None, live_pred: FramePrediction, obs_next):
    if target_pred is None:
        return np.zeros(np.shape(frame_loss(live_pred, obs_next)))
    return frame_loss(target_pred, obs_next) - frame_loss(live_pred, obs_next)


# ---------------------------------------------------------------------------
# ICM


class ICMModel:
    """Recurrent encoder shared with the world-model architecture; the frame
    heads are replaced by an inverse model (b_t, z_{t+1}) -> a_t and a
    forward model (b_t, a_t) -> b_{t+1}."""

    def __init__(self, n_channels: int, cfg: ModelConfig, seed: int = 0, hidden: int = 256):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0x49434D])
        self.encoder = Encoder("enc", n_channels, cfg, rng)
        H, F = self.encoder.hidden_size, self.encoder.feature_size
        self.inverse = MLP("inverse", H + F, hidden, NUM_ACTIONS, rng)
        self.forward_model = MLP("forward", H + NUM_ACTIONS, hidden, H, rng)
        self.params: Params = bind(*self.encoder.modules, self.inverse, self.forward_model)
        self.optimizer = Adam(self.params, cfg.lr, clip_norm=cfg.clip_norm)

    @property
    def hidden_size(self) -> int:
        return self.encoder.hidden_size

    def initial_state(self, n: int) -> np.ndarray:
        return np.zeros((n, self.hidden_size))

    def predict_next(self, b: np.ndarray, a: np.ndarray) -> np.ndarray:
        x = np.concatenate([b, one_hot(a)], axis=-1)
        return self.forward_model.forward(x)[0]

    def action_probs(self, b: np.ndarray, z_next: np.ndarray) -> np.ndarray:
        from .nn import softmax

        return softmax(self.inverse.forward(np.concatenate([b, z_next], axis=-1))[0])

    def losses(self, batch: Batch, with_grads: bool = False):
        """Inverse cross-entropy and forward squared error per transition.

        Inverse gradients reach the encoder; the forward model sees detached
        beliefs, so its loss only trains its own weights."""
        B, T = batch.actions.shape
        H = self.hidden_size
        hs, z, ecache = self.encoder.unroll(batch.obs, batch.encoder_actions, batch.h0)
        b_t = hs[:, :T].reshape(B * T, H)
        a = batch.actions.reshape(-1)
        logits, icache = self.inverse.forward(
            np.concatenate([b_t, z[:, 1:].reshape(B * T, -1)], axis=1)
        )
        inv_loss, dlogits = categorical_nll(logits, a)
        fx = np.concatenate([b_t, one_hot(a)], axis=1)
        pred, fcache = self.forward_model.forward(fx)
        fwd_loss, dpred = squared_error(pred, hs[:, 1:].reshape(B * T, H))
        out = {"inverse": inv_loss.reshape(B, T), "forward": fwd_loss.reshape(B, T)}
        if not with_grads:
            return out, hs
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dx = self.inverse.backward(dlogits / B, icache, grads)
        dhs = np.zeros_like(hs)
        dhs[:, :T] = dx[:, :H].reshape(B, T, H)
        dz = np.zeros_like(z)
        dz[:, 1:] = dx[:, H:].reshape(B, T, -1)
        self.encoder.unroll_backward(dhs, ecache, grads, dz=dz)
        self.forward_model.backward(dpred / B, fcache, grads)
        return out, grads, hs

    def train_step(self, batch: Batch) -> dict[str, np.ndarray]:
        if len(batch.actions) == 0:
            raise ValueError("empty batch")
        out, grads, _ = self.losses(batch, with_grads=True)
        self.optimizer.step(grads)
        return out


def icm_reward(icm: ICMModel, b_t: np.ndarray, a_t, b_next: np.ndarray):
    """Squared distance between the forward model's guess and b_{t+1}."""
    return squared_error(icm.predict_next(b_t, np.asarray(a_t)), b_next)[0]


# ---------------------------------------------------------------------------
# Episode-level reward computation used by the actors


def clone_model(model):
    twin = copy.deepcopy(model)
    twin.optimizer = None
    return twin


class RewardGenerator:
    """Computes the configured intrinsic reward over (partial) episodes with
    the current model, and owns the prediction-gain target snapshot."""

    def __init__(self, spec: RewardSpec, model: WorldModel | ICMModel):
        if spec.kind is RewardKind.ICM:
            if not isinstance(model, ICMModel):
                raise TypeError("ICM rewards need an ICMModel")
        else:
            if not isinstance(model, WorldModel):
                raise TypeError(f"{spec.label} rewards need a WorldModel")
            spec.validate(model.K)
        self.spec = spec
        self.model = model
        self.target: WorldModel | None = None
        self.learner_steps = 0

    def on_learner_step(self) -> None:
        self.learner_steps += 1
        if self.spec.kind is RewardKind.PG and self.learner_steps % self.spec.pg_copy_period == 0:
            self.target = clone_model(self.model)

    def beliefs(self, model, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Unroll ``model``'s encoder from the episode start: b_0..b_n."""
        N = len(obs)
        prev = np.concatenate([np.full((N, 1), int(Action.STAY)), actions[:, : obs.shape[1] - 1]], axis=1)
        hs, _, _ = model.encoder.unroll(obs, prev, model.initial_state(N))
        return hs

    def episode_rewards(self, obs: np.ndarray, actions: np.ndarray, start: int, stop: int):
        """Rewards for transitions start..stop-1 of episodes with observations
        o_0..o_stop (N, stop+1, ...) and actions a_0..a_{stop-1}.

        Returns (rewards (N, stop-start), beliefs b_0..b_stop)."""
        obs = obs[:, : stop + 1]
        actions = actions[:, :stop]
        hs = self.beliefs(self.model, obs, actions)
        N = len(obs)
        s = np.arange(start, stop)
        kind = self.spec.kind
        if kind is RewardKind.ICM:
            rew = np.stack(
                [icm_reward(self.model, hs[:, j], actions[:, j], hs[:, j + 1]) for j in s], axis=1
            ) if len(s) else np.zeros((N, 0))
            return rew, hs
        if kind is RewardKind.PE:
            return self._head_loss(self.model, hs, obs, actions, s, 1, 0), hs
        if kind is RewardKind.PG:
            live = self._head_loss(self.model, hs, obs, actions, s, 1, 0)
            if self.target is None:
                return np.zeros_like(live), hs
            ths = self.beliefs(self.target, obs, actions)
            return self._head_loss(self.target, ths, obs, actions, s, 1, 0) - live, hs
        H = self.spec.H
        rew = np.zeros((N, len(s)))
        ok = s >= H
        if ok.any():
            si = s[ok]
            short = self._head_loss(self.model, hs, obs, actions, si, H, H - 1)
            long = self._head_loss(self.model, hs, obs, actions, si, H + 1, H)
            rew[:, ok] = ndigo_reward(long, short)
        return rew, hs

    @staticmethod
    def _head_loss(model: WorldModel, hs, obs, actions, s: np.ndarray, k: int, back: int):
        """Loss of head k from belief b_{s-back} on o_{s-back+k} for each s."""
        N = len(obs)
        t0 = s - back
        b = hs[:, t0].reshape(N * len(s), -1)
        idx = t0[:, None] + np.arange(k)[None, :]
        acts = actions[:, idx].reshape(N * len(s), k)
        target = obs[:, t0 + k].reshape(N * len(s), *obs.shape[2:])
        loss, _, _ = model.head_losses(k, b, acts, target)
        return loss.reshape(N, len(s))
