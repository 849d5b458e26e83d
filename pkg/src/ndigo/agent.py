"""Recurrent value-based learner for the intrinsic reward.

A desk-scale stand-in for a distributed recurrent replay learner: a dueling
recurrent Q-network trained on replayed fixed-length traces with lambda-mixed
multi-step targets in value-rescaled space and a periodically synced target
network.  No off-policy importance corrections are applied.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .gridworld import NUM_ACTIONS, Action, EnvConfig, GridWorld, reset
from .nn import MLP, Adam, Params, bind
from .world_model import Encoder, ModelConfig


@dataclass(frozen=True)
class ReturnSpec:
    gamma: float = 0.99
    lam: float = 0.97
    target_update_period: int = 256
    rescale_eps: float = 1e-3


def value_rescale(x, eps: float = 1e-3):
    """h(x) = sign(x) (sqrt(|x| + 1) - 1) + eps x."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * (np.sqrt(np.abs(x) + 1.0) - 1.0) + eps * x


def value_rescale_inv(y, eps: float = 1e-3):
    y = np.asarray(y, dtype=np.float64)
    root = (np.sqrt(1.0 + 4.0 * eps * (np.abs(y) + 1.0 + eps)) - 1.0) / (2.0 * eps)
    return np.sign(y) * (root * root - 1.0)


@dataclass(frozen=True)
class AgentConfig:
    dueling_hidden: int = 32
    lr: float = 5e-4
    batch_size: int = 16
    trace_len: int = 100
    replay_capacity: int = 10_000
    min_replay: int = 8
    n_envs: int = 4
    updates_per_trace: int = 2
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    eval_eps: float = 0.05
    clip_norm: float | None = 40.0


class QNetwork:
    """Encoder (own weights) feeding dueling value / advantage heads."""

    def __init__(self, n_channels: int, cfg: ModelConfig, hidden: int, seed: int = 0,
                 zero_heads: bool = False):
        rng = np.random.default_rng([seed, 0x51])
        self.encoder = Encoder("qenc", n_channels, cfg, rng)
        H = self.encoder.hidden_size
        self.value = MLP("value", H, hidden, 1, rng)
        self.advantage = MLP("adv", H, hidden, NUM_ACTIONS, rng)
        self.params: Params = bind(*self.encoder.modules, self.value, self.advantage)
        if zero_heads:
            for k in ("value.l2.W", "value.l2.b", "adv.l2.W", "adv.l2.b"):
                self.params[k][...] = 0.0

    @property
    def hidden_size(self) -> int:
        return self.encoder.hidden_size

    def initial_state(self, n: int) -> np.ndarray:
        return np.zeros((n, self.hidden_size))

    def head(self, b: np.ndarray):
        v, vc = self.value.forward(b)
        adv, ac = self.advantage.forward(b)
        return dueling(v, adv), (vc, ac)

    def head_backward(self, dq: np.ndarray, cache, grads: Params) -> np.ndarray:
        vc, ac = cache
        dv = dq.sum(axis=-1, keepdims=True)
        dadv = dq - dq.mean(axis=-1, keepdims=True)
        return self.value.backward(dv, vc, grads) + self.advantage.backward(dadv, ac, grads)

    def step(self, obs: np.ndarray, prev_action: np.ndarray, h: np.ndarray):
        h_new = self.encoder.step(obs, prev_action, h)
        q, _ = self.head(h_new)
        return q, h_new

    def unroll(self, obs: np.ndarray, prev_actions: np.ndarray, h0: np.ndarray):
        hs, _, ecache = self.encoder.unroll(obs, prev_actions, h0)
        q, hcache = self.head(hs)
        return q, (ecache, hcache)

    def unroll_backward(self, dq: np.ndarray, cache, grads: Params) -> None:
        ecache, hcache = cache
        dhs = self.head_backward(dq, hcache, grads)
        self.encoder.unroll_backward(dhs, ecache, grads)

    def snapshot(self) -> "QNetwork":
        return copy.deepcopy(self)


def dueling(value: np.ndarray, advantage: np.ndarray) -> np.ndarray:
    """V + A - mean(A).  Advantages are first taken relative to action 0 so a
    constant shift cancels exactly whenever the shifted values are exact."""
    rel = advantage - advantage[..., :1]
    return value + rel - rel.mean(axis=-1, keepdims=True)


def epsilon_greedy(q: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Greedy with lowest-index tie-break, uniform with probability eps."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    greedy = np.argmax(q, axis=-1)
    explore = rng.random(len(q)) < eps
    rand = rng.integers(NUM_ACTIONS, size=len(q))
    return np.where(explore, rand, greedy)


def act(qnet: QNetwork, state: np.ndarray, obs: np.ndarray, prev_action: np.ndarray,
        eps: float, rng: np.random.Generator):
    """Batch of observations -> (actions, new recurrent state)."""
    q, h = qnet.step(obs, prev_action, state)
    return epsilon_greedy(q, eps, rng), h


# ---------------------------------------------------------------------------
# Replay


@dataclass
class Trace:
    obs: np.ndarray  # (T+1, 5, 5, c)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    dones: np.ndarray  # (T,) episode ended after this transition
    q_h0: np.ndarray
    q_prev_action: int
    wm_h0: np.ndarray
    wm_prev_action: int
    states: np.ndarray  # (T+1, n_aspects) true cell indices
    episode: int = 0
    t0: int = 0


class ReplayBuffer:
    def __init__(self, capacity: int, seed: int = 0):
        self.capacity = capacity
        self.items: list[Trace] = []
        self.next = 0
        self.rng = np.random.default_rng([seed, 0x52])

    def __len__(self) -> int:
        return len(self.items)

    def add(self, trace: Trace) -> None:
        if len(self.items) < self.capacity:
            self.items.append(trace)
        else:
            self.items[self.next] = trace
        self.next = (self.next + 1) % self.capacity

    def sample(self, n: int) -> list[Trace]:
        if not self.items:
            raise ValueError("replay buffer is empty")
        idx = self.rng.integers(len(self.items), size=n)
        return [self.items[i] for i in idx]


@dataclass
class TraceBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    q_h0: np.ndarray
    q_prev_action: np.ndarray
    wm_h0: np.ndarray
    wm_prev_action: np.ndarray
    states: np.ndarray

    @classmethod
    def stack(cls, traces: list[Trace]) -> "TraceBatch":
        g = lambda name: np.stack([getattr(t, name) for t in traces])  # noqa: E731
        return cls(
            obs=g("obs"),
            actions=g("actions"),
            rewards=g("rewards"),
            dones=g("dones"),
            q_h0=g("q_h0"),
            q_prev_action=np.array([t.q_prev_action for t in traces]),
            wm_h0=g("wm_h0"),
            wm_prev_action=np.array([t.wm_prev_action for t in traces]),
            states=g("states"),
        )

    @property
    def q_encoder_actions(self) -> np.ndarray:
        return np.concatenate([self.q_prev_action[:, None], self.actions], axis=1)


# ---------------------------------------------------------------------------
# Learning


def lambda_targets(rewards: np.ndarray, dones: np.ndarray, q_target: np.ndarray,
                   spec: ReturnSpec) -> np.ndarray:
    """lambda-mixed multi-step targets in rescaled space.

    ``q_target`` has shape (B, T+1, A); returns y (B, T) with
    y_s = h(r_s + gamma h^-1((1 - lam) max Q'(s+1) + lam y_{s+1})),
    the mixture collapsing to the bootstrap at the trace end.
    """
    B, T = rewards.shape
    eps = spec.rescale_eps
    boot = q_target.max(axis=-1)
    y = np.empty((B, T))
    nxt = boot[:, T]
    for s in range(T - 1, -1, -1):
        ret = rewards[:, s] + spec.gamma * np.where(dones[:, s], 0.0, value_rescale_inv(nxt, eps))
        y[:, s] = value_rescale(ret, eps)
        nxt = (1.0 - spec.lam) * boot[:, s] + spec.lam * y[:, s]
    return y


class Learner:
    def __init__(self, qnet: QNetwork, cfg: AgentConfig, spec: ReturnSpec):
        self.qnet = qnet
        self.target = qnet.snapshot()
        self.cfg = cfg
        self.spec = spec
        self.optimizer = Adam(qnet.params, cfg.lr, clip_norm=cfg.clip_norm)
        self.steps = 0

    def loss_and_grads(self, batch: TraceBatch):
        q, cache = self.qnet.unroll(batch.obs, batch.q_encoder_actions, batch.q_h0)
        q_bar, _ = self.target.unroll(batch.obs, batch.q_encoder_actions, batch.q_h0)
        y = lambda_targets(batch.rewards, batch.dones, q_bar, self.spec)
        B, T = batch.actions.shape
        q_sa = np.take_along_axis(q[:, :T], batch.actions[..., None], axis=-1)[..., 0]
        err = q_sa - y
        loss = float((err * err).mean())
        dq = np.zeros_like(q)
        np.put_along_axis(dq[:, :T], batch.actions[..., None], (2.0 * err / err.size)[..., None], -1)
        grads = {k: np.zeros_like(v) for k, v in self.qnet.params.items()}
        self.qnet.unroll_backward(dq, cache, grads)
        return loss, grads

    def learner_step(self, buffer: ReplayBuffer) -> float:
        if len(buffer) == 0:
            raise ValueError("replay buffer is empty")
        batch = TraceBatch.stack(buffer.sample(self.cfg.batch_size))
        return self.update(batch)

    def update(self, batch: TraceBatch) -> float:
        loss, grads = self.loss_and_grads(batch)
        self.optimizer.step(grads)
        self.steps += 1
        if self.steps % self.spec.target_update_period == 0:
            self.target = self.qnet.snapshot()
        return loss


# ---------------------------------------------------------------------------
# Actors


def episode_seed(run_seed: int, episode: int, env_index: int) -> int:
    return int(np.random.SeedSequence([run_seed, episode, env_index]).generate_state(1)[0])


@dataclass
class ActorState:
    """N environments stepped in lockstep through one episode at a time."""

    config: EnvConfig
    n_envs: int
    run_seed: int
    episode_base: int = 0
    worlds: list[GridWorld] = field(default_factory=list)
    obs: np.ndarray | None = None  # (N, t+1, 5, 5, c) episode so far
    actions: np.ndarray | None = None  # (N, t)
    states: np.ndarray | None = None  # (N, t+1, n_aspects)
    q_state: np.ndarray | None = None
    q_states: list = field(default_factory=list)  # Q state before each observation
    beliefs: np.ndarray | None = None  # model beliefs b_0..b_t from the last reward pass
    t: int = 0

    def start_episode(self, qnet: QNetwork) -> None:
        self.worlds, first = [], []
        for i in range(self.n_envs):
            w, o = reset(self.config, episode_seed(self.run_seed, self.episode_base, i))
            self.worlds.append(w)
            first.append(o)
        self.obs = np.stack(first)[:, None]
        self.actions = np.zeros((self.n_envs, 0), dtype=np.int64)
        self.states = np.stack([w.true_state().as_array() for w in self.worlds])[:, None]
        self.q_state = qnet.initial_state(self.n_envs)
        self.q_states = [self.q_state]
        self.t = 0

    @property
    def episode_len(self) -> int:
        return self.config.episode_len


def run_actor(actor: ActorState, qnet: QNetwork, rewarder, eps: float, rng: np.random.Generator,
              trace_len: int) -> tuple[list[Trace], np.ndarray, bool]:
    """Advance every environment by one trace (or to the episode end) and
    return the traces with their intrinsic rewards.

    Returns (traces, rewards (N, n_steps), episode_finished).
    """
    if actor.obs is None or actor.t >= actor.episode_len:
        actor.start_episode(qnet)
    start = actor.t
    stop = min(start + trace_len, actor.episode_len)
    N = actor.n_envs
    new_obs, new_states, new_actions = [], [], []
    prev = actor.actions[:, -1] if actor.t > 0 else np.full(N, int(Action.STAY))
    for _ in range(start, stop):
        cur = actor.obs[:, -1] if not new_obs else new_obs[-1]
        a, actor.q_state = act(qnet, actor.q_state, cur, prev, eps, rng)
        actor.q_states.append(actor.q_state)
        obs_next = np.stack([w.step(int(ai)) for w, ai in zip(actor.worlds, a)])
        new_obs.append(obs_next)
        new_states.append(np.stack([w.true_state().as_array() for w in actor.worlds]))
        new_actions.append(a)
        prev = a
    actor.obs = np.concatenate([actor.obs, np.stack(new_obs, axis=1)], axis=1)
    actor.states = np.concatenate([actor.states, np.stack(new_states, axis=1)], axis=1)
    actor.actions = np.concatenate([actor.actions, np.stack(new_actions, axis=1)], axis=1)
    actor.t = stop

    rewards, hs = rewarder.episode_rewards(actor.obs, actor.actions, start, stop)
    actor.beliefs = hs
    finished = stop >= actor.episode_len
    traces = []
    for i in range(N):
        dones = np.zeros(stop - start, dtype=bool)
        dones[-1] = finished
        traces.append(Trace(
            obs=actor.obs[i, start : stop + 1].copy(),
            actions=actor.actions[i, start:stop].copy(),
            rewards=rewards[i].copy(),
            dones=dones,
            # q_states[j] is the Q state after observing o_{j-1}: the state before o_start
            q_h0=actor.q_states[start][i].copy(),
            q_prev_action=int(actor.actions[i, start - 1]) if start > 0 else int(Action.STAY),
            wm_h0=hs[i, start - 1].copy() if start > 0 else np.zeros(hs.shape[-1]),
            wm_prev_action=int(actor.actions[i, start - 1]) if start > 0 else int(Action.STAY),
            states=actor.states[i, start : stop + 1].copy(),
            episode=actor.episode_base * N + i,
            t0=start,
        ))
    if finished:
        actor.episode_base += 1
    return traces, rewards, finished
