"""Glass-box evaluation: a probe reading positions out of the belief b_t, and
behavioural metrics (visit counts, first-visit times, room frequencies)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridworld import Action, EnvConfig, GridWorld, reset
from .nn import MLP, Adam, Params, bind, categorical_nll, softmax


def aspect_names(config: EnvConfig) -> list[str]:
    """Object aspects in roster order, then the agent."""
    return [f"{o.kind.value}_{i}" for i, o in enumerate(config.objects)] + ["agent"]


class Probe:
    """One MLP head per aspect mapping b_t to a categorical over global cells.

    Trained on detached beliefs with its own optimizer, so nothing it does can
    touch the encoder.  Output layers start at zero (uniform predictions).
    """

    def __init__(self, n_in: int, n_cells: int, n_aspects: int, hidden: int = 64,
                 lr: float = 5e-4, seed: int = 0):
        rng = np.random.default_rng([seed, 0x70726F])
        self.n_cells = n_cells
        self.heads = [MLP(f"probe{i}", n_in, hidden, n_cells, rng) for i in range(n_aspects)]
        self.params: Params = bind(*self.heads)
        for h in self.heads:
            self.params[h.l2.W][...] = 0.0
        self.optimizer = Adam(self.params, lr)

    @property
    def n_aspects(self) -> int:
        return len(self.heads)

    def probs(self, b: np.ndarray) -> np.ndarray:
        """(N, H) -> (N, n_aspects, n_cells)."""
        return np.stack([softmax(h.forward(b)[0]) for h in self.heads], axis=1)

    def losses(self, b: np.ndarray, labels: np.ndarray, with_grads: bool = False):
        """Per-aspect -ln p(x | b) for beliefs (N, H) and labels (N, n_aspects)."""
        b = np.asarray(b, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape[-1] != self.n_aspects:
            raise ValueError(f"{labels.shape[-1]} labels for {self.n_aspects} aspects")
        if labels.max(initial=0) >= self.n_cells or labels.min(initial=0) < 0:
            raise ValueError(f"label outside 0..{self.n_cells - 1}")
        out = np.empty(labels.shape)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()} if with_grads else None
        for i, h in enumerate(self.heads):
            logits, cache = h.forward(b)
            loss, dl = categorical_nll(logits, labels[:, i])
            out[:, i] = loss
            if with_grads:
                h.backward(dl / len(b), cache, grads)
        return (out, grads) if with_grads else out

    def train_step(self, b: np.ndarray, labels: np.ndarray) -> np.ndarray:
        # copy so that the caller's beliefs are never aliased into the probe
        out, grads = self.losses(np.array(b, copy=True), labels, with_grads=True)
        self.optimizer.step(grads)
        return out


def discovery_loss(probe: Probe, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """-ln p_probe(x_t | b_t) per aspect.  Accepts one belief or a batch."""
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    out = probe.losses(np.atleast_2d(b), np.atleast_2d(x))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Behaviour


@dataclass
class BehaviorMetrics:
    """Per-episode fold over observations o_1..o_T."""

    episode_len: int
    visit_count: np.ndarray
    first_visit_time: np.ndarray
    steps: int = 0

    @classmethod
    def empty(cls, n_objects: int, episode_len: int) -> "BehaviorMetrics":
        return cls(
            episode_len,
            np.zeros(n_objects, dtype=np.int64),
            np.full(n_objects, episode_len, dtype=np.int64),
        )


def update_metrics(metrics: BehaviorMetrics, world: GridWorld | None, obs: np.ndarray) -> BehaviorMetrics:
    """Fold one post-step observation into ``metrics`` (in place, also returned).

    First-visit time is the 0-based index of the step whose observation first
    showed the object, so it equals the cap only when the object is never seen.
    """
    if world is not None and len(world.objects) != len(metrics.visit_count):
        raise ValueError("metrics and world disagree on the object count")
    seen = obs[..., 1:].reshape(-1, obs.shape[-1] - 1).any(axis=0)
    new = seen & (metrics.visit_count == 0)
    metrics.first_visit_time[new] = metrics.steps
    metrics.visit_count += seen
    metrics.steps += 1
    return metrics


def metrics_from_trajectory(observations: np.ndarray, episode_len: int) -> BehaviorMetrics:
    """Recompute metrics from stored observations o_1..o_T (T, 5, 5, c)."""
    m = BehaviorMetrics.empty(observations.shape[-1] - 1, episode_len)
    for o in observations:
        update_metrics(m, None, o)
    return m


def room_visit_frequency(counts: np.ndarray) -> np.ndarray:
    """Fraction of episodes (rows) in which each object was seen at least once."""
    return (np.asarray(counts) > 0).mean(axis=0)


# ---------------------------------------------------------------------------
# Frozen-agent evaluation


@dataclass
class EvalResult:
    aspects: list[str]
    visit_count: np.ndarray  # (episodes, n_objects)
    first_visit_time: np.ndarray
    discovery: np.ndarray  # (episodes, n_aspects) mean over the episode
    rooms: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for i, name in enumerate(self.aspects):
            row = {
                "discovery_loss_mean": float(self.discovery[:, i].mean()),
                "discovery_loss_std": float(self.discovery[:, i].std()),
            }
            if i < self.visit_count.shape[1]:
                row.update(
                    visit_count_mean=float(self.visit_count[:, i].mean()),
                    visit_count_std=float(self.visit_count[:, i].std()),
                    first_visit_mean=float(self.first_visit_time[:, i].mean()),
                    first_visit_std=float(self.first_visit_time[:, i].std()),
                    room=self.rooms[i] if self.rooms else "",
                    room_visit_frequency=float((self.visit_count[:, i] > 0).mean()),
                )
            out[name] = row
        return out


def eval_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, 0x6576616C, episode]).generate_state(1)[0])


def evaluate(qnet, model, probe: Probe, config: EnvConfig, episodes: int = 100,
             eps: float = 0.05, seed: int = 0, chunk: int = 25) -> EvalResult:
    """Roll the frozen agent over seeded episodes and score them."""
    from .agent import act  # local import: agent depends on world_model only

    rng = np.random.default_rng([seed, 0x65])
    counts, firsts, disc = [], [], []
    worlds_rooms: list[str] = []
    for lo in range(0, episodes, chunk):
        n = min(chunk, episodes - lo)
        worlds, obs0 = zip(*(reset(config, eval_seed(seed, lo + i)) for i in range(n)))
        worlds = list(worlds)
        if not worlds_rooms:
            lay = worlds[0].layout
            names = {rid: name for name, rid in lay.room_names.items()}
            worlds_rooms = [names.get(o.home_room, str(o.home_room)) for o in worlds[0].objects]
        T = config.episode_len
        obs = np.empty((n, T + 1, *obs0[0].shape), dtype=np.uint8)
        obs[:, 0] = np.stack(obs0)
        states = np.empty((n, T + 1, probe.n_aspects), dtype=np.int64)
        states[:, 0] = [w.true_state().as_array() for w in worlds]
        actions = np.empty((n, T), dtype=np.int64)
        metrics = [BehaviorMetrics.empty(len(w.objects), T) for w in worlds]
        h = qnet.initial_state(n)
        prev = np.full(n, int(Action.STAY))
        for t in range(T):
            a, h = act(qnet, h, obs[:, t], prev, eps, rng)
            for i, w in enumerate(worlds):
                obs[i, t + 1] = w.step(int(a[i]))
                states[i, t + 1] = w.true_state().as_array()
                update_metrics(metrics[i], w, obs[i, t + 1])
            actions[:, t] = a
            prev = a
        enc_actions = np.concatenate([np.full((n, 1), int(Action.STAY)), actions], axis=1)
        hs, _, _ = model.encoder.unroll(obs, enc_actions, model.initial_state(n))
        loss = probe.losses(hs.reshape(n * (T + 1), -1), states.reshape(n * (T + 1), -1))
        disc.append(loss.reshape(n, T + 1, -1).mean(axis=1))
        counts.append(np.stack([m.visit_count for m in metrics]))
        firsts.append(np.stack([m.first_visit_time for m in metrics]))
    return EvalResult(
        aspects=aspect_names(config),
        visit_count=np.concatenate(counts),
        first_visit_time=np.concatenate(firsts),
        discovery=np.concatenate(disc),
        rooms=worlds_rooms,
    )
