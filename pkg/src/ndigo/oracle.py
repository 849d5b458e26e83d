"""Exact tabular POMDP engine.

Beliefs, open-loop predictive distributions and predictive information gains
are computed exactly, which gives ground truth for the learned predictors and
for the expected-reward / information-gain identity.

Conventions: o_0 is emitted by x_0 ~ init; after o_t the action a_t moves the
state with P[a_t] and o_{t+1} is emitted by the observation kernel.  The
"belief before any observation" (index -1) is the prior over x_0.
"""

from __future__ import annotations

import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

KL_SMOOTHING = 1e-12
# bound on the bias the smoothing adds to a KL difference (n_obs * eps * |log eps|)
SMOOTHING_TOL = 1e-9
MAX_GRID_STATES = 10_000


class ImpossibleObservation(ValueError):
    """The observation has zero probability under the current belief."""


def _row_sums(m) -> np.ndarray:
    return np.asarray(m.sum(axis=1)).ravel()


@dataclass
class TabularPOMDP:
    P: list  # per action, (S, S) row-stochastic (dense or sparse)
    O: np.ndarray | sp.spmatrix  # (S, n_obs) row-stochastic
    init: np.ndarray  # (S,)
    name: str = "tabular"
    obs_labels: list | None = None

    def __post_init__(self) -> None:
        self.P = [p if sp.issparse(p) else np.asarray(p, dtype=np.float64) for p in self.P]
        if not sp.issparse(self.O):
            self.O = np.asarray(self.O, dtype=np.float64)
        self.init = np.asarray(self.init, dtype=np.float64)
        self.validate()
        self._O_dense = self.O.toarray() if sp.issparse(self.O) else self.O

    @property
    def n_states(self) -> int:
        return len(self.init)

    @property
    def n_actions(self) -> int:
        return len(self.P)

    @property
    def n_obs(self) -> int:
        return self.O.shape[1]

    def validate(self, tol: float = 1e-12) -> None:
        S = self.n_states
        for a, p in enumerate(self.P):
            if p.shape != (S, S):
                raise ValueError(f"P[{a}] has shape {p.shape}, expected {(S, S)}")
            if np.abs(_row_sums(p) - 1.0).max() > tol or (p.min() < 0):
                raise ValueError(f"P[{a}] is not row-stochastic")
        if self.O.shape[0] != S or np.abs(_row_sums(self.O) - 1.0).max() > tol:
            raise ValueError("observation kernel is not row-stochastic")
        if abs(self.init.sum() - 1.0) > tol or self.init.min() < 0:
            raise ValueError("init is not a distribution")

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        dense = lambda m: (m.toarray() if sp.issparse(m) else m).tolist()  # noqa: E731
        return {
            "name": self.name,
            "P": [dense(p) for p in self.P],
            "O": dense(self.O),
            "init": self.init.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularPOMDP":
        return cls(P=d["P"], O=d["O"], init=d["init"], name=d.get("name", "tabular"))

    # -- vectorised primitives over batches of beliefs (N, S) -------------

    def push(self, bel: np.ndarray, action) -> np.ndarray:
        """One open-loop dynamics step; ``action`` scalar or (N,)."""
        action = np.broadcast_to(np.asarray(action), bel.shape[:-1])
        out = np.empty_like(bel)
        for a in np.unique(action):
            rows = action == a
            out[rows] = np.asarray(bel[rows] @ self.P[int(a)])
        return out

    def emit(self, state_dist: np.ndarray) -> np.ndarray:
        return np.asarray(state_dist @ self.O)


def initial_belief(m: TabularPOMDP, o0: int) -> np.ndarray:
    post = m.init * m._O_dense[:, o0]
    z = post.sum()
    if z <= 0:
        raise ImpossibleObservation(f"o_0={o0} impossible under the prior")
    return post / z


def belief_update(m: TabularPOMDP, bel: np.ndarray, a: int, o: int) -> np.ndarray:
    """Bayes filter: predict through P[a], condition on o, renormalise."""
    pred = np.asarray(bel @ m.P[int(a)])
    post = pred * m._O_dense[:, int(o)]
    z = post.sum()
    if z <= 0:
        raise ImpossibleObservation(f"observation {o} has zero evidence after action {a}")
    return post / z


def exact_prediction(m: TabularPOMDP, bel: np.ndarray, actions: Sequence[int]) -> np.ndarray:
    """Distribution of the observation after applying ``actions`` open-loop."""
    if len(actions) < 1:
        raise ValueError("need at least one action")
    x = np.asarray(bel, dtype=np.float64)
    for a in actions:
        x = np.asarray(x @ m.P[int(a)])
    return m.emit(x)


def beliefs_along(m: TabularPOMDP, obs: Sequence[int], actions: Sequence[int]) -> list[np.ndarray]:
    """Beliefs b_0..b_n for a history o_0, a_0, ..., a_{n-1}, o_n."""
    bel = [initial_belief(m, obs[0])]
    for a, o in zip(actions, obs[1:]):
        bel.append(belief_update(m, bel[-1], a, o))
    return bel


def prediction_from(m: TabularPOMDP, beliefs: list[np.ndarray], actions: Sequence[int],
                    j: int, target: int) -> np.ndarray:
    """P(o_target | h_j, a_j..a_{target-1}); j = -1 means the prior over x_0."""
    if j == -1:
        if target == 0:
            return m.emit(m.init)
        return exact_prediction(m, m.init, actions[:target])
    return exact_prediction(m, beliefs[j], actions[j:target])


def kl(p: np.ndarray, q: np.ndarray, eps: float = KL_SMOOTHING) -> np.ndarray:
    """KL(p || q) along the last axis after eps-smoothing both arguments."""
    n = p.shape[-1]
    p = (p + eps) / (1.0 + n * eps)
    q = (q + eps) / (1.0 + n * eps)
    return (p * (np.log(p) - np.log(q))).sum(axis=-1)


def info_gain(m: TabularPOMDP, obs: Sequence[int], actions: Sequence[int], t: int, k: int) -> float:
    """IG of o_{t+k} w.r.t. the observations o_t..o_{t+k-1}:
    KL(P(o_{t+k}|h_{t+k-1}) || P(o_{t+k}|h_{t-1})); zero for k = 0.

    ``obs`` must contain o_0..o_{t+k-1} and ``actions`` a_0..a_{t+k-1}.
    """
    if k == 0:
        return 0.0
    bel = beliefs_along(m, obs[: t + k], actions[: t + k - 1])
    late = prediction_from(m, bel, actions, t + k - 1, t + k)
    early = prediction_from(m, bel, actions, t - 1, t + k)
    return float(kl(late, early))


def conditional_entropy(bel: np.ndarray, labels: np.ndarray) -> float:
    """Entropy of a state feature (``labels[x]``) under a belief."""
    marg = np.bincount(labels, weights=bel)
    marg = marg[marg > 0]
    return float(-(marg * np.log(marg)).sum())


# ---------------------------------------------------------------------------
# Monte-Carlo verification of E[r] = IG_{t+H|t} - IG over o_{t+1}..o_{t+H-1}


@dataclass
class IdentityReport:
    world: str
    horizon: int
    t: int
    episodes: int
    mean_reward: float
    mean_ig_diff: float
    abs_error: float
    std_error: float
    passed: bool
    histories: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def _sample_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cum = probs.cumsum(axis=-1)
    u = rng.random(len(probs)) * cum[:, -1]
    return np.minimum((u[:, None] > cum).sum(axis=1), probs.shape[1] - 1)


def _state_rows(m: TabularPOMDP, a: int, states: np.ndarray) -> np.ndarray:
    p = m.P[a]
    return p[states].toarray() if sp.issparse(p) else p[states]


def _obs_rows(m: TabularPOMDP, states: np.ndarray) -> np.ndarray:
    return m._O_dense[states]


def _batched_update(m: TabularPOMDP, bel: np.ndarray, a: np.ndarray, o: np.ndarray) -> np.ndarray:
    pred = m.push(bel, a)
    post = pred * m._O_dense[:, o].T
    z = post.sum(axis=1, keepdims=True)
    if (z <= 0).any():
        raise ImpossibleObservation("sampled observation has zero evidence")
    return post / z


def _push_seq(m: TabularPOMDP, bel: np.ndarray, actions: np.ndarray) -> np.ndarray:
    for j in range(actions.shape[1]):
        bel = m.push(bel, actions[:, j])
    return m.emit(bel)


Policy = Callable[[np.random.Generator, int, np.ndarray], np.ndarray]


def uniform_policy(n_actions: int) -> Policy:
    def policy(rng, t, obs_hist):
        return rng.integers(n_actions, size=len(obs_hist))
    return policy


def sample_histories(m: TabularPOMDP, n: int, length: int, rng: np.random.Generator,
                     policy: Policy | None = None):
    """Sample n trajectories o_0..o_length with actions a_0..a_{length-1}.

    Returns (obs (n, length+1), actions (n, length), beliefs (n, length+1, S)).
    """
    policy = policy or uniform_policy(m.n_actions)
    x = _sample_rows(rng, np.broadcast_to(m.init, (n, m.n_states)))
    obs = np.empty((n, length + 1), dtype=np.int64)
    acts = np.empty((n, length), dtype=np.int64)
    bel = np.empty((n, length + 1, m.n_states))
    obs[:, 0] = _sample_rows(rng, _obs_rows(m, x))
    prior = m.init[None, :] * m._O_dense[:, obs[:, 0]].T
    bel[:, 0] = prior / prior.sum(axis=1, keepdims=True)
    for t in range(length):
        a = np.asarray(policy(rng, t, obs[:, : t + 1]), dtype=np.int64)
        acts[:, t] = a
        x_new = np.empty_like(x)
        for av in np.unique(a):
            rows = a == av
            x_new[rows] = _sample_rows(rng, _state_rows(m, int(av), x[rows]))
        x = x_new
        obs[:, t + 1] = _sample_rows(rng, _obs_rows(m, x))
        bel[:, t + 1] = _batched_update(m, bel[:, t], a, obs[:, t + 1])
    return obs, acts, bel


def exact_rewards(m: TabularPOMDP, obs: np.ndarray, acts: np.ndarray, bel: np.ndarray,
                  t: int, H: int):
    """Reward credited at t+H-1 with exact predictors, and the exact
    information-gain difference given h_{t+H-1}, for a batch of histories."""
    n = len(obs)
    if t == 0:
        early = _push_seq(m, np.broadcast_to(m.init, (n, m.n_states)).copy(), acts[:, :H])
    else:
        early = _push_seq(m, bel[:, t - 1], acts[:, t - 1 : t + H])
    mid = _push_seq(m, bel[:, t], acts[:, t : t + H])
    late = _push_seq(m, bel[:, t + H - 1], acts[:, t + H - 1 : t + H])
    o = obs[:, t + H]
    rows = np.arange(n)
    reward = np.log(mid[rows, o]) - np.log(early[rows, o])
    ig_diff = kl(late, early) - kl(late, mid)
    return reward, ig_diff, (early, mid, late)


def exact_pe_rewards(m: TabularPOMDP, obs: np.ndarray, acts: np.ndarray, bel: np.ndarray,
                     t: int) -> np.ndarray:
    pred = _push_seq(m, bel[:, t], acts[:, t : t + 1])
    return -np.log(pred[np.arange(len(obs)), obs[:, t + 1]])


def verify_ndigo_identity(m: TabularPOMDP, H: int, num_episodes: int, seed: int = 0,
                          t: int = 1, policy: Policy | None = None,
                          chunk: int = 20_000, max_table: int = 50) -> IdentityReport:
    """Monte-Carlo check that the exact-predictor reward averages to the
    information-gain difference.  Each episode contributes the reward at
    t+H-1; the pass criterion is |mean(r) - mean(dIG)| < 3 standard errors of
    the per-episode difference."""
    rng = np.random.default_rng([seed, H, t])
    rewards, diffs, keys = [], [], []
    remaining = num_episodes
    while remaining > 0:
        n = min(chunk, remaining)
        obs, acts, bel = sample_histories(m, n, t + H, rng, policy)
        r, d, _ = exact_rewards(m, obs, acts, bel, t, H)
        rewards.append(r)
        diffs.append(d)
        # history class: everything observed up to o_{t+H-1} plus a_{t+H-1}
        hist = np.concatenate([obs[:, : t + H], acts[:, : t + H]], axis=1)
        keys.append(hist)
        remaining -= n
    r = np.concatenate(rewards)
    d = np.concatenate(diffs)
    hist = np.concatenate(keys)
    delta = r - d
    se = float(delta.std(ddof=1) / np.sqrt(len(delta))) if len(delta) > 1 else 0.0
    err = float(abs(delta.mean()))
    table = _history_table(hist, r, d, t + H, max_table)
    return IdentityReport(
        world=m.name,
        horizon=H,
        t=t,
        episodes=num_episodes,
        mean_reward=float(r.mean()),
        mean_ig_diff=float(d.mean()),
        abs_error=err,
        std_error=se,
        passed=bool(err < 3.0 * se + SMOOTHING_TOL),
        histories=table,
    )


def _history_table(hist: np.ndarray, r: np.ndarray, d: np.ndarray, n_obs: int,
                   max_rows: int) -> list[dict]:
    uniq, inv, counts = np.unique(hist, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    sums = np.bincount(inv, weights=r)
    sq = np.bincount(inv, weights=r * r)
    order = np.argsort(-counts)[:max_rows]
    rows = []
    for i in order:
        c = int(counts[i])
        mean = sums[i] / c
        var = max(sq[i] / c - mean * mean, 0.0)
        ig = float(d[np.argmax(inv == i)])
        rows.append({
            "observations": uniq[i, :n_obs].tolist(),
            "actions": uniq[i, n_obs:].tolist(),
            "count": c,
            "mean_reward": float(mean),
            "ig_diff": ig,
            "std_error": float(np.sqrt(var / c)) if c > 1 else None,
        })
    return rows


# ---------------------------------------------------------------------------
# Hand-built worlds


def white_noise_world(m_cells: int = 9) -> TabularPOMDP:
    """An object teleporting uniformly over m cells, always visible."""
    P = np.full((m_cells, m_cells), 1.0 / m_cells)
    return TabularPOMDP([P, P], np.eye(m_cells), np.full(m_cells, 1.0 / m_cells),
                        name=f"white_noise_{m_cells}")


def deterministic_cycle(n: int = 4) -> TabularPOMDP:
    """Fully observed deterministic ring; action 0 stays, action 1 rotates."""
    stay = np.eye(n)
    rot = np.roll(np.eye(n), 1, axis=1)
    init = np.zeros(n)
    init[0] = 1.0
    return TabularPOMDP([stay, rot], np.eye(n), init, name=f"cycle_{n}")


def hidden_object_world(noise: float = 0.15) -> TabularPOMDP:
    """Static object hidden in one of two rooms; the agent is in the corridor
    (0), left room (1) or right room (2).  In a room it sees whether the
    object is there (flipped with prob ``noise``); in the corridor it sees
    nothing.  Actions: 0 go corridor, 1 go left, 2 go right.  States
    (agent, object) -> 3 * agent + object."""
    S = 6
    P = [np.zeros((S, S)) for _ in range(3)]
    for ag, ob in itertools.product(range(3), range(2)):
        for a in range(3):
            P[a][3 * ob + ag, 3 * ob + a] = 1.0
    # observations: 0 corridor, 1 "object here", 2 "nothing here"
    O = np.zeros((S, 3))
    for ag, ob in itertools.product(range(3), range(2)):
        s = 3 * ob + ag
        if ag == 0:
            O[s, 0] = 1.0
        else:
            here = (ag - 1) == ob
            O[s, 1] = 1.0 - noise if here else noise
            O[s, 2] = noise if here else 1.0 - noise
    init = np.zeros(S)
    init[[0, 3]] = 0.5
    return TabularPOMDP(P, O, init, name="hidden_object")


def two_position_reveal() -> TabularPOMDP:
    """Object at one of two positions, revealed exactly by looking (action 1)."""
    S = 4  # 2 * looked + position
    P = [np.zeros((S, S)) for _ in range(2)]
    for looked, pos in itertools.product(range(2), range(2)):
        P[0][2 * looked + pos, pos] = 1.0
        P[1][2 * looked + pos, 2 + pos] = 1.0
    O = np.zeros((S, 3))
    O[0, 0] = O[1, 0] = 1.0
    O[2, 1] = O[3, 2] = 1.0
    return TabularPOMDP(P, O, [0.5, 0.5, 0.0, 0.0], name="two_position_reveal")


def brownian_ring(n: int = 5, p_move: float = 0.5, p_detect: float = 0.9) -> TabularPOMDP:
    """Object random-walking on a ring of n cells; the agent watches cell 0
    (action 0) or cell 1 (action 1) with detection probability p_detect.
    States: 2 * position + watched cell."""
    S = 2 * n
    P = [np.zeros((S, S)) for _ in range(2)]
    for pos, w in itertools.product(range(n), range(2)):
        for a in range(2):
            s = 2 * pos + w
            P[a][s, 2 * pos + a] += 1.0 - p_move
            P[a][s, 2 * ((pos + 1) % n) + a] += p_move / 2
            P[a][s, 2 * ((pos - 1) % n) + a] += p_move / 2
    O = np.zeros((S, 2))
    for pos, w in itertools.product(range(n), range(2)):
        seen = pos == w
        O[2 * pos + w, 1] = p_detect if seen else 0.02
        O[2 * pos + w, 0] = 1.0 - O[2 * pos + w, 1]
    init = np.zeros(S)
    init[0::2] = 1.0 / n
    return TabularPOMDP(P, O, init, name=f"brownian_ring_{n}")


def random_pomdp(n_states: int = 4, n_actions: int = 2, n_obs: int = 3, seed: int = 0,
                 concentration: float = 0.7) -> TabularPOMDP:
    rng = np.random.default_rng(seed)
    P = [rng.dirichlet(np.full(n_states, concentration), size=n_states) for _ in range(n_actions)]
    O = rng.dirichlet(np.full(n_obs, concentration), size=n_states)
    init = rng.dirichlet(np.ones(n_states))
    return TabularPOMDP(P, O, init, name=f"random_{n_states}_{seed}")


BUILTIN_WORLDS: dict[str, Callable[[], TabularPOMDP]] = {
    "hidden_object": hidden_object_world,
    "brownian_ring": brownian_ring,
    "random4": lambda: random_pomdp(4, 2, 3, seed=4),
    "two_position_reveal": two_position_reveal,
    "white_noise": white_noise_world,
    "cycle": deterministic_cycle,
}


# ---------------------------------------------------------------------------
# Gridworld conversion


def from_gridworld(config, max_states: int = MAX_GRID_STATES) -> TabularPOMDP:
    """Enumerate (agent cell, object positions[, velocities]) for a gridworld
    config and build the exact tabular model; observations are the distinct
    local views."""
    from .gridworld import Action, GridWorld, ObjectKind, ObjectSpec

    layout = config.validate()
    floor_cells = [
        (r, c) for r in range(layout.height) for c in range(layout.width)
        if not layout.wall_mask[r, c]
    ]
    per_object = []  # list of (room choices, kind)
    for oc in config.objects:
        refs = oc.room if isinstance(oc.room, tuple) else (oc.room,)
        per_object.append(([layout.room_id(r) for r in refs], oc.kind))

    def object_states(rooms, kind):
        out = []
        for rid in rooms:
            for cell in layout.rooms[rid]:
                if kind is ObjectKind.BOUNCING:
                    out += [(rid, cell, v) for v in itertools.product((-1, 1), repeat=2)]
                else:
                    out.append((rid, cell, (0, 0)))
        return out

    obj_spaces = [object_states(r, k) for r, k in per_object]
    n_states = len(floor_cells) * int(np.prod([len(s) for s in obj_spaces] or [1]))
    if n_states > max_states:
        raise ValueError(f"{n_states} states exceed the enumeration gate of {max_states}")

    states = list(itertools.product(floor_cells, *obj_spaces))
    index = {s: i for i, s in enumerate(states)}
    # room choices must be disjoint across objects, otherwise drop such states
    valid = np.array([
        len({o[0] for o in s[1:]}) == len(s) - 1 for s in states
    ])

    def make_world(s) -> GridWorld:
        objs = [ObjectSpec(kind, o[0], o[1], ch + 1, o[2])
                for ch, ((_, kind), o) in enumerate(zip(per_object, s[1:]))]
        return GridWorld(layout, objs, s[0], config.episode_len, np.random.default_rng(0))

    obs_index: dict[bytes, int] = {}
    obs_of = np.empty(len(states), dtype=np.int64)
    for i, s in enumerate(states):
        view = make_world(s).observe().tobytes()
        obs_of[i] = obs_index.setdefault(view, len(obs_index))

    def successors(s, action):
        """List of (prob, next_state) for one object-joint transition."""
        dr, dc = Action(action).delta
        target = (s[0][0] + dr, s[0][1] + dc)
        agent = target if not layout.wall_mask[target] else s[0]
        attempt = target if action != Action.STAY else None
        branches = [(1.0, [])]
        for (_, kind), (rid, cell, vel) in zip(per_object, s[1:]):
            outs = _object_transitions(layout, kind, rid, cell, vel, attempt)
            branches = [(p * q, acc + [o]) for p, acc in branches for q, o in outs]
        return [(p, (agent, *objs)) for p, objs in branches]

    P = []
    for a in range(len(Action)):
        rows, cols, vals = [], [], []
        for i, s in enumerate(states):
            if not valid[i]:
                rows.append(i)
                cols.append(i)
                vals.append(1.0)
                continue
            acc: dict[int, float] = defaultdict(float)
            for p, nxt in successors(s, a):
                acc[index[nxt]] += p
            for j, p in acc.items():
                rows.append(i)
                cols.append(j)
                vals.append(p)
        P.append(sp.csr_matrix((vals, (rows, cols)), shape=(len(states), len(states))))

    O = sp.csr_matrix(
        (np.ones(len(states)), (np.arange(len(states)), obs_of)),
        shape=(len(states), len(obs_index)),
    )
    init = np.zeros(len(states))
    spawn_states = [i for i, s in enumerate(states) if s[0] == layout.spawn and valid[i]]
    # objects are placed independently: room uniformly from the choices, then a cell
    for i in spawn_states:
        p = 1.0
        for (rooms, kind), (rid, cell, vel) in zip(per_object, states[i][1:]):
            p *= 1.0 / len(rooms) / len(layout.rooms[rid])
            if kind is ObjectKind.BOUNCING:
                p *= 0.25
        init[i] = p
    init /= init.sum()
    m = TabularPOMDP(P, O, init, name=f"grid_{config.layout}")
    m.state_labels = states  # type: ignore[attr-defined]
    m.cell_index = layout.cell_index  # type: ignore[attr-defined]
    return m


def _object_transitions(layout, kind, rid, cell, vel, attempt):
    from .gridworld import _MOVES, ObjectKind

    room = layout.rooms[rid]
    in_room = lambda c: layout.room_of(c) == rid  # noqa: E731
    if kind is ObjectKind.FIXED:
        return [(1.0, (rid, cell, vel))]
    if kind is ObjectKind.WHITE_NOISE:
        return [(1.0 / len(room), (rid, c, vel)) for c in room]
    if kind is ObjectKind.MOVABLE:
        if attempt == cell:
            return [(1.0 / len(room), (rid, c, vel)) for c in room]
        return [(1.0, (rid, cell, vel))]
    if kind is ObjectKind.BROWNIAN:
        outs = []
        for dr, dc in _MOVES:
            n = (cell[0] + dr, cell[1] + dc)
            outs.append((0.25, (rid, n if in_room(n) else cell, vel)))
        return outs
    # bouncing
    (r, c), (vr, vc) = cell, vel
    if not in_room((r + vr, c)):
        vr = -vr
    if not in_room((r, c + vc)):
        vc = -vc
    n = (r + vr, c + vc)
    return [(1.0, (rid, n if in_room(n) else cell, (vr, vc)))]


def load_world(path_or_name: str) -> TabularPOMDP:
    """A builtin world name, a JSON tabular spec, or a gridworld YAML config."""
    if path_or_name in BUILTIN_WORLDS:
        return BUILTIN_WORLDS[path_or_name]()
    path = Path(path_or_name)
    if path.suffix == ".json":
        return TabularPOMDP.from_dict(json.loads(path.read_text()))
    from .gridworld import EnvConfig

    return from_gridworld(EnvConfig.load(path))
