"""Experiment driver: presets, the training loop, artifacts and comparisons."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .agent import (
    ActorState,
    AgentConfig,
    Learner,
    QNetwork,
    ReplayBuffer,
    ReturnSpec,
    TraceBatch,
    act,
    run_actor,
)
from .evaluation import EvalResult, Probe, aspect_names, eval_seed, evaluate, metrics_from_trajectory
from .gridworld import Action, ConfigError, EnvConfig, load_layout, render_image, reset
from .rewards import ICMModel, RewardGenerator, RewardKind, RewardSpec
from .world_model import Batch, ModelConfig, WorldModel

OUTPUT_ROOT_ENV = "NDIGO_OUTPUT_ROOT"

_5ROOMS_EXPERIMENTS = {
    "exp1": [{"kind": "fixed", "room": "upper"}, {"kind": "white_noise", "room": "lower"}],
    "exp2": [
        {"kind": "fixed", "room": ["upper", "left", "right"]},
        {"kind": "white_noise", "room": "lower"},
    ],
    "exp3": [
        {"kind": "bouncing", "room": "upper"},
        {"kind": "bouncing", "room": "lower"},
        {"kind": "white_noise", "room": "right"},
    ],
    "exp4": [{"kind": "brownian", "room": "upper"}, {"kind": "fixed", "room": "lower"}],
}
_MAZE_OBJECTS = [
    {"kind": "white_noise", "room": 1},
    {"kind": "fixed", "room": 2},
    {"kind": "fixed", "room": 3},
    {"kind": "fixed", "room": 4},
    {"kind": "movable", "room": 5},
]
# reward kinds compared in each experiment; maze runs use longer horizons
EXPERIMENT_REWARDS = {
    **{k: ["pe", "pg", "icm", "ndigo-1", "ndigo-2", "ndigo-4"] for k in _5ROOMS_EXPERIMENTS},
    "exp5": ["pe", "pg", "icm", "ndigo-1", "ndigo-2", "ndigo-5", "ndigo-10"],
}


def experiment_env(name: str) -> EnvConfig:
    if name in _5ROOMS_EXPERIMENTS:
        return EnvConfig.from_dict({"layout": "5rooms", "objects": _5ROOMS_EXPERIMENTS[name]})
    if name == "exp5":
        return EnvConfig.from_dict({"layout": "maze", "objects": _MAZE_OBJECTS})
    raise ConfigError(f"unknown experiment {name!r}")


@dataclass
class RunConfig:
    experiment: str = "exp1"
    env: EnvConfig = field(default_factory=lambda: experiment_env("exp1"))
    reward: str = "ndigo-4"
    model_preset: str = "tiny"
    model_overrides: dict[str, Any] = field(default_factory=dict)
    agent: AgentConfig = field(default_factory=AgentConfig)
    returns: ReturnSpec = field(default_factory=ReturnSpec)
    steps: int = 100_000
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_episodes: int = 100
    icm_hidden: int = 32
    probe_hidden: int = 64
    out: str = ""

    @classmethod
    def preset(cls, experiment: str, **overrides) -> "RunConfig":
        return cls(experiment=experiment, env=experiment_env(experiment)).replace(**overrides)

    def replace(self, **overrides) -> "RunConfig":
        agent = overrides.pop("agent", None)
        returns = overrides.pop("returns", None)
        cfg = dataclasses.replace(self, **overrides)
        if isinstance(agent, dict):
            agent = dataclasses.replace(cfg.agent, **agent)
        if isinstance(returns, dict):
            returns = dataclasses.replace(cfg.returns, **returns)
        return dataclasses.replace(cfg, agent=agent or cfg.agent, returns=returns or cfg.returns)

    @property
    def reward_spec(self) -> RewardSpec:
        return RewardSpec.parse(self.reward)

    @property
    def model_config(self) -> ModelConfig:
        overrides = dict(self.model_overrides)
        spec = self.reward_spec
        base = ModelConfig.preset(self.model_preset)
        # the NDIGO-H reward reads head H+1
        if spec.kind is RewardKind.NDIGO and "K" not in overrides and base.K < spec.H + 1:
            overrides["K"] = spec.H + 1
        return ModelConfig.preset(self.model_preset, **overrides)

    def validate(self) -> None:
        self.env.validate()
        spec = self.reward_spec
        if spec.kind is not RewardKind.ICM:
            spec.validate(self.model_config.K)
        if self.steps < 1 or not self.seeds:
            raise ConfigError("need a positive step budget and at least one seed")

    def to_dict(self) -> dict[str, Any]:
        d = {
            "experiment": self.experiment,
            "env": self.env.to_dict(),
            "reward": self.reward,
            "model_preset": self.model_preset,
            "model_overrides": dict(self.model_overrides),
            "agent": dataclasses.asdict(self.agent),
            "returns": dataclasses.asdict(self.returns),
            "steps": self.steps,
            "seeds": list(self.seeds),
            "eval_episodes": self.eval_episodes,
            "icm_hidden": self.icm_hidden,
            "probe_hidden": self.probe_hidden,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = dict(d)
        experiment = d.pop("experiment", "custom")
        env = d.pop("env", None)
        if env is None:
            env_cfg = experiment_env(experiment)
        else:
            env_cfg = EnvConfig.from_dict(env)
        base = cls(experiment=experiment, env=env_cfg)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return base.replace(**d)

    @classmethod
    def load(cls, ref: str | Path) -> "RunConfig":
        """A YAML file or a preset name (exp1..exp5)."""
        ref = str(ref)
        if ref in EXPERIMENT_REWARDS:
            return cls.preset(ref)
        return cls.from_dict(yaml.safe_load(Path(ref).read_text()) or {})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def run_name(self) -> str:
        return f"{self.experiment}_{self.reward_spec.label.lower()}"


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# ---------------------------------------------------------------------------
# Construction


def build_model(cfg: RunConfig, seed: int):
    spec = cfg.reward_spec
    if spec.kind is RewardKind.ICM:
        return ICMModel(cfg.env.n_channels, cfg.model_config, seed, hidden=cfg.icm_hidden)
    return WorldModel(cfg.env.n_channels, cfg.model_config, seed)


def build_qnet(cfg: RunConfig, seed: int) -> QNetwork:
    return QNetwork(cfg.env.n_channels, cfg.model_config, cfg.agent.dueling_hidden, seed)


def build_probe(cfg: RunConfig, model, seed: int) -> Probe:
    layout = load_layout(cfg.env.layout)
    return Probe(model.hidden_size, layout.n_cells, len(cfg.env.objects) + 1,
                 hidden=cfg.probe_hidden, seed=seed)


def model_update(model, batch: Batch) -> tuple[float, np.ndarray]:
    """One optimizer step on the reward model; returns (mean loss, beliefs)."""
    if isinstance(model, ICMModel):
        out, grads, hs = model.losses(batch, with_grads=True)
        loss = float((out["inverse"] + out["forward"]).sum(axis=1).mean())
    else:
        losses, grads, hs = model.sequence_losses(batch, with_grads=True)
        loss = float(sum(v.sum() for v in losses.values()) / len(batch.actions))
    model.optimizer.step(grads)
    return loss, hs


def epsilon_at(agent: AgentConfig, step: int, total: int) -> float:
    horizon = max(1, int(agent.eps_fraction * total))
    frac = min(1.0, step / horizon)
    return agent.eps_start + frac * (agent.eps_end - agent.eps_start)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Training


@dataclass
class SeedResult:
    seed: int
    eval: EvalResult
    curves: list[dict[str, Any]]
    env_steps: int
    learner_steps: int


def train_seed(cfg: RunConfig, seed: int, out_dir: Path | None = None, log=None) -> SeedResult:
    """Algorithm loop for one seed: act, reward with the current model, store,
    then update model, probe and Q-learner from replay."""
    cfg.validate()
    spec = cfg.reward_spec
    ag = cfg.agent
    model = build_model(cfg, seed)
    rewarder = RewardGenerator(spec, model)
    qnet = build_qnet(cfg, seed)
    learner = Learner(qnet, ag, cfg.returns)
    probe = build_probe(cfg, model, seed)
    actor = ActorState(cfg.env, ag.n_envs, seed)
    buffer = ReplayBuffer(ag.replay_capacity, seed)
    rng = np.random.default_rng([seed, 0x616374])
    names = aspect_names(cfg.env)
    n_obj = len(cfg.env.objects)

    reward_rows = io.StringIO()
    rw = csv.writer(reward_rows, lineterminator="\n")
    rw.writerow(["episode", "t", "kind", "value"])
    curves: list[dict[str, Any]] = []
    env_steps = 0
    last_model_loss = float("nan")
    last_q_loss = float("nan")
    ep_return = np.zeros(ag.n_envs)
    while env_steps < cfg.steps:
        eps = epsilon_at(ag, env_steps, cfg.steps)
        traces, rewards, finished = run_actor(actor, qnet, rewarder, eps, rng, ag.trace_len)
        env_steps += rewards.size
        ep_return += rewards.sum(axis=1)
        for tr in traces:
            buffer.add(tr)
            for j, v in enumerate(tr.rewards):
                rw.writerow([tr.episode, tr.t0 + j, spec.label, _fmt(v)])
        if len(buffer) >= ag.min_replay:
            for _ in range(ag.updates_per_trace):
                batch = TraceBatch.stack(buffer.sample(ag.batch_size))
                mb = Batch(batch.obs, batch.actions, batch.wm_prev_action, batch.wm_h0)
                last_model_loss, hs = model_update(model, mb)
                B, T1 = batch.states.shape[:2]
                probe.train_step(hs.reshape(B * T1, -1), batch.states.reshape(B * T1, -1))
                last_q_loss = learner.update(batch)
                rewarder.on_learner_step()
        if finished:
            hs = actor.beliefs
            N, T1 = actor.states.shape[:2]
            disc = probe.losses(hs.reshape(N * T1, -1), actor.states.reshape(N * T1, -1))
            disc = disc.reshape(N, T1, -1).mean(axis=1)
            for i in range(N):
                m = metrics_from_trajectory(actor.obs[i, 1:], cfg.env.episode_len)
                row: dict[str, Any] = {
                    "episode": (actor.episode_base - 1) * N + i,
                    "env_steps": env_steps,
                    "epsilon": _fmt(eps),
                    "return": _fmt(ep_return[i]),
                    "model_loss": _fmt(last_model_loss),
                    "q_loss": _fmt(last_q_loss),
                }
                for a, name in enumerate(names):
                    row[f"discovery_{name}"] = _fmt(disc[i, a])
                for o in range(n_obj):
                    row[f"visit_count_{names[o]}"] = int(m.visit_count[o])
                    row[f"first_visit_{names[o]}"] = int(m.first_visit_time[o])
                curves.append(row)
            ep_return[:] = 0.0
            if log is not None:
                log(f"seed {seed} steps {env_steps}/{cfg.steps} eps {eps:.2f} "
                    f"model {last_model_loss:.3f} q {last_q_loss:.4f}")

    result = evaluate(qnet, model, probe, cfg.env, cfg.eval_episodes, ag.eval_eps, seed)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "rewards.csv").write_text(reward_rows.getvalue())
        _write_rows(out_dir / "curves.csv", curves)
        _write_rows(out_dir / "eval.csv", eval_rows(result, cfg.run_name(), seed))
        save_checkpoint(out_dir / "checkpoint.npz", cfg, seed, qnet, model, probe,
                        env_steps, learner.steps)
        render_episode(cfg, qnet, seed, 0, out_dir / "render.png")
    return SeedResult(seed, result, curves, env_steps, learner.steps)


def eval_rows(result: EvalResult, run_id: str, seed: int) -> list[dict[str, Any]]:
    rows = []
    n_obj = result.visit_count.shape[1]
    freq = (result.visit_count > 0).mean(axis=0)
    for e in range(len(result.discovery)):
        for a, name in enumerate(result.aspects):
            row = {
                "run_id": run_id,
                "seed": seed,
                "episode": e,
                "aspect": name,
                "discovery_loss": _fmt(result.discovery[e, a]),
                "visit_count": int(result.visit_count[e, a]) if a < n_obj else "",
                "first_visit_time": int(result.first_visit_time[e, a]) if a < n_obj else "",
                "room": result.rooms[a] if a < n_obj else "",
                "room_visit_frequency": _fmt(freq[a]) if a < n_obj else "",
            }
            rows.append(row)
    return rows


def _write_rows(path: Path, rows: list[dict[str, Any]]) -> None:
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Runs, summaries and comparisons

METRICS = ("visit_count", "first_visit", "discovery_loss")


def aggregate(per_seed: dict[str, dict[str, dict[str, float]]]) -> dict[str, dict[str, float]]:
    """Mean and std across seeds of each per-seed mean."""
    seeds = list(per_seed)
    out: dict[str, dict[str, float]] = {}
    for aspect in per_seed[seeds[0]]:
        row: dict[str, float] = {}
        for metric in METRICS:
            key = f"{metric}_mean"
            vals = [per_seed[s][aspect][key] for s in seeds if key in per_seed[s][aspect]]
            if vals:
                row[f"{metric}_mean"] = float(np.mean(vals))
                row[f"{metric}_std"] = float(np.std(vals))
        out[aspect] = row
    return out


def run(cfg: RunConfig, log=None) -> dict[str, Any]:
    """Train and evaluate every seed, writing all artifacts under the run dir."""
    cfg.validate()
    out = Path(cfg.out) if cfg.out else default_output_root() / cfg.run_name()
    out.mkdir(parents=True, exist_ok=True)
    per_seed: dict[str, dict[str, dict[str, float]]] = {}
    stats = {}
    t0 = time.time()
    for seed in cfg.seeds:
        res = train_seed(cfg, seed, out / f"seed_{seed}", log=log)
        per_seed[str(seed)] = res.eval.summary()
        stats[str(seed)] = {"env_steps": res.env_steps, "learner_steps": res.learner_steps}
    summary = {
        "experiment": cfg.experiment,
        "reward": cfg.reward_spec.label,
        "seeds": per_seed,
        "aggregate": aggregate(per_seed),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out / "summary.md").write_text(markdown_table({cfg.reward_spec.label: summary["aggregate"]},
                                                   title=f"{cfg.experiment} ({len(cfg.seeds)} seeds)"))
    manifest = {
        "experiment": cfg.experiment,
        "reward": cfg.reward_spec.label,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seeds": list(cfg.seeds),
        "counts": stats,
        "versions": {
            "ndigo": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_time_s": round(time.time() - t0, 1),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"dir": str(out), "summary": summary, "manifest": manifest}


def markdown_table(by_reward: dict[str, dict[str, dict[str, float]]], title: str = "") -> str:
    lines = [f"### {title}", ""] if title else []
    lines.append("| reward | aspect | visit count | first visit | discovery loss |")
    lines.append("|---|---|---|---|---|")

    def cell(row, metric):
        if f"{metric}_mean" not in row:
            return "-"
        return f"{row[f'{metric}_mean']:.2f} ± {row[f'{metric}_std']:.2f}"

    for reward, table in by_reward.items():
        for aspect, row in table.items():
            lines.append(
                f"| {reward} | {aspect} | {cell(row, 'visit_count')} | "
                f"{cell(row, 'first_visit')} | {cell(row, 'discovery_loss')} |"
            )
    return "\n".join(lines) + "\n"


def compare(dirs: list[str | Path], out: str | Path | None = None) -> dict[str, Any]:
    """Merge run summaries by reward kind into mean ± std tables."""
    if not dirs:
        raise ValueError("nothing to compare")
    experiments = set()
    grouped: dict[str, dict[str, dict[str, dict[str, float]]]] = {}
    for d in dirs:
        summary = json.loads((Path(d) / "summary.json").read_text())
        experiments.add(summary["experiment"])
        seeds = grouped.setdefault(summary["reward"], {})
        for seed, table in summary["seeds"].items():
            seeds[f"{Path(d).name}/{seed}"] = table
    if len(experiments) > 1:
        raise ConfigError(f"runs mix experiments: {sorted(experiments)}")
    tables = {reward: aggregate(seeds) for reward, seeds in grouped.items()}
    result = {"experiment": experiments.pop(), "tables": tables}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.md").write_text(markdown_table(tables, title=result["experiment"]))
        rows = [
            {"reward": r, "aspect": a, **{k: _fmt(v) for k, v in row.items()}}
            for r, t in tables.items() for a, row in t.items()
        ]
        with open(out / "comparison.csv", "w", newline="") as f:
            keys = sorted({k for row in rows for k in row} - {"reward", "aspect"})
            w = csv.DictWriter(f, fieldnames=["reward", "aspect", *keys], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        (out / "comparison.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


# ---------------------------------------------------------------------------
# Checkpoints and renders


def save_checkpoint(path: Path, cfg: RunConfig, seed: int, qnet: QNetwork, model, probe: Probe,
                    env_steps: int, learner_steps: int) -> None:
    arrays = {f"q/{k}": v for k, v in qnet.params.items()}
    arrays.update({f"model/{k}": v for k, v in model.params.items()})
    arrays.update({f"probe/{k}": v for k, v in probe.params.items()})
    np.savez(path, **arrays)
    manifest = {
        "config": cfg.to_dict(),
        "seed": seed,
        "env_steps": env_steps,
        "learner_steps": learner_steps,
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path: str | Path):
    """Returns (config, seed, qnet, model, probe)."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    cfg = RunConfig.from_dict(manifest["config"])
    seed = manifest["seed"]
    qnet, model = build_qnet(cfg, seed), build_model(cfg, seed)
    probe = build_probe(cfg, model, seed)
    with np.load(path) as data:
        for prefix, params in (("q/", qnet.params), ("model/", model.params), ("probe/", probe.params)):
            for k in params:
                params[k][...] = data[prefix + k]
    return cfg, seed, qnet, model, probe


def rollout(cfg: RunConfig, qnet: QNetwork, seed: int, episode: int, eps: float | None = None):
    """Replay evaluation episode ``episode``; returns the visited global frames."""
    eps = cfg.agent.eval_eps if eps is None else eps
    world, obs = reset(cfg.env, eval_seed(seed, episode))
    rng = np.random.default_rng([seed, 0x72, episode])
    h = qnet.initial_state(1)
    prev = np.array([int(Action.STAY)])
    frames = [world.copy()]
    while not world.done:
        a, h = act(qnet, h, obs[None], prev, eps, rng)
        obs = world.step(int(a[0]))
        prev = a
        frames.append(world.copy())
    return frames


def render_episode(cfg: RunConfig, qnet: QNetwork, seed: int, episode: int, path: Path,
                   scale: int = 12) -> Path:
    """Top-down PNG of the final frame with the agent's path tinted."""
    from PIL import Image

    frames = rollout(cfg, qnet, seed, episode)
    img = render_image(frames[-1], scale).astype(np.float64)
    visits = np.zeros(frames[-1].layout.wall_mask.shape)
    for f in frames:
        visits[f.agent_pos] += 1
    tint = np.kron(np.minimum(1.0, np.log1p(visits) / np.log1p(len(frames) / 10)),
                   np.ones((scale, scale)))
    img[..., 0] = np.maximum(img[..., 0], 160 * tint)
    img[..., 1] = np.maximum(img[..., 1], 120 * tint)
    Image.fromarray(img.astype(np.uint8)).save(path)
    return path
