"""Partially observable gridworlds: the `5rooms` and `maze` layouts.

The agent sees a 5x5 window centred on itself.  Channel 0 of an observation
holds the walls, channel ``i >= 1`` holds object ``i - 1`` as a one-hot map
(or all zeros when the object is out of view).
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

VIEW = 5
HALF_VIEW = VIEW // 2
DEFAULT_EPISODE_LEN = 400

Cell = tuple[int, int]


class ConfigError(ValueError):
    pass


class EpisodeOver(RuntimeError):
    pass


class Action(enum.IntEnum):
    STAY = 0
    UP = 1
    DOWN = 2
    RIGHT = 3
    LEFT = 4

    @property
    def delta(self) -> Cell:
        return _DELTAS[self]

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(len(Action), dtype=np.float64)
        v[self] = 1.0
        return v


NUM_ACTIONS = len(Action)
_DELTAS = {
    Action.STAY: (0, 0),
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.RIGHT: (0, 1),
    Action.LEFT: (0, -1),
}
_MOVES = [(-1, 0), (1, 0), (0, 1), (0, -1)]


class ObjectKind(str, enum.Enum):
    FIXED = "fixed"
    BOUNCING = "bouncing"
    BROWNIAN = "brownian"
    WHITE_NOISE = "white_noise"
    MOVABLE = "movable"


SYMBOLS = {
    ObjectKind.FIXED: "F",
    ObjectKind.BOUNCING: "B",
    ObjectKind.BROWNIAN: "R",
    ObjectKind.WHITE_NOISE: "W",
    ObjectKind.MOVABLE: "M",
}


# ---------------------------------------------------------------------------
# Layouts


@dataclass(frozen=True, eq=False)
class Layout:
    name: str
    wall_mask: np.ndarray  # (height, width) bool
    rooms: dict[int, tuple[Cell, ...]]
    room_names: dict[str, int]
    doorways: frozenset[Cell]
    spawn: Cell

    @property
    def height(self) -> int:
        return self.wall_mask.shape[0]

    @property
    def width(self) -> int:
        return self.wall_mask.shape[1]

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    def cell_index(self, cell: Cell) -> int:
        return cell[0] * self.width + cell[1]

    def room_id(self, ref: int | str) -> int:
        if isinstance(ref, str) and not ref.isdigit():
            if ref not in self.room_names:
                raise ConfigError(f"layout {self.name!r} has no room named {ref!r}")
            return self.room_names[ref]
        rid = int(ref)
        if rid not in self.rooms:
            raise ConfigError(f"layout {self.name!r} has no room {rid}")
        return rid

    def room_of(self, cell: Cell) -> int | None:
        return self._room_lookup.get(cell)

    @property
    def _room_lookup(self) -> dict[Cell, int]:
        lookup = self.__dict__.get("_lookup")
        if lookup is None:
            lookup = {c: rid for rid, cells in self.rooms.items() for c in cells}
            object.__setattr__(self, "_lookup", lookup)
        return lookup


def parse_layout(text: str, name: str | None = None) -> Layout:
    """Parse a layout grid.

    ``#`` is a wall, ``.`` floor outside any room (doorways), digits are room
    cells and ``S`` the spawn cell; the spawn belongs to the room of its
    neighbours.  Lines starting with ``;`` are metadata (``; room 1 upper``).
    """
    rows: list[str] = []
    room_names: dict[str, int] = {}
    for line in text.splitlines():
        if line.startswith(";"):
            parts = line[1:].split()
            if len(parts) == 3 and parts[0] == "room":
                room_names[parts[2]] = int(parts[1])
            elif len(parts) >= 2 and parts[0] == "layout" and name is None:
                name = parts[1]
            continue
        if line.strip():
            rows.append(line.rstrip("\n"))
    if not rows or len({len(r) for r in rows}) != 1:
        raise ConfigError("layout grid must be a non-empty rectangle")
    h, w = len(rows), len(rows[0])
    walls = np.zeros((h, w), dtype=bool)
    rooms: dict[int, list[Cell]] = {}
    doorways: set[Cell] = set()
    spawn = None
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            if ch == "#":
                walls[r, c] = True
            elif ch == ".":
                doorways.add((r, c))
            elif ch == "S":
                spawn = (r, c)
            elif ch.isdigit():
                rooms.setdefault(int(ch), []).append((r, c))
            else:
                raise ConfigError(f"unknown layout symbol {ch!r} at {(r, c)}")
    if spawn is None:
        raise ConfigError("layout has no spawn cell")
    if not (walls[0].all() and walls[-1].all() and walls[:, 0].all() and walls[:, -1].all()):
        raise ConfigError("layout must be bounded by walls")
    for rid, cells in rooms.items():
        r, c = spawn
        if any((r + dr, c + dc) in cells for dr, dc in _MOVES):
            cells.append(spawn)
            break
    return Layout(
        name=name or "custom",
        wall_mask=walls,
        rooms={rid: tuple(sorted(cells)) for rid, cells in sorted(rooms.items())},
        room_names=room_names,
        doorways=frozenset(doorways),
        spawn=spawn,
    )


_LAYOUT_CACHE: dict[str, Layout] = {}
LAYOUTS = ("5rooms", "maze", "tiny", "room3")


def load_layout(name: str) -> Layout:
    """Load a registered layout by id, or a layout file by path."""
    if name in _LAYOUT_CACHE:
        return _LAYOUT_CACHE[name]
    if name in LAYOUTS:
        text = resources.files("ndigo").joinpath("assets").joinpath(f"{name}.txt").read_text()
    elif Path(name).is_file():
        text = Path(name).read_text()
    else:
        raise ConfigError(f"unknown layout {name!r}")
    layout = parse_layout(text, name=None if name not in LAYOUTS else name)
    _LAYOUT_CACHE[name] = layout
    return layout


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ObjectConfig:
    kind: ObjectKind
    # one room reference, or several to pick from uniformly at every reset
    room: int | str | tuple[int | str, ...]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ObjectConfig":
        try:
            kind = ObjectKind(d["kind"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad object kind in {d!r}") from exc
        room = d.get("room")
        if room is None:
            raise ConfigError(f"object {d!r} has no room")
        if isinstance(room, list):
            room = tuple(room)
        return cls(kind, room)

    def to_dict(self) -> dict[str, Any]:
        room = list(self.room) if isinstance(self.room, tuple) else self.room
        return {"kind": self.kind.value, "room": room}


@dataclass(frozen=True)
class EnvConfig:
    layout: str = "5rooms"
    objects: tuple[ObjectConfig, ...] = ()
    episode_len: int = DEFAULT_EPISODE_LEN

    @property
    def n_channels(self) -> int:
        return 1 + len(self.objects)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EnvConfig":
        objects = tuple(ObjectConfig.from_dict(o) for o in d.get("objects") or ())
        return cls(
            layout=d.get("layout", "5rooms"),
            objects=objects,
            episode_len=int(d.get("episode_len", DEFAULT_EPISODE_LEN)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "EnvConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_dict(self) -> dict[str, Any]:
        return {
            "layout": self.layout,
            "objects": [o.to_dict() for o in self.objects],
            "episode_len": self.episode_len,
        }

    def validate(self) -> Layout:
        layout = load_layout(self.layout)
        if self.episode_len < 1:
            raise ConfigError("episode_len must be positive")
        fixed_rooms = []
        for obj in self.objects:
            refs = obj.room if isinstance(obj.room, tuple) else (obj.room,)
            rids = [layout.room_id(r) for r in refs]
            if len(rids) == 1:
                fixed_rooms.append(rids[0])
        if len(set(fixed_rooms)) != len(fixed_rooms):
            raise ConfigError("at most one object per room")
        return layout


# ---------------------------------------------------------------------------
# World


@dataclass
class ObjectSpec:
    kind: ObjectKind
    home_room: int
    position: Cell
    channel: int
    velocity: Cell = (0, 0)


@dataclass(frozen=True)
class StateLabel:
    """Ground-truth positions as row-major global cell indices."""

    agent: int
    objects: tuple[int, ...]

    def as_array(self) -> np.ndarray:
        return np.array((*self.objects, self.agent), dtype=np.int64)


@dataclass
class GridWorld:
    layout: Layout
    objects: list[ObjectSpec]
    agent_pos: Cell
    episode_len: int
    rng: np.random.Generator
    t: int = 0
    _padded_walls: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self._padded_walls is None:
            self._padded_walls = np.pad(
                self.layout.wall_mask, HALF_VIEW, constant_values=True
            ).astype(np.uint8)

    @property
    def done(self) -> bool:
        return self.t >= self.episode_len

    @property
    def n_channels(self) -> int:
        return 1 + len(self.objects)

    def copy(self) -> "GridWorld":
        return copy.deepcopy(self)

    # -- dynamics ---------------------------------------------------------

    def step(self, action: Action | int) -> np.ndarray:
        if self.done:
            raise EpisodeOver(f"episode ended at t={self.t}")
        action = Action(int(action))
        dr, dc = action.delta
        target = (self.agent_pos[0] + dr, self.agent_pos[1] + dc)
        if not self.layout.wall_mask[target]:
            self.agent_pos = target
        for obj in self.objects:
            self._move_object(obj, target if action != Action.STAY else None)
        self.t += 1
        return self.observe()

    def _move_object(self, obj: ObjectSpec, agent_target: Cell | None) -> None:
        room = self.layout.rooms[obj.home_room]
        in_room = self.layout.room_of
        if obj.kind is ObjectKind.BOUNCING:
            (r, c), (vr, vc) = obj.position, obj.velocity
            if in_room((r + vr, c)) != obj.home_room:
                vr = -vr
            if in_room((r, c + vc)) != obj.home_room:
                vc = -vc
            obj.velocity = (vr, vc)
            nxt = (r + vr, c + vc)
            if in_room(nxt) == obj.home_room:
                obj.position = nxt
        elif obj.kind is ObjectKind.BROWNIAN:
            dr, dc = _MOVES[self.rng.integers(4)]
            nxt = (obj.position[0] + dr, obj.position[1] + dc)
            if in_room(nxt) == obj.home_room:
                obj.position = nxt
        elif obj.kind is ObjectKind.WHITE_NOISE:
            obj.position = room[self.rng.integers(len(room))]
        elif obj.kind is ObjectKind.MOVABLE:
            if agent_target == obj.position:
                obj.position = room[self.rng.integers(len(room))]

    # -- views ------------------------------------------------------------

    def observe(self) -> np.ndarray:
        """Local (5, 5, c) binary view around the agent."""
        r, c = self.agent_pos
        obs = np.zeros((VIEW, VIEW, self.n_channels), dtype=np.uint8)
        obs[:, :, 0] = self._padded_walls[r : r + VIEW, c : c + VIEW]
        for obj in self.objects:
            lr = obj.position[0] - r + HALF_VIEW
            lc = obj.position[1] - c + HALF_VIEW
            if 0 <= lr < VIEW and 0 <= lc < VIEW:
                obs[lr, lc, obj.channel] = 1
        return obs

    def true_state(self) -> StateLabel:
        idx = self.layout.cell_index
        return StateLabel(
            agent=idx(self.agent_pos), objects=tuple(idx(o.position) for o in self.objects)
        )

    def render_global(self) -> list[str]:
        """One symbol per global cell: ``#`` wall, ``.`` floor, ``A`` agent,
        object letters by kind (agent drawn on top)."""
        grid = np.where(self.layout.wall_mask, "#", ".").astype("<U1")
        for obj in self.objects:
            grid[obj.position] = SYMBOLS[obj.kind]
        grid[self.agent_pos] = "A"
        return ["".join(row) for row in grid]


def reset(config: EnvConfig, seed: int) -> tuple[GridWorld, np.ndarray]:
    """Start an episode: agent on the layout spawn, objects placed uniformly in
    their home rooms.  Identical ``(config, seed)`` give identical episodes."""
    layout = config.validate()
    rng = np.random.default_rng([int(seed), 0x67726964])
    objects: list[ObjectSpec] = []
    used_rooms: set[int] = set()
    for channel, oc in enumerate(config.objects, start=1):
        refs = oc.room if isinstance(oc.room, tuple) else (oc.room,)
        choices = [layout.room_id(r) for r in refs]
        free = [rid for rid in choices if rid not in used_rooms]
        if not free:
            raise ConfigError("object roster puts two objects in one room")
        rid = free[rng.integers(len(free))]
        used_rooms.add(rid)
        cells = layout.rooms[rid]
        pos = cells[rng.integers(len(cells))]
        vel = (0, 0)
        if oc.kind is ObjectKind.BOUNCING:
            vel = ((-1, 1)[rng.integers(2)], (-1, 1)[rng.integers(2)])
        objects.append(ObjectSpec(oc.kind, rid, pos, channel, vel))
    world = GridWorld(layout, objects, layout.spawn, config.episode_len, rng)
    return world, world.observe()


def step(world: GridWorld, action: Action | int) -> tuple[GridWorld, np.ndarray]:
    obs = world.step(action)
    return world, obs


def render_image(world: GridWorld, scale: int = 12) -> np.ndarray:
    """RGB raster of the top-down view, ``scale`` pixels per cell."""
    palette = {
        "#": (90, 90, 90),
        ".": (0, 0, 0),
        "A": (255, 255, 255),
        "F": (40, 120, 255),
        "B": (40, 200, 80),
        "R": (230, 160, 30),
        "W": (200, 60, 200),
        "M": (230, 40, 40),
    }
    rows = world.render_global()
    img = np.array([[palette[ch] for ch in row] for row in rows], dtype=np.uint8)
    return np.kron(img, np.ones((scale, scale, 1), dtype=np.uint8))


def layout_connected_rooms(layout: Layout) -> int:
    """Number of 4-connected components of room cells (doorways excluded)."""
    cells = {c for cs in layout.rooms.values() for c in cs}
    seen: set[Cell] = set()
    count = 0
    for start in cells:
        if start in seen:
            continue
        count += 1
        stack = [start]
        seen.add(start)
        while stack:
            r, c = stack.pop()
            for dr, dc in _MOVES:
                n = (r + dr, c + dc)
                if n in cells and n not in seen:
                    seen.add(n)
                    stack.append(n)
    return count


def actions_from(seq: Sequence[int]) -> list[Action]:
    return [Action(int(a)) for a in seq]
