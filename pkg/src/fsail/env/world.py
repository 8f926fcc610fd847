"""Keyframe tabletop dynamics: world state, reset, step and success checks.

The gripper teleports to each commanded keyframe pose.  Closing over a
liftable object at the gripper's cell and height grasps it; opening
drops a held object onto the top of the column below.  Sweeping the
lowered gripper along a row or column bulldozes level-0 objects ahead
of it.  Illegal commands never raise: they degrade to no-ops.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .tasks import COLORS, FLAT_SHAPES, LIFTABLE, TaskSpec

N_LEVELS = 3
N_ROT = 4
DRAWER_TRAVEL = 2
MAX_PLACEMENT_ATTEMPTS = 1000


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Obj:
    id: int
    shape: str
    color: str
    x: int
    y: int
    level: int = 0
    orient: int = 0
    state: int = 0  # button: pressed flag; drawer: extension
    anchor: int = -1  # drawer: x of the closed position

    @property
    def flat(self):
        return self.shape in FLAT_SHAPES

    @property
    def cell(self):
        return (self.x, self.y)


@dataclass(frozen=True)
class Gripper:
    x: int
    y: int
    z: int = 2
    rot: int = 0
    closed: bool = False


@dataclass(frozen=True)
class KeyframeAction:
    x_bin: int
    y_bin: int
    z_bin: int
    rot_bin: int
    gripper: int  # 0 open, 1 closed

    def as_tuple(self):
        return (self.x_bin, self.y_bin, self.z_bin, self.rot_bin, self.gripper)

    @classmethod
    def from_tuple(cls, t):
        return cls(*(int(v) for v in t))

    def valid(self, grid: int) -> bool:
        return (0 <= self.x_bin < grid and 0 <= self.y_bin < grid
                and 0 <= self.z_bin < N_LEVELS and 0 <= self.rot_bin < N_ROT
                and self.gripper in (0, 1))


@dataclass(frozen=True)
class WorldState:
    grid: int
    objects: tuple
    gripper: Gripper
    held: Optional[int] = None
    step_count: int = 0

    def find(self, descriptor) -> Obj:
        shape, color = descriptor
        hits = [o for o in self.objects if o.shape == shape and o.color == color]
        if len(hits) != 1:
            raise LookupError(f"expected one {color} {shape}, found {len(hits)}")
        return hits[0]

    def solid_at(self, x, y, level=None):
        return [o for o in self.objects
                if not o.flat and o.x == x and o.y == y and (level is None or o.level == level)]


def task_rng(task: TaskSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(task.task_id.encode())])


# ------------------------------------------------------------------ reset

def _free_cells(grid, taken):
    return [(x, y) for x in range(grid) for y in range(grid) if (x, y) not in taken]


def _sample_layout(task: TaskSpec, rng, grid: int):
    """One placement attempt: list of (shape, color, x, y, extra) or None."""
    verb = task.verb
    cells = {}
    if verb in ("push", "sweep"):
        # pushes travel along +x and sweeps along +y, so the approach cell
        # sits at a fixed offset from the object
        axis, sign = (0, 1) if verb == "push" else (1, 1)
        dist = int(rng.integers(2, grid // 2 + 1))
        # behind-cell, object, path..., zone all on one line
        start = [int(rng.integers(grid)), int(rng.integers(grid))]
        line = [tuple(start[i] + (sign * k if i == axis else 0) for i in range(2))
                for k in range(dist + 2)]
        if any(not (0 <= c < grid) for p in line for c in p):
            return None
        cells["obj"] = line[1]
        cells["target"] = line[-1]
        reserved = set(line)
    elif verb in ("slide_open", "slide_close"):
        ax = int(rng.integers(grid - DRAWER_TRAVEL))
        y = int(rng.integers(grid))
        ext = 0 if verb == "slide_open" else DRAWER_TRAVEL
        cells["obj"] = (ax + ext, y)
        cells["anchor"] = ax
        reserved = {(ax + k, y) for k in range(DRAWER_TRAVEL + 1)}
    else:
        picks = rng.choice(grid * grid, size=2, replace=False)
        cells["obj"] = (int(picks[0] % grid), int(picks[0] // grid))
        if task.target is not None:
            cells["target"] = (int(picks[1] % grid), int(picks[1] // grid))
        reserved = {cells["obj"]} | ({cells["target"]} if "target" in cells else set())
    return cells, reserved


def reset(task: TaskSpec, seed: int, grid: int = 12, n_distractors: int = 2) -> WorldState:
    """Deterministic scene for ``(task, seed)`` with the gripper parked at home."""
    rng = task_rng(task, seed)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        sampled = _sample_layout(task, rng, grid)
        if sampled is None:
            continue
        cells, reserved = sampled
        objs = []
        s, c = task.obj
        ox, oy = cells["obj"]
        orient = 0
        if task.verb == "rotate":
            orient = int(rng.integers(1, N_ROT))
        elif s in LIFTABLE:
            orient = int(rng.integers(N_ROT))
        if s == "drawer":
            ext = ox - cells["anchor"]
            objs.append(Obj(0, s, c, ox, oy, 0, 0, ext, cells["anchor"]))
        else:
            objs.append(Obj(0, s, c, ox, oy, 0, orient))
        if task.target is not None:
            ts, tc = task.target
            tx, ty = cells["target"]
            t_orient = int(rng.integers(N_ROT)) if ts in ("hole",) or ts in LIFTABLE else 0
            objs.append(Obj(1, ts, tc, tx, ty, 0, t_orient))
        used = set(task.descriptors())
        pool = [(sh, co) for sh in ("cube", "cylinder", "button") for co in COLORS
                if (sh, co) not in used]
        free = _free_cells(grid, reserved)
        if len(free) < n_distractors:
            continue
        picks = rng.choice(len(pool), size=n_distractors, replace=False)
        spots = rng.choice(len(free), size=n_distractors, replace=False)
        for k, (pi, si) in enumerate(zip(picks, spots)):
            sh, co = pool[int(pi)]
            x, y = free[int(si)]
            o = int(rng.integers(N_ROT)) if sh in LIFTABLE else 0
            objs.append(Obj(len(objs), sh, co, x, y, 0, o))
        state = WorldState(grid, tuple(objs), Gripper(0, 0, 2, 0, False))
        if not check_success(state, task):
            return state
    raise GenerationError(f"could not place task {task.task_id} after {MAX_PLACEMENT_ATTEMPTS} attempts")


# ------------------------------------------------------------------ step

def _bulldoze(state: WorldState, objs: list, g: Gripper, tx: int, ty: int) -> bool:
    """Push level-0 liftables on the straight path ahead of the gripper.

    Returns False (and leaves ``objs`` untouched) when the push is blocked.
    """
    dx, dy = tx - g.x, ty - g.y
    if (dx != 0) == (dy != 0):
        return True
    step = (int(np.sign(dx)), int(np.sign(dy)))
    dist = abs(dx) + abs(dy)
    path = [(g.x + step[0] * k, g.y + step[1] * k) for k in range(1, dist + 1)]
    pushed = []
    for k, cell in enumerate(path):
        for o in objs:
            if o.flat or o.level != 0 or o.cell != cell:
                continue
            if o.shape not in LIFTABLE:
                return False
            pushed.append(o)
    if not pushed:
        return True
    moved = {}
    for rank, o in enumerate(pushed, start=1):
        nx, ny = tx + step[0] * rank, ty + step[1] * rank
        if not (0 <= nx < state.grid and 0 <= ny < state.grid):
            return False
        moved[o.id] = (nx, ny)
    dest = set(moved.values())
    for o in objs:
        if o.id not in moved and not o.flat and o.level == 0 and o.cell in dest:
            return False
    for i, o in enumerate(objs):
        if o.id in moved:
            objs[i] = replace(o, x=moved[o.id][0], y=moved[o.id][1])
    return True


def step(state: WorldState, action: KeyframeAction) -> WorldState:
    if not action.valid(state.grid):
        raise ValueError(f"action out of range: {action}")
    g = state.gripper
    ax, ay, az, ar = action.x_bin, action.y_bin, action.z_bin, action.rot_bin
    want_closed = bool(action.gripper)
    objs = list(state.objects)
    held = state.held
    noop = replace(state, step_count=state.step_count + 1)  # blocked carry

    if held is not None:
        h = objs[held]
        if h.shape == "drawer":
            if ay == h.y and az == 0 and h.anchor <= ax <= h.anchor + DRAWER_TRAVEL:
                if any(o.id != h.id for o in state.solid_at(ax, ay, 0)):
                    return noop
                objs[held] = replace(h, x=ax, state=ax - h.anchor)
            else:
                held = None
        else:
            if any(o.id != h.id for o in state.solid_at(ax, ay, az)):
                return noop
            objs[held] = replace(h, x=ax, y=ay, level=az, orient=(h.orient + ar - g.rot) % N_ROT)
    elif g.z == 0 and az == 0 and (ax, ay) != (g.x, g.y):
        _bulldoze(state, objs, g, ax, ay)

    closed = want_closed
    if want_closed and not g.closed and held is None:
        for i, o in enumerate(objs):
            if o.flat or (o.x, o.y, o.level) != (ax, ay, az):
                continue
            if o.shape in LIFTABLE or (o.shape == "drawer" and az == 0):
                held = i
            break
    elif not want_closed and held is not None:
        h = objs[held]
        if h.shape != "drawer":
            below = [o.level for o in objs if not o.flat and o.cell == (ax, ay) and o.id != h.id]
            level = max(below) + 1 if below else 0
            if level >= N_LEVELS:
                closed = True
            else:
                objs[held] = replace(h, level=level)
                held = None
        else:
            held = None
    if held is not None:
        closed = True

    if closed and held is None and az == 0:
        for i, o in enumerate(objs):
            if o.shape == "button" and o.cell == (ax, ay):
                objs[i] = replace(o, state=1)

    return WorldState(state.grid, tuple(objs), Gripper(ax, ay, az, ar, closed), held,
                      state.step_count + 1)


# ------------------------------------------------------------------ success

def check_success(state: WorldState, task: TaskSpec) -> bool:
    try:
        o = state.find(task.obj)
        t = state.find(task.target) if task.target else None
    except LookupError:
        return False
    free = state.held is None or state.objects[state.held].id != o.id
    g = state.gripper
    v = task.verb
    if v == "reach":
        return g.z == 1 and (g.x, g.y) == o.cell
    if v in ("pick_place", "push", "sweep"):
        return free and o.cell == t.cell and o.level == 0
    if v == "stack":
        return free and o.cell == t.cell and o.level == t.level + 1
    if v == "press":
        return o.state == 1
    if v == "rotate":
        return free and o.level == 0 and o.orient == task.params.get("target_orient", 0)
    if v == "slide_open":
        return free and o.state == DRAWER_TRAVEL
    if v == "slide_close":
        return free and o.state == 0
    if v == "insert":
        return free and o.cell == t.cell and o.level == 0 and o.orient == t.orient
    raise ValueError(f"unknown verb {v}")
