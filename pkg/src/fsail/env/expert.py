"""Scripted keyframe experts, one small state machine per verb."""

from __future__ import annotations

from .tasks import TaskSpec
from .world import DRAWER_TRAVEL, N_ROT, KeyframeAction, WorldState, check_success

OPEN, CLOSED = 0, 1


class ExpertError(RuntimeError):
    pass


def _act(x, y, z, rot, grip):
    return KeyframeAction(int(x), int(y), int(z), int(rot) % N_ROT, grip)


def _hold_pose(state: WorldState) -> KeyframeAction:
    g = state.gripper
    return _act(g.x, g.y, g.z, g.rot, CLOSED if g.closed else OPEN)


def _holding(state, obj):
    return state.held is not None and state.objects[state.held].id == obj.id


def _acquire(state, obj, rot=0):
    """Approach from above with the gripper open, then close on the object."""
    g = state.gripper
    above = min(obj.level + 1, 2)
    if (g.x, g.y, g.z) == (obj.x, obj.y, above) and not g.closed:
        return _act(obj.x, obj.y, obj.level, rot, CLOSED)
    return _act(obj.x, obj.y, above, rot, OPEN)


def _push_line(obj, zone):
    """Cells to start and stop the push so the object lands on ``zone``."""
    dx, dy = zone.x - obj.x, zone.y - obj.y
    if (dx != 0) == (dy != 0):
        raise ExpertError("push target is not on the object's row or column")
    sx = (dx > 0) - (dx < 0)
    sy = (dy > 0) - (dy < 0)
    return (obj.x - sx, obj.y - sy), (zone.x - sx, zone.y - sy)


def expert_policy(state: WorldState, task: TaskSpec) -> KeyframeAction:
    """Next keyframe of the scripted plan; a hold-still no-op once solved."""
    if check_success(state, task):
        return _hold_pose(state)
    try:
        obj = state.find(task.obj)
        tgt = state.find(task.target) if task.target else None
    except LookupError as e:
        raise ExpertError(str(e)) from None
    g = state.gripper
    v = task.verb
    grid = state.grid

    if v == "reach":
        return _act(obj.x, obj.y, 1, 0, OPEN)

    if v == "press":
        if (g.x, g.y, g.z) == (obj.x, obj.y, 1) and g.closed:
            return _act(obj.x, obj.y, 0, 0, CLOSED)
        return _act(obj.x, obj.y, 1, 0, CLOSED)

    if v in ("push", "sweep"):
        if state.held is not None:
            raise ExpertError("cannot push while holding an object")
        closed = CLOSED if v == "push" else OPEN
        rot = 0 if v == "push" else 1
        behind, stop = _push_line(obj, tgt)
        for cx, cy in (behind, stop):
            if not (0 <= cx < grid and 0 <= cy < grid):
                raise ExpertError("no room behind the object to push from")
        if (g.x, g.y, g.z) == (behind[0], behind[1], 0):
            return _act(stop[0], stop[1], 0, rot, closed)
        return _act(behind[0], behind[1], 0, rot, closed)

    if v in ("slide_open", "slide_close"):
        goal = obj.anchor + (DRAWER_TRAVEL if v == "slide_open" else 0)
        if _holding(state, obj):
            if obj.x == goal:
                return _act(g.x, g.y, g.z, g.rot, OPEN)
            return _act(goal, obj.y, 0, g.rot, CLOSED)
        return _acquire(state, obj)

    if v in ("pick_place", "stack", "insert", "rotate"):
        if not _holding(state, obj):
            if state.held is not None:
                raise ExpertError("gripper holds the wrong object")
            if state.solid_at(obj.x, obj.y, obj.level + 1):
                raise ExpertError("object is buried")
            return _acquire(state, obj)
        if v == "rotate":
            want = task.params.get("target_orient", 0)
            if obj.orient == want and g.z == 1:
                return _act(g.x, g.y, g.z, g.rot, OPEN)
            return _act(g.x, g.y, 1, g.rot + want - obj.orient, CLOSED)
        if v == "pick_place":
            dest, z, rot = tgt.cell, 1, g.rot
        elif v == "stack":
            if tgt.level + 1 >= 3:
                raise ExpertError("stack target is too tall")
            dest, z, rot = tgt.cell, tgt.level + 1, g.rot
        else:
            dest, z, rot = tgt.cell, 1, g.rot + tgt.orient - obj.orient
        if (g.x, g.y, g.z) == (dest[0], dest[1], z) and (v != "insert" or obj.orient == tgt.orient):
            return _act(g.x, g.y, g.z, g.rot, OPEN)
        return _act(dest[0], dest[1], z, rot, CLOSED)

    raise ExpertError(f"no script for verb {v}")
