"""Orthographic multi-view rasterisation of a ``WorldState``.

Each of the three views (top: x/y, front: x/z, side: y/z) is a
``V x V x N_PLANES`` grid.  Plane values are small integers scaled by
``1 / CODE_SCALE`` so that every rendered value is an exact multiple of
1/12 and observations can be stored losslessly as uint8 codes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tasks import COLORS, SHAPES
from .world import WorldState

CODE_SCALE = 12

P_OCC = 0
P_SHAPE = 1
P_COLOR = P_SHAPE + len(SHAPES)
P_GRIP = P_COLOR + len(COLORS)
P_GRIP_CLOSED = P_GRIP + 1
P_GRIP_ROT = P_GRIP + 2
P_DEPTH = P_GRIP + 3
P_ORIENT = P_GRIP + 4
P_STATE = P_GRIP + 5
N_PLANES = P_STATE + 1

VIEWS = ("top", "front", "side")


@dataclass(frozen=True)
class Observation:
    codes: np.ndarray  # (3, V, V, N_PLANES) uint8
    instruction_tokens: tuple

    @property
    def views(self) -> np.ndarray:
        return self.codes.astype(np.float64) / CODE_SCALE


def _offset(grid, v):
    off = (v - grid) // 2
    if off < 0:
        raise ValueError(f"view size {v} smaller than grid {grid}")
    return off


def render_codes(state: WorldState, view_size: int = 16) -> np.ndarray:
    g = state.grid
    off = _offset(g, view_size)
    out = np.zeros((3, view_size, view_size, N_PLANES), dtype=np.uint8)
    # painter order: far/low first so nearer/higher objects own the scalar planes
    top_order = sorted(state.objects, key=lambda o: (not o.flat, o.level))
    front_order = sorted(state.objects, key=lambda o: -o.y)
    side_order = sorted(state.objects, key=lambda o: -o.x)
    for view, order in ((0, top_order), (1, front_order), (2, side_order)):
        for o in order:
            if view == 0:
                r, c, depth = o.y + off, o.x + off, (o.level + 1) * 4 if not o.flat else 0
            elif view == 1:
                r, c, depth = o.level + off, o.x + off, round(CODE_SCALE * (o.y + 1) / g)
            else:
                r, c, depth = o.level + off, o.y + off, round(CODE_SCALE * (o.x + 1) / g)
            px = out[view, r, c]
            px[P_OCC] = CODE_SCALE
            px[P_SHAPE + SHAPES.index(o.shape)] = CODE_SCALE
            px[P_COLOR + COLORS.index(o.color)] = CODE_SCALE
            px[P_DEPTH] = depth
            px[P_ORIENT] = 3 * (o.orient + 1)
            px[P_STATE] = 6 * o.state
    gr = state.gripper
    for view, (r, c) in enumerate(((gr.y, gr.x), (gr.z, gr.x), (gr.z, gr.y))):
        px = out[view, r + off, c + off]
        px[P_GRIP] = CODE_SCALE
        px[P_GRIP_CLOSED] = CODE_SCALE if gr.closed else 0
        px[P_GRIP_ROT] = 3 * (gr.rot + 1)
    return out


def render_views(state: WorldState, view_size: int = 16) -> np.ndarray:
    """Float views ``(3, V, V, N_PLANES)``; a pure function of ``state``."""
    return render_codes(state, view_size).astype(np.float64) / CODE_SCALE


def observe(state: WorldState, tokens, view_size: int = 16) -> Observation:
    return Observation(render_codes(state, view_size), tuple(tokens))
