"""Synthetic multi-view tabletop with scripted keyframe experts."""

from .demos import (Demonstration, EnvParams, expert_rollout, generate_demos, read_demo_set,
                    replay, write_demo_set)
from .expert import ExpertError, expert_policy
from .render import N_PLANES, Observation, observe, render_views
from .tasks import (VOCAB, Catalog, TaskSpec, default_base_tasks, default_catalog,
                    default_incremental_tasks, tokenize, validate_catalog)
from .world import (GenerationError, KeyframeAction, Obj, WorldState, check_success, reset,
                    step)

__all__ = [
    "Catalog", "Demonstration", "EnvParams", "ExpertError", "GenerationError",
    "KeyframeAction", "N_PLANES", "Obj", "Observation", "TaskSpec", "VOCAB", "WorldState",
    "check_success", "default_base_tasks", "default_catalog", "default_incremental_tasks",
    "expert_policy", "expert_rollout", "generate_demos", "observe", "read_demo_set",
    "render_views", "replay", "reset", "step", "tokenize", "validate_catalog",
    "write_demo_set",
]
