"""Expert demonstrations and their on-disk format.

A demonstration set is a directory holding ``manifest.json`` (catalog,
vocabulary, grid/view parameters) and ``demos.jsonl`` with one record
per demonstration: task id, seed, instruction token ids and action
5-tuples.  Observations are never stored; ``replay`` regenerates them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .expert import expert_policy
from .render import Observation, observe
from .tasks import VOCAB, Catalog, TaskSpec, tokenize
from .world import KeyframeAction, WorldState, check_success, reset, step

DEMO_FORMAT = "fsail-demos"
DEMO_VERSION = 1
MAX_EXPERT_STEPS = 6


class DemoError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvParams:
    grid: int = 12
    view_size: int = 16
    n_distractors: int = 2
    max_tokens: int = 8

    def to_record(self):
        return {"grid": self.grid, "view_size": self.view_size,
                "n_distractors": self.n_distractors, "max_tokens": self.max_tokens}


@dataclass
class Demonstration:
    task_id: str
    instruction_tokens: tuple
    steps: list  # [(Observation, KeyframeAction)]
    seed: int
    final_observation: Optional[Observation] = field(default=None, repr=False)

    @property
    def actions(self):
        return [a for _, a in self.steps]

    def to_record(self) -> dict:
        return {"task_id": self.task_id, "seed": self.seed,
                "tokens": list(self.instruction_tokens),
                "actions": [list(a.as_tuple()) for a in self.actions]}


def initial_state(task: TaskSpec, seed: int, params: EnvParams) -> WorldState:
    return reset(task, seed, params.grid, params.n_distractors)


def expert_rollout(task: TaskSpec, seed: int, params: EnvParams = EnvParams()) -> Demonstration:
    tokens = tuple(tokenize(task.instruction(), params.max_tokens))
    state = initial_state(task, seed, params)
    steps = []
    while not check_success(state, task):
        if len(steps) >= MAX_EXPERT_STEPS:
            raise DemoError(f"expert exceeded {MAX_EXPERT_STEPS} keyframes on {task.task_id} seed {seed}")
        action = expert_policy(state, task)
        steps.append((observe(state, tokens, params.view_size), action))
        state = step(state, action)
    return Demonstration(task.task_id, tokens, steps, seed,
                         observe(state, tokens, params.view_size))


def generate_demos(task: TaskSpec, count: int, seed: int,
                   params: EnvParams = EnvParams()) -> list[Demonstration]:
    """``count`` expert demonstrations from seeds ``seed .. seed+count-1``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [expert_rollout(task, seed + i, params) for i in range(count)]


def replay(task: TaskSpec, seed: int, tokens, actions: Iterable[KeyframeAction],
           params: EnvParams = EnvParams()) -> Demonstration:
    """Rebuild a demonstration's observations from its seed and actions."""
    state = initial_state(task, seed, params)
    steps = []
    for a in actions:
        steps.append((observe(state, tokens, params.view_size), a))
        state = step(state, a)
    if not check_success(state, task):
        raise DemoError(f"replayed demo for {task.task_id} seed {seed} does not end in success")
    return Demonstration(task.task_id, tuple(tokens), steps, seed,
                         observe(state, tokens, params.view_size))


# ------------------------------------------------------------------ storage

def write_demo_set(directory, catalog: Catalog, params: EnvParams,
                   demos: Iterable[Demonstration], extra: Optional[dict] = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": DEMO_FORMAT, "version": DEMO_VERSION,
                "catalog": catalog.to_record(), "vocabulary": list(VOCAB),
                "env": params.to_record()}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    with open(directory / "demos.jsonl", "w") as fh:
        for d in demos:
            fh.write(json.dumps(d.to_record()) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DemoError(f"no demonstration manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DEMO_FORMAT or manifest.get("version") != DEMO_VERSION:
        raise DemoError(f"{path}: unsupported demo format/version")
    if manifest["vocabulary"] != list(VOCAB):
        raise DemoError(f"{path}: vocabulary differs from this build")
    return manifest


def read_demo_set(directory, verify: bool = True):
    """Returns ``(catalog, params, manifest, demos)`` with observations replayed."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    catalog = Catalog.from_record(manifest["catalog"])
    params = EnvParams(**manifest["env"])
    demos = []
    with open(directory / "demos.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            task = catalog.by_id(rec["task_id"])
            actions = [KeyframeAction.from_tuple(a) for a in rec["actions"]]
            d = replay(task, rec["seed"], tuple(rec["tokens"]), actions, params)
            if verify and list(d.instruction_tokens) != tokenize(task.instruction(), params.max_tokens):
                raise DemoError(f"{rec['task_id']} seed {rec['seed']}: instruction tokens mismatch")
            demos.append(d)
    return catalog, params, manifest, demos
