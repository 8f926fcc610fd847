"""Task catalog, instruction vocabulary and tokenisation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

VERBS = ("reach", "pick_place", "push", "stack", "press", "rotate",
         "slide_open", "slide_close", "insert", "sweep")
SHAPES = ("cube", "cylinder", "button", "drawer", "peg", "zone", "hole")
COLORS = ("red", "green", "blue", "yellow", "purple")

FLAT_SHAPES = frozenset({"zone", "hole"})
LIFTABLE = frozenset({"cube", "cylinder", "peg"})

# verb -> (allowed object shapes, required target shapes or None)
VERB_RULES = {
    "reach": (LIFTABLE | {"button", "drawer"}, None),
    "pick_place": (LIFTABLE, {"zone"}),
    "push": (LIFTABLE, {"zone"}),
    "sweep": (LIFTABLE, {"zone"}),
    "stack": (LIFTABLE, {"cube", "cylinder"}),
    "press": ({"button"}, None),
    "rotate": (LIFTABLE, None),
    "slide_open": ({"drawer"}, None),
    "slide_close": ({"drawer"}, None),
    "insert": ({"peg"}, {"hole"}),
}

PAD = "<pad>"
VOCAB = (
    PAD, "reach", "pick", "place", "push", "to", "stack", "on", "press",
    "rotate", "open", "close", "insert", "into", "sweep", "the", "upright",
    "and", "slide", "move", "grasp", "release", "target", "then",
    *SHAPES, *COLORS,
)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


class TaskError(ValueError):
    pass


class TokenizeError(ValueError):
    pass


Descriptor = tuple  # (shape, color)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    verb: str
    obj: Descriptor
    target: Optional[Descriptor] = None
    session_tag: str = "base"
    params: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.verb not in VERB_RULES:
            raise TaskError(f"{self.task_id}: unknown verb {self.verb!r}")
        shapes, targets = VERB_RULES[self.verb]
        if self.obj[0] not in shapes or self.obj[1] not in COLORS:
            raise TaskError(f"{self.task_id}: object {self.obj} not valid for {self.verb}")
        if targets is None:
            if self.target is not None:
                raise TaskError(f"{self.task_id}: {self.verb} takes no target")
        elif self.target is None or self.target[0] not in targets or self.target[1] not in COLORS:
            raise TaskError(f"{self.task_id}: target {self.target} not valid for {self.verb}")
        if self.target is not None and tuple(self.target) == tuple(self.obj):
            raise TaskError(f"{self.task_id}: object and target must differ")
        if self.session_tag not in ("base", "incremental"):
            raise TaskError(f"{self.task_id}: session_tag must be base or incremental")

    @property
    def key(self):
        return (self.verb, tuple(self.obj), tuple(self.target) if self.target else None)

    def descriptors(self):
        return [tuple(self.obj)] + ([tuple(self.target)] if self.target else [])

    def instruction(self) -> str:
        s, c = self.obj
        if self.verb == "reach":
            return f"reach the {c} {s}"
        if self.verb == "pick_place":
            return f"pick {c} {s} place on {self.target[1]} zone"
        if self.verb in ("push", "sweep"):
            return f"{self.verb} {c} {s} to {self.target[1]} zone"
        if self.verb == "stack":
            return f"stack {c} {s} on {self.target[1]} {self.target[0]}"
        if self.verb == "press":
            return f"press the {c} button"
        if self.verb == "rotate":
            return f"rotate {c} {s} upright"
        if self.verb == "slide_open":
            return f"open the {c} drawer"
        if self.verb == "slide_close":
            return f"close the {c} drawer"
        return f"insert {c} peg into {self.target[1]} hole"

    def to_record(self) -> dict:
        rec = {"task_id": self.task_id, "verb": self.verb, "object": list(self.obj),
               "target": list(self.target) if self.target else None,
               "session": self.session_tag}
        if self.params:
            rec["params"] = dict(self.params)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TaskSpec":
        target = rec.get("target")
        return cls(rec["task_id"], rec["verb"], tuple(rec["object"]),
                   tuple(target) if target else None, rec.get("session", "base"),
                   dict(rec.get("params", {})))


def tokenize(text: str, m: int = 8) -> list[int]:
    """Whitespace split, fixed-vocabulary lookup, right-padded to ``m``."""
    words = text.split()
    if len(words) > m:
        raise TokenizeError(f"instruction has {len(words)} words, limit is {m}")
    try:
        ids = [WORD_TO_ID[w] for w in words]
    except KeyError as e:
        raise TokenizeError(f"word {e.args[0]!r} not in vocabulary") from None
    return ids + [WORD_TO_ID[PAD]] * (m - len(ids))


def _t(verb, obj, target=None, session="base", task_id=None):
    if task_id is None:
        parts = [verb, obj[1], obj[0]]
        if target:
            parts += [target[1], target[0]]
        task_id = "_".join(parts)
    return TaskSpec(task_id, verb, obj, target, session)


def default_base_tasks() -> list[TaskSpec]:
    return [
        _t("reach", ("cube", "red")),
        _t("pick_place", ("cube", "red"), ("zone", "green")),
        _t("push", ("cylinder", "blue"), ("zone", "yellow")),
        _t("stack", ("cube", "green"), ("cube", "blue")),
        _t("press", ("button", "red")),
        _t("rotate", ("cube", "yellow")),
        _t("slide_open", ("drawer", "blue")),
        _t("pick_place", ("cylinder", "blue"), ("zone", "red")),
        _t("press", ("button", "green")),
        _t("reach", ("cube", "yellow")),
    ]


def default_incremental_tasks() -> list[TaskSpec]:
    return [
        _t("insert", ("peg", "red"), ("hole", "blue"), "incremental"),
        _t("sweep", ("cube", "purple"), ("zone", "green"), "incremental"),
        _t("slide_close", ("drawer", "blue"), None, "incremental"),
        _t("reach", ("cylinder", "purple"), None, "incremental"),
        _t("rotate", ("peg", "green"), None, "incremental"),
    ]


def validate_catalog(base: Sequence[TaskSpec], incremental: Sequence[TaskSpec]) -> None:
    """Enforce unique ids/keys and the base/incremental novelty rules."""
    all_tasks = list(base) + list(incremental)
    ids = [t.task_id for t in all_tasks]
    if len(set(ids)) != len(ids):
        raise TaskError("duplicate task_id in catalog")
    keys = [t.key for t in all_tasks]
    if len(set(keys)) != len(keys):
        raise TaskError("duplicate (verb, object, target) in catalog")
    base_verbs = {t.verb for t in base}
    base_objs = {tuple(t.obj) for t in base}
    base_pairs = {(t.verb, tuple(t.obj)) for t in base}
    for t in incremental:
        if (t.verb, tuple(t.obj)) in base_pairs:
            raise TaskError(f"{t.task_id}: (verb, object) pair already used by a base task")
        if t.verb in base_verbs and tuple(t.obj) in base_objs:
            raise TaskError(f"{t.task_id}: needs a verb or object absent from the base tasks")


@dataclass
class Catalog:
    base: list
    incremental: list

    def all(self):
        return list(self.base) + list(self.incremental)

    def by_id(self, task_id: str) -> TaskSpec:
        for t in self.all():
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def to_record(self) -> dict:
        return {"format": "fsail-catalog", "version": 1,
                "base": [t.to_record() for t in self.base],
                "incremental": [t.to_record() for t in self.incremental]}

    @classmethod
    def from_record(cls, rec: dict) -> "Catalog":
        if rec.get("format") != "fsail-catalog":
            raise TaskError("not a task catalog file")
        cat = cls([TaskSpec.from_record(r) for r in rec["base"]],
                  [TaskSpec.from_record(r) for r in rec["incremental"]])
        validate_catalog(cat.base, cat.incremental)
        return cat

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "Catalog":
        return cls.from_record(json.loads(Path(path).read_text()))


def default_catalog() -> Catalog:
    cat = Catalog(default_base_tasks(), default_incremental_tasks())
    validate_catalog(cat.base, cat.incremental)
    return cat
