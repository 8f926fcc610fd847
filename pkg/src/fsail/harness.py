"""Three-stage training protocol, incremental sessions, baselines and metrics.

Stage 1 trains the backbone and the base head ``W_base`` on every base
task at once (no prompts).  Stage 2 freezes the backbone and fits one
prompt set plus head per base task.  Each incremental session then fits a
prompt and head for every new task from ``q`` demonstrations; ``topic``
serves the similarity-fused head, ``tsp_only`` the newest raw head.  The
three baselines fine-tune the single shared head without prompts.

Artifacts that do not depend on the method (the stage-1 policy, stage-2
nodes and per-task stage-3 nodes) live in a content-addressed cache so
every method of a seed reuses them and session 0 is shared exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .ces import CESConfig, RelationGraph, TaskNode
from .checkpoint import load_params, save_params
from .env import (Catalog, Demonstration, EnvParams, KeyframeAction, TaskSpec, check_success,
                  expert_policy, generate_demos, render_views, reset, step, tokenize)
from .env.world import N_LEVELS, N_ROT
from .optim import Adam
from .policy import (ModelConfig, ParamSet, codes_to_views, decode, forward, head_from_vector, head_to_vector,
                     imitation_loss, init_backbone, init_head, init_prompt)

log = logging.getLogger(__name__)

METHODS = ("topic", "tsp_only", "naive", "replay", "regularization")
SUMMARY_FORMAT = "fsail-run"
SUMMARY_VERSION = 1

# per-seed offsets keep training, few-shot and evaluation episodes disjoint
_SEED_STRIDE = 1_000_000
_FEWSHOT_OFFSET = 500_000
_EVAL_OFFSET = 900_000


class HarnessError(RuntimeError):
    pass


class TrainingDivergence(HarnessError):
    def __init__(self, stage: str, step: int, loss: float, settings: dict):
        super().__init__(f"{stage}: non-finite loss {loss} at step {step} (settings: {settings})")
        self.stage, self.step, self.loss, self.settings = stage, step, loss, settings


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class SessionSchedule:
    base_tasks: tuple
    incremental_sessions: tuple  # tuple of tuples of TaskSpec
    q: int = 1
    base_demos: int = 100
    eval_episodes: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.q < 1 or self.base_demos < 1 or self.eval_episodes < 1:
            raise ValueError("q, base_demos and eval_episodes must be positive")
        seen = [t.task_id for t in self.base_tasks]
        for session in self.incremental_sessions:
            seen += [t.task_id for t in session]
        if len(seen) != len(set(seen)):
            raise ValueError("task sets overlap across sessions")

    @classmethod
    def from_catalog(cls, catalog: Catalog, tasks_per_session: int = 1, **kw) -> "SessionSchedule":
        inc = list(catalog.incremental)
        sessions = tuple(tuple(inc[i:i + tasks_per_session])
                         for i in range(0, len(inc), tasks_per_session))
        return cls(tuple(catalog.base), sessions, **kw)

    @property
    def n_sessions(self) -> int:
        return 1 + len(self.incremental_sessions)

    def session_tasks(self, t: int) -> tuple:
        return self.base_tasks if t == 0 else self.incremental_sessions[t - 1]

    def tasks_through(self, t: int) -> list:
        """Every task seen in sessions ``0..t``."""
        out = list(self.base_tasks)
        for s in self.incremental_sessions[:t]:
            out += list(s)
        return out

    @property
    def base_seed(self) -> int:
        return self.seed * _SEED_STRIDE

    @property
    def fewshot_seed(self) -> int:
        return self.seed * _SEED_STRIDE + _FEWSHOT_OFFSET

    @property
    def eval_seed(self) -> int:
        return self.seed * _SEED_STRIDE + _EVAL_OFFSET

    def to_record(self) -> dict:
        return {
            "base_tasks": [t.task_id for t in self.base_tasks],
            "incremental_sessions": [[t.task_id for t in s] for s in self.incremental_sessions],
            "q": self.q, "base_demos": self.base_demos,
            "eval_episodes": self.eval_episodes, "seed": self.seed,
        }


@dataclass(frozen=True)
class TrainConfig:
    method: str = "topic"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 32
    base_epochs: int = 30
    base_lr: float = 1e-3
    base_lr_schedule: str = "cosine"
    stage2_epochs: int = 5
    stage2_lr: float = 1e-3
    fewshot_epoch_scale: int = 30
    lam1: float = 0.2
    lam2: float = 0.8
    include_base_nodes: bool = True
    reg_mu: float = 1.0
    horizon: int = 8
    env: EnvParams = field(default_factory=EnvParams)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        for name in ("batch_size", "horizon", "fewshot_epoch_scale"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("base_epochs", "stage2_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.base_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.base_lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"base_lr_schedule must be one of {', '.join(LR_SCHEDULES)}")
        if self.reg_mu < 0:
            raise ValueError("reg_mu must be non-negative")
        CESConfig(self.lam1, self.lam2)

    @property
    def ces(self) -> CESConfig:
        return CESConfig(self.lam1, self.lam2, self.include_base_nodes)

    def fewshot_epochs(self, q: int) -> int:
        """Stage-3 epochs: the stage-2 recipe scaled so q demos get a comparable step count."""
        return self.stage2_epochs * math.ceil(self.fewshot_epoch_scale / q)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["model"] = self.model.to_record()
        rec["env"] = self.env.to_record()
        return rec


# ------------------------------------------------------------------ reports

@dataclass(frozen=True)
class SessionReport:
    session: int
    rates: dict  # task_id -> success rate
    method: str
    seed: int

    def __post_init__(self):
        if any(not 0.0 <= r <= 1.0 for r in self.rates.values()):
            raise ValueError("success rates must lie in [0, 1]")

    @property
    def average(self) -> float:
        """Mean over every task evaluated; NaN for a session with no tasks."""
        return float(np.mean(list(self.rates.values()))) if self.rates else math.nan

    def to_record(self) -> dict:
        return {"session": self.session, "method": self.method, "seed": self.seed,
                "rates": dict(self.rates), "average": self.average}

    @classmethod
    def from_record(cls, rec: dict) -> "SessionReport":
        return cls(int(rec["session"]), dict(rec["rates"]), rec["method"], int(rec["seed"]))


@dataclass
class RunSummary:
    method: str
    seed: int
    reports: list
    schedule: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def session_averages(self) -> list:
        return [r.average for r in self.reports]

    @property
    def average(self) -> float:
        """Mean of the per-session averages (the "Average Acc." column).

        Sessions without tasks (session 0 when there are no base tasks) are
        skipped.
        """
        return float(np.mean([a for a in self.session_averages if not math.isnan(a)]))

    def improvement_over(self, baseline: "RunSummary") -> float:
        return self.average - baseline.average

    def records(self) -> list:
        """One flat record per task x session."""
        return [{"method": self.method, "session": r.session, "task_id": tid,
                 "success_rate": rate, "seed": self.seed}
                for r in self.reports for tid, rate in r.rates.items()]

    def to_record(self) -> dict:
        return {"format": SUMMARY_FORMAT, "version": SUMMARY_VERSION,
                "method": self.method, "seed": self.seed, "schedule": self.schedule,
                "config": self.config, "reports": [r.to_record() for r in self.reports]}

    @classmethod
    def from_record(cls, rec: dict) -> "RunSummary":
        if rec.get("format") != SUMMARY_FORMAT or rec.get("version") != SUMMARY_VERSION:
            raise HarnessError("not a run summary record")
        return cls(rec["method"], int(rec["seed"]),
                   [SessionReport.from_record(r) for r in rec["reports"]],
                   rec.get("schedule", {}), rec.get("config", {}))


def render_table(summaries: Sequence[RunSummary], baseline: Optional[str] = None) -> str:
    """Sessions as columns, one row per method, plus average and improvement.

    Every cell is recomputed from the stored per-task rates.  When
    several seeds share a method, cells are seed means.
    """
    by_method: dict[str, list] = {}
    for s in summaries:
        by_method.setdefault(s.method, []).append(s)
    n_sessions = {len(s.reports) for s in summaries}
    if len(n_sessions) != 1:
        raise HarnessError("runs cover different numbers of sessions")
    n = n_sessions.pop()
    show_improv = len(by_method) > 1
    if baseline is None:
        baseline = "naive" if "naive" in by_method else next(iter(by_method))
    if show_improv and baseline not in by_method:
        raise HarnessError(f"baseline method {baseline!r} is not among the runs")

    def mean_avg(runs):
        return float(np.mean([r.average for r in runs]))

    def pct(x):
        return "-" if math.isnan(x) else f"{100 * x:.1f}"

    header = ["Method"] + [str(i) for i in range(n)] + ["Average Acc."]
    if show_improv:
        header.append("Final Improv.")
    rows = []
    for method, runs in by_method.items():
        cells = [pct(float(np.mean([r.reports[i].average for r in runs]))) for i in range(n)]
        row = [method] + cells + [pct(mean_avg(runs))]
        if show_improv:
            row.append("-" if method == baseline else
                       f"{100 * (mean_avg(runs) - mean_avg(by_method[baseline])):+.1f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    seeds = sorted({s.seed for s in summaries})
    lines = [f"Accuracy in each session (%), seeds {seeds}", fmt(header), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ datasets

@dataclass
class Dataset:
    tokens: np.ndarray   # (N, m) int
    codes: np.ndarray    # (N, 3, V, V, P) uint8
    actions: np.ndarray  # (N, 5) int
    task_ids: list       # per-sample task id
    demo_ids: list       # per-demo "task_id:seed"

    def __len__(self):
        return len(self.actions)

    @classmethod
    def from_demos(cls, demos: Sequence[Demonstration]) -> "Dataset":
        if not demos:
            raise HarnessError("no demonstrations to train on")
        steps = [(d.task_id, o, a) for d in demos for o, a in d.steps]
        return cls(np.array([o.instruction_tokens for _, o, _ in steps], dtype=np.int64),
                   np.stack([o.codes for _, o, _ in steps]),
                   np.array([a.as_tuple() for _, _, a in steps], dtype=np.int64),
                   [tid for tid, _, _ in steps],
                   [f"{d.task_id}:{d.seed}" for d in demos])

    def views(self, idx) -> np.ndarray:
        return codes_to_views(self.codes[idx])

    def subset(self, task_id: str) -> "Dataset":
        idx = [i for i, t in enumerate(self.task_ids) if t == task_id]
        return Dataset(self.tokens[idx], self.codes[idx], self.actions[idx],
                       [self.task_ids[i] for i in idx],
                       [d for d in self.demo_ids if d.split(":")[0] == task_id])


class DemoSource:
    """Supplies demonstrations for a schedule, generated or read from disk."""

    def __init__(self, schedule: SessionSchedule, env: EnvParams = EnvParams(),
                 preloaded: Optional[dict] = None):
        self.schedule = schedule
        self.env = env
        self._cache = dict(preloaded or {})

    def base(self, task: TaskSpec) -> list:
        key = ("base", task.task_id)
        if key not in self._cache:
            self._cache[key] = generate_demos(task, self.schedule.base_demos,
                                              self.schedule.base_seed, self.env)
        return self._cache[key]

    def fewshot(self, task: TaskSpec) -> list:
        key = ("fewshot", task.task_id)
        if key not in self._cache:
            self._cache[key] = generate_demos(task, self.schedule.q,
                                              self.schedule.fewshot_seed, self.env)
        demos = self._cache[key]
        if len(demos) < self.schedule.q:
            raise HarnessError(f"{task.task_id}: {len(demos)} few-shot demos stored, need {self.schedule.q}")
        return demos[:self.schedule.q]


# ------------------------------------------------------------------ training loop

LR_SCHEDULES = ("constant", "cosine")


def _fit(params: list, loss_fn: Callable[[np.ndarray], ad.Tensor], n: int, epochs: int,
         lr: float, batch_size: int, rng: np.random.Generator, stage: str,
         settings: dict, schedule: str = "constant") -> list:
    """Minibatch Adam over ``n`` samples; returns per-epoch mean losses.

    ``schedule="cosine"`` anneals the learning rate from ``lr`` to zero
    over the run.
    """
    params = [p for p in params if p.requires_grad]
    if not params or epochs == 0:
        return []
    opt = Adam(params, lr=lr)
    history = []
    step_no = 0
    total_steps = epochs * math.ceil(n / batch_size)
    for _ in range(epochs):
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            if schedule == "cosine":
                opt.lr = 0.5 * lr * (1.0 + math.cos(math.pi * step_no / total_steps))
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = loss_fn(idx)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(stage, step_no, value, settings)
            ad.backward(loss, tape)
            opt.step()
            tape.clear()
            total += value
            batches += 1
            step_no += 1
        history.append(total / batches)
    return history


def train_base(data: Optional[Dataset], config: TrainConfig) -> tuple:
    """Stage 1: joint multi-task training of the backbone and ``W_base``.

    With no base data the freshly initialised networks are returned frozen.
    """
    cfg = config.model
    backbone = init_backbone(cfg, config.seed)
    head = init_head(cfg, config.seed)
    if data is None:
        return backbone.set_trainable(False), head.set_trainable(False)
    rng = np.random.default_rng([config.seed, 101])

    def loss_fn(idx):
        out = forward(backbone, head, None, data.tokens[idx], data.views(idx), cfg)
        return imitation_loss(out.logits, data.actions[idx], cfg)

    history = _fit(backbone.values() + head.values(), loss_fn, len(data), config.base_epochs,
                   config.base_lr, config.batch_size, rng, "stage 1",
                   {"epochs": config.base_epochs, "lr": config.base_lr},
                   config.base_lr_schedule)
    log.info("stage 1 done: %d epochs, final loss %s", config.base_epochs,
             f"{history[-1]:.4f}" if history else "n/a")
    backbone.set_trainable(False)
    head.set_trainable(False)
    return backbone, head


def prompt_embedding(backbone: ParamSet, head: ParamSet, prompt: ParamSet, data: Dataset,
                     cfg: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Mean prompt output over a task's observations, flattened to ``n * C``."""
    total = None
    with ad.no_grad():
        for lo in range(0, len(data), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(data)))
            p_hat = forward(backbone, head, prompt, data.tokens[idx], data.views(idx), cfg).p_hat
            s = p_hat.data.sum(axis=0)
            total = s if total is None else total + s
    return (total / len(data)).reshape(-1)


def train_task_specific(task: TaskSpec, data: Dataset, backbone: ParamSet, w_base: np.ndarray,
                        config: TrainConfig, epochs: int, session_index: int) -> tuple:
    """Fit a fresh prompt set and a head (started from ``W_base``) on one task.

    Returns ``(TaskNode, prompt ParamSet)``; the backbone is left untouched.
    """
    cfg = config.model
    prompt = init_prompt(cfg, task.task_id, config.seed)
    head = head_from_vector(w_base, cfg, trainable=True)
    rng = np.random.default_rng([config.seed, 202, session_index, len(data)])

    def loss_fn(idx):
        out = forward(backbone, head, prompt, data.tokens[idx], data.views(idx), cfg)
        return imitation_loss(out.logits, data.actions[idx], cfg)

    _fit(prompt.values() + head.values(), loss_fn, len(data), epochs, config.stage2_lr,
         config.batch_size, rng, f"task {task.task_id}",
         {"epochs": epochs, "lr": config.stage2_lr})
    prompt.set_trainable(False)
    head.set_trainable(False)
    p_hat = prompt_embedding(backbone, head, prompt, data, cfg)
    node = TaskNode(task.task_id, p_hat, head_to_vector(head), session_index)
    return node, prompt


# ------------------------------------------------------------------ evaluation

Policy = Callable[[TaskSpec, list], list]  # (task, states) -> actions


def evaluate(policy: Policy, tasks: Sequence[TaskSpec], episodes: int, seed_base: int,
             horizon: int = 8, env: EnvParams = EnvParams()) -> dict:
    """Closed-loop success rate per task; all episodes of a task step in lockstep."""
    rates = {}
    for task in tasks:
        states = [reset(task, seed_base + e, env.grid, env.n_distractors) for e in range(episodes)]
        done = [check_success(s, task) for s in states]
        for _ in range(horizon):
            live = [i for i, d in enumerate(done) if not d]
            if not live:
                break
            actions = policy(task, [states[i] for i in live])
            for i, a in zip(live, actions):
                states[i] = step(states[i], a)
                done[i] = check_success(states[i], task)
        rates[task.task_id] = float(np.mean(done))
    return rates


def expert_pass_through(task: TaskSpec, states: list) -> list:
    return [expert_policy(s, task) for s in states]


def random_policy(seed: int, grid: int = 12) -> Policy:
    rng = np.random.default_rng(seed)

    def act(task, states):
        return [KeyframeAction(int(rng.integers(grid)), int(rng.integers(grid)),
                               int(rng.integers(N_LEVELS)), int(rng.integers(N_ROT)),
                               int(rng.integers(2))) for _ in states]
    return act


def network_policy(backbone: ParamSet, head: ParamSet, prompts: Optional[dict],
                   cfg: ModelConfig, env: EnvParams = EnvParams()) -> Policy:
    """Greedy decoding of one shared head; prompts are looked up by task id."""
    def act(task, states):
        tokens = np.array([tokenize(task.instruction(), cfg.max_tokens)] * len(states))
        views = np.stack([render_views(s, env.view_size) for s in states])
        prompt = None if prompts is None else prompts[task.task_id]
        with ad.no_grad():
            logits = forward(backbone, head, prompt, tokens, views, cfg).logits
        return [KeyframeAction.from_tuple(a) for a in decode(logits, cfg)]
    return act


# ------------------------------------------------------------------ head-only fine-tuning

class PooledFeatures:
    """Frozen-backbone features for prompt-free head training.

    Without prompts the head sees only the token-mean of the encoder
    output, so features are computed once and head steps become cheap.
    """

    def __init__(self, backbone: ParamSet, cfg: ModelConfig):
        self.backbone = backbone
        self.cfg = cfg
        self._zero_head = head_from_vector(np.zeros(cfg.width * cfg.n_logits + cfg.n_logits), cfg)

    def __call__(self, data: Dataset, batch_size: int = 64) -> np.ndarray:
        out = []
        with ad.no_grad():
            for lo in range(0, len(data), batch_size):
                idx = np.arange(lo, min(lo + batch_size, len(data)))
                x_out = forward(self.backbone, self._zero_head, None, data.tokens[idx],
                                data.views(idx), self.cfg).x_out
                out.append(x_out.data.mean(axis=1))
        return np.concatenate(out)


def _head_loss(head: ParamSet, feats: np.ndarray, actions: np.ndarray, cfg: ModelConfig) -> ad.Tensor:
    logits = ad.linear(ad.Tensor(feats), head["w"], head["b"])
    return imitation_loss(logits, actions, cfg)


def gradient_importance(head_vec: np.ndarray, feats: np.ndarray, actions: np.ndarray,
                        cfg: ModelConfig, batch_size: int = 32) -> np.ndarray:
    """Per-parameter importance: mean absolute minibatch gradient of the imitation loss.

    The result is rescaled to unit mean so the penalty strength ``mu`` does
    not depend on the overall gradient magnitude of a particular backbone.
    """
    head = head_from_vector(head_vec, cfg, trainable=True)
    total = np.zeros_like(head_vec)
    batches = 0
    for lo in range(0, len(actions), batch_size):
        sl = slice(lo, lo + batch_size)
        head["w"].grad = head["b"].grad = None
        with ad.Tape() as tape:
            loss = _head_loss(head, feats[sl], actions[sl], cfg)
        ad.backward(loss, tape)
        total += np.abs(np.concatenate([head["w"].grad.reshape(-1), head["b"].grad]))
        batches += 1
    omega = total / batches
    scale = omega.mean()
    return omega / scale if scale > 0 else omega


def finetune_head(head_vec: np.ndarray, feats: np.ndarray, actions: np.ndarray,
                  config: TrainConfig, epochs: int, rng: np.random.Generator,
                  anchor: Optional[np.ndarray] = None, omega: Optional[np.ndarray] = None,
                  mu: float = 0.0) -> np.ndarray:
    """Adam on the shared head; optional ``mu * sum(omega * (theta - anchor)^2)`` penalty."""
    cfg = config.model
    head = head_from_vector(head_vec, cfg, trainable=True)
    nw = cfg.width * cfg.n_logits
    penalise = mu > 0 and omega is not None
    if penalise:
        om_w = ad.Tensor(omega[:nw].reshape(cfg.width, cfg.n_logits) * mu)
        om_b = ad.Tensor(omega[nw:] * mu)
        an_w = ad.Tensor(anchor[:nw].reshape(cfg.width, cfg.n_logits))
        an_b = ad.Tensor(anchor[nw:])

    def loss_fn(idx):
        loss = _head_loss(head, feats[idx], actions[idx], cfg)
        if penalise:
            dw = head["w"] - an_w
            db = head["b"] - an_b
            loss = loss + (om_w * dw * dw).sum() + (om_b * db * db).sum()
        return loss

    _fit(head.values(), loss_fn, len(actions), epochs, config.stage2_lr, config.batch_size,
         rng, "head fine-tuning", {"epochs": epochs, "lr": config.stage2_lr, "mu": mu})
    return head_to_vector(head)


# ------------------------------------------------------------------ artifact cache

def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


class ArtifactCache:
    """Content-addressed store for method-independent training products."""

    def __init__(self, root):
        self.root = Path(root)

    def stage1_key(self, schedule: SessionSchedule, config: TrainConfig) -> str:
        return _digest({
            "tasks": [t.to_record() for t in schedule.base_tasks],
            "demos": schedule.base_demos, "seed": config.seed,
            "model": config.model.to_record(), "env": config.env.to_record(),
            "epochs": config.base_epochs, "lr": config.base_lr, "batch": config.batch_size,
            "lr_schedule": config.base_lr_schedule,
        })

    def node_key(self, stage1: str, task: TaskSpec, config: TrainConfig, epochs: int, n_demos: int) -> str:
        return _digest({"stage1": stage1, "task": task.to_record(), "epochs": epochs,
                        "lr": config.stage2_lr, "demos": n_demos, "seed": config.seed})

    def _dir(self, kind: str, key: str) -> Path:
        return self.root / kind / key

    def load_stage1(self, key: str):
        d = self._dir("stage1", key)
        if not (d / "head.json").exists():
            return None
        backbone = ParamSet.from_state_dict(load_params(d / "backbone.json"))
        head = ParamSet.from_state_dict(load_params(d / "head.json"))
        report = json.loads((d / "session0.json").read_text()) if (d / "session0.json").exists() else None
        return backbone, head, report

    def stage1_meta(self, key: str) -> dict:
        path = self._dir("stage1", key) / "meta.json"
        return json.loads(path.read_text()) if path.exists() else {}

    def save_stage1(self, key: str, backbone: ParamSet, head: ParamSet, meta: dict):
        d = self._dir("stage1", key)
        d.mkdir(parents=True, exist_ok=True)
        (d / "meta.json").write_text(json.dumps(meta))
        save_params(d / "backbone.json", backbone.state_dict())
        save_params(d / "head.json", head.state_dict())

    def save_session0(self, key: str, rates: dict):
        path = self._dir("stage1", key) / "session0.json"
        tmp = path.with_name(f"session0.json.{os.getpid()}.tmp")
        tmp.write_text(json.dumps(rates))
        tmp.replace(path)

    def load_node(self, key: str):
        path = self._dir("nodes", key) / "node.json"
        if not path.exists():
            return None
        rec = json.loads(path.read_text())
        prompt = ParamSet.from_state_dict({k: np.asarray(v, dtype=np.float64)
                                           for k, v in rec["prompt"].items()})
        return TaskNode.from_record(rec["node"]), prompt

    def save_node(self, key: str, node: TaskNode, prompt: ParamSet):
        d = self._dir("nodes", key)
        d.mkdir(parents=True, exist_ok=True)
        rec = {"node": node.to_record(),
               "prompt": {k: v.tolist() for k, v in prompt.state_dict().items()}}
        tmp = d / f"node.json.{os.getpid()}.tmp"
        tmp.write_text(json.dumps(rec))
        tmp.replace(d / "node.json")


# ------------------------------------------------------------------ protocol

class Protocol:
    """One run of the incremental protocol for a method and seed."""

    def __init__(self, schedule: SessionSchedule, config: TrainConfig, out_dir=None,
                 cache_dir=None, demos: Optional[DemoSource] = None):
        if schedule.seed != config.seed:
            schedule = replace(schedule, seed=config.seed)
        self.schedule = schedule
        self.config = config
        self.out = Path(out_dir) if out_dir is not None else None
        root = cache_dir if cache_dir is not None else (self.out / "cache" if self.out else None)
        self.cache = ArtifactCache(root) if root is not None else None
        self.demos = demos or DemoSource(schedule, config.env)
        self.cfg = config.model
        self._base_data = None

    # -- shared stages ------------------------------------------------------

    def base_data(self) -> Optional[Dataset]:
        if not self.schedule.base_tasks:
            return None
        if self._base_data is None:
            demos = [d for t in self.schedule.base_tasks for d in self.demos.base(t)]
            self._base_data = Dataset.from_demos(demos)
        return self._base_data

    def stage1(self):
        key = self.cache.stage1_key(self.schedule, self.config) if self.cache else None
        cached = self.cache.load_stage1(key) if self.cache else None
        if cached is not None:
            backbone, head, rates = cached
            self.stage1_meta = self.cache.stage1_meta(key)
        else:
            data = self.base_data()
            cpu0, wall0 = time.process_time(), time.perf_counter()
            backbone, head = train_base(data, self.config)
            self.stage1_meta = {"cpu_seconds": time.process_time() - cpu0,
                                "wall_seconds": time.perf_counter() - wall0,
                                "samples": 0 if data is None else len(data)}
            rates = None
            if self.cache:
                self.cache.save_stage1(key, backbone, head, self.stage1_meta)
        if rates is None:
            policy = network_policy(backbone, head, None, self.cfg, self.config.env)
            rates = evaluate(policy, self.schedule.base_tasks, self.schedule.eval_episodes,
                             self.schedule.eval_seed, self.config.horizon, self.config.env)
            if self.cache:
                self.cache.save_session0(key, rates)
        self._stage1_key = key or "nocache"
        return backbone, head, SessionReport(0, rates, self.config.method, self.config.seed)

    def task_node(self, task: TaskSpec, backbone, w_base, session: int):
        if session == 0:
            demos = self.demos.base(task)
            epochs = self.config.stage2_epochs
        else:
            demos = self.demos.fewshot(task)
            epochs = self.config.fewshot_epochs(self.schedule.q)
        key = None
        if self.cache:
            key = self.cache.node_key(self._stage1_key, task, self.config, epochs, len(demos))
            hit = self.cache.load_node(key)
            if hit is not None:
                node, prompt = hit
                return TaskNode(node.task_id, node.prompt_embedding, node.head_weights, session), prompt
        data = Dataset.from_demos(demos)
        node, prompt = train_task_specific(task, data, backbone, w_base, self.config, epochs, session)
        if self.cache:
            self.cache.save_node(key, node, prompt)
        return node, prompt

    # -- persistence ----------------------------------------------------------

    def _session_path(self, t: int) -> Optional[Path]:
        return self.out / "sessions" / f"session_{t}.json" if self.out else None

    def _load_session(self, t: int):
        p = self._session_path(t)
        if p is None or not p.exists():
            return None
        return json.loads(p.read_text())

    def _save_session(self, t: int, report: SessionReport, state: dict):
        p = self._session_path(t)
        if p is None:
            return
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps({"report": report.to_record(), "state": state}))
        tmp.replace(p)

    def _finish(self, reports: list, graph: Optional[RelationGraph] = None) -> RunSummary:
        summary = RunSummary(self.config.method, self.config.seed, reports,
                             self.schedule.to_record(), self.config.to_record())
        if self.out:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "summary.json").write_text(json.dumps(summary.to_record(), indent=1))
            with open(self.out / "records.jsonl", "w") as fh:
                for rec in summary.records():
                    fh.write(json.dumps(rec) + "\n")
            (self.out / "table.txt").write_text(render_table([summary]))
            if graph is not None and len(graph) >= 2:
                graph.save(self.out / "graph.json")
                (self.out / "similarity.json").write_text(json.dumps(graph.similarity_report()))
        return summary

    def _evaluate(self, t: int, policy: Policy) -> SessionReport:
        rates = evaluate(policy, self.schedule.tasks_through(t), self.schedule.eval_episodes,
                         self.schedule.eval_seed, self.config.horizon, self.config.env)
        return SessionReport(t, rates, self.config.method, self.config.seed)

    # -- methods ------------------------------------------------------------

    def run(self) -> RunSummary:
        backbone, head, report0 = self.stage1()
        if self.config.method in ("topic", "tsp_only"):
            return self._run_prompted(backbone, head, report0)
        return self._run_baseline(backbone, head, report0)

    def _run_prompted(self, backbone, base_head, report0) -> RunSummary:
        w_base = head_to_vector(base_head)
        graph = RelationGraph(w_base, self.config.ces)
        prompts = {}
        for task in self.schedule.base_tasks:
            node, prompt = self.task_node(task, backbone, w_base, 0)
            graph.add_node(node)
            prompts[task.task_id] = prompt
        reports = [report0]
        for t in range(1, self.schedule.n_sessions):
            for task in self.schedule.session_tasks(t):
                node, prompt = self.task_node(task, backbone, w_base, t)
                graph.add_node(node)
                prompts[task.task_id] = prompt
            stored = self._load_session(t)
            if stored is not None:
                reports.append(SessionReport.from_record(stored["report"]))
                continue
            serving = run_incremental_session(graph, self.config.method)
            policy = network_policy(backbone, head_from_vector(serving, self.cfg), prompts,
                                    self.cfg, self.config.env)
            report = self._evaluate(t, policy)
            self._save_session(t, report, {"serving_head": serving.tolist()})
            reports.append(report)
        return self._finish(reports, graph)

    def _run_baseline(self, backbone, base_head, report0) -> RunSummary:
        method = self.config.method
        feats_of = PooledFeatures(backbone, self.cfg)
        head_vec = head_to_vector(base_head)
        base_data = self.base_data() if method == "regularization" else None
        seen_feats = [feats_of(base_data)] if base_data is not None else []
        seen_actions = [base_data.actions] if base_data is not None else []
        retained: list = []  # replay memory of incremental demonstrations
        reports = [report0]
        for t in range(1, self.schedule.n_sessions):
            new = [d for task in self.schedule.session_tasks(t) for d in self.demos.fewshot(task)]
            train = new + (retained if method == "replay" else [])
            data = Dataset.from_demos(train)
            feats = feats_of(data)
            stored = self._load_session(t)
            if stored is not None:
                head_vec = np.asarray(stored["state"]["head"], dtype=np.float64)
                reports.append(SessionReport.from_record(stored["report"]))
            else:
                rng = np.random.default_rng([self.config.seed, 303, t])
                epochs = self.config.fewshot_epochs(self.schedule.q)
                kwargs = {}
                if method == "regularization" and seen_feats:
                    omega = gradient_importance(head_vec, np.concatenate(seen_feats),
                                                np.concatenate(seen_actions), self.cfg)
                    kwargs = dict(anchor=head_vec.copy(), omega=omega, mu=self.config.reg_mu)
                head_vec = finetune_head(head_vec, feats, data.actions, self.config, epochs, rng, **kwargs)
                policy = network_policy(backbone, head_from_vector(head_vec, self.cfg), None,
                                        self.cfg, self.config.env)
                report = self._evaluate(t, policy)
                state = {"head": head_vec.tolist()}
                if method == "replay":
                    state["retained"] = Dataset.from_demos(retained + new).demo_ids
                self._save_session(t, report, state)
                reports.append(report)
            retained += new
            if method == "regularization":
                new_data = Dataset.from_demos(new)
                seen_feats.append(feats_of(new_data))
                seen_actions.append(new_data.actions)
        return self._finish(reports)


def run_incremental_session(graph: RelationGraph, method: str = "topic") -> np.ndarray:
    """Serving head after the newest node joined the graph."""
    j = len(graph) - 1
    if method == "tsp_only":
        return np.array(graph.nodes[j].head_weights)
    return graph.fuse(j)


def run_protocol(schedule: SessionSchedule, config: TrainConfig, out_dir=None,
                 cache_dir=None, demos: Optional[DemoSource] = None) -> RunSummary:
    return Protocol(schedule, config, out_dir, cache_dir, demos).run()


def load_summary(path) -> RunSummary:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    if not path.exists():
        raise HarnessError(f"no run summary at {path}")
    return RunSummary.from_record(json.loads(path.read_text()))
