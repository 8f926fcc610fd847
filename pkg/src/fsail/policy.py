"""Prompted multi-view transformer policy.

Inputs are a task's learnable prompt rows, the embedded instruction and
patch tokens from three orthographic views.  They are concatenated
(prompts first), run through pre-norm transformer layers with full
self-attention, and split back into prompt states and feature states.
The prompt states are pooled/projected to one vector that is broadcast-
added to every feature row; the mean feature then feeds a linear head
with one logit block per action dimension.

All functions take a leading batch axis.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env.render import CODE_SCALE, N_PLANES
from .env.tasks import VOCAB

PROJECTION_MODES = ("identity", "linear", "mlp", "average_pooling")
SEGMENT_PROMPT, SEGMENT_TEXT, SEGMENT_VISION = 0, 1, 2


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    layers: int = 2
    heads: int = 2
    ff_dim: int = 64
    n_prompts: int = 5
    max_tokens: int = 8
    view_size: int = 16
    patch: int = 4
    grid: int = 12
    n_planes: int = N_PLANES
    vocab_size: int = len(VOCAB)
    projection: str = "average_pooling"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.view_size % self.patch:
            raise ValueError(f"view size {self.view_size} not divisible by patch {self.patch}")
        if self.projection not in PROJECTION_MODES:
            raise ValueError(f"unknown projection mode {self.projection!r}")

    @property
    def d_k(self):
        return self.width // self.heads

    @property
    def patches_per_view(self):
        return (self.view_size // self.patch) ** 2

    @property
    def k(self):
        return 3 * self.patches_per_view

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.n_planes

    @property
    def blocks(self):
        return (self.grid, self.grid, 3, 4, 2)

    @property
    def n_logits(self):
        return sum(self.blocks)

    def to_record(self):
        return asdict(self)


def _normal(rng, shape, std):
    return rng.normal(0.0, std, size=shape)


# ------------------------------------------------------------------ parameters

class ParamSet:
    """Ordered name -> Tensor mapping with freeze/flatten helpers."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return list(self.tensors.values())

    def set_trainable(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = flag
            if not flag:
                t.grad = None
        return self

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state_dict(self, state: dict):
        for k, t in self.tensors.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
        return self

    @classmethod
    def from_state_dict(cls, state: dict, trainable=False):
        return cls({k: Tensor(np.array(v, dtype=np.float64), requires_grad=trainable)
                    for k, v in state.items()})

    def copy(self, trainable=None):
        return ParamSet({k: Tensor(t.data.copy(), requires_grad=t.requires_grad if trainable is None else trainable)
                         for k, t in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])


def init_backbone(cfg: ModelConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng([seed, 1])
    c = cfg.width
    p = {
        "lang_embed": _normal(rng, (cfg.vocab_size, c), 0.02),
        "lang_pos": _normal(rng, (cfg.max_tokens, c), 0.02),
        "patch_w": _normal(rng, (cfg.patch_dim, c), 1.0 / math.sqrt(cfg.patch_dim)),
        "patch_b": np.zeros(c),
        "vis_pos": _normal(rng, (cfg.patches_per_view, c), 0.02),
        "view_embed": _normal(rng, (3, c), 0.02),
        "segment": _normal(rng, (3, c), 0.02),
    }
    for i in range(cfg.layers):
        std_out = 1.0 / math.sqrt(c) / math.sqrt(2 * cfg.layers)
        p[f"l{i}.ln1_g"] = np.ones(c)
        p[f"l{i}.ln1_b"] = np.zeros(c)
        p[f"l{i}.wq"] = _normal(rng, (c, c), 1.0 / math.sqrt(c))
        p[f"l{i}.wk"] = _normal(rng, (c, c), 1.0 / math.sqrt(c))
        p[f"l{i}.wv"] = _normal(rng, (c, c), 1.0 / math.sqrt(c))
        p[f"l{i}.wo"] = _normal(rng, (c, c), std_out)
        p[f"l{i}.bo"] = np.zeros(c)
        p[f"l{i}.ln2_g"] = np.ones(c)
        p[f"l{i}.ln2_b"] = np.zeros(c)
        p[f"l{i}.w1"] = _normal(rng, (c, cfg.ff_dim), 1.0 / math.sqrt(c))
        p[f"l{i}.b1"] = np.zeros(cfg.ff_dim)
        p[f"l{i}.w2"] = _normal(rng, (cfg.ff_dim, c), 1.0 / math.sqrt(cfg.ff_dim) / math.sqrt(2 * cfg.layers))
        p[f"l{i}.b2"] = np.zeros(c)
    p["lnf_g"] = np.ones(c)
    p["lnf_b"] = np.zeros(c)
    return ParamSet({k: Tensor(v, requires_grad=True) for k, v in p.items()})


def init_head(cfg: ModelConfig, seed: int) -> ParamSet:
    rng = np.random.default_rng([seed, 2])
    return ParamSet({
        "w": Tensor(_normal(rng, (cfg.width, cfg.n_logits), 0.02), requires_grad=True),
        "b": Tensor(np.zeros(cfg.n_logits), requires_grad=True),
    })


def head_to_vector(head: ParamSet) -> np.ndarray:
    return np.concatenate([head["w"].data.reshape(-1), head["b"].data])


def head_from_vector(vec: np.ndarray, cfg: ModelConfig, trainable=False) -> ParamSet:
    vec = np.asarray(vec, dtype=np.float64)
    nw = cfg.width * cfg.n_logits
    if vec.shape != (nw + cfg.n_logits,):
        raise ValueError(f"head vector has length {vec.shape}, expected {nw + cfg.n_logits}")
    return ParamSet({
        "w": Tensor(vec[:nw].reshape(cfg.width, cfg.n_logits).copy(), requires_grad=trainable),
        "b": Tensor(vec[nw:].copy(), requires_grad=trainable),
    })


def task_seed(task_id: str, seed: int) -> list:
    return [int(seed), zlib.crc32(task_id.encode())]


def init_prompt(cfg: ModelConfig, task_id: str, seed: int,
                n_prompts: Optional[int] = None, mode: Optional[str] = None) -> ParamSet:
    """Fresh prompt rows (N(0, 0.02)) plus projection parameters for ``mode``."""
    n = cfg.n_prompts if n_prompts is None else n_prompts
    mode = cfg.projection if mode is None else mode
    rng = np.random.default_rng(task_seed(task_id, seed))
    c = cfg.width
    p = {"prompts": _normal(rng, (n, c), 0.02)}
    if mode == "linear":
        p["proj_w"] = np.eye(c)
        p["proj_b"] = np.zeros(c)
    elif mode == "mlp":
        p["proj_w1"] = _normal(rng, (c, c), 1.0 / math.sqrt(c))
        p["proj_b1"] = np.zeros(c)
        p["proj_w2"] = _normal(rng, (c, c), 0.1 / math.sqrt(c))
        p["proj_b2"] = np.zeros(c)
    return ParamSet({k: Tensor(v, requires_grad=True) for k, v in p.items()})


def projection_mode_of(prompt: ParamSet) -> str:
    if "proj_w" in prompt.tensors:
        return "linear"
    if "proj_w1" in prompt.tensors:
        return "mlp"
    return "average_pooling"


# ------------------------------------------------------------------ encoders

def patchify(views: np.ndarray, patch: int) -> np.ndarray:
    """``(B, 3, V, V, P)`` views -> ``(B, 3 * (V/patch)^2, patch*patch*P)``."""
    if views.ndim != 5 or views.shape[1] != 3 or views.shape[2] != views.shape[3]:
        raise EncodingError(f"expected (B, 3, V, V, planes) views, got {views.shape}")
    b, _, v, _, p = views.shape
    if v % patch:
        raise EncodingError(f"view size {v} not divisible by patch {patch}")
    g = v // patch
    x = views.reshape(b, 3, g, patch, g, patch, p).transpose(0, 1, 2, 4, 3, 5, 6)
    return np.ascontiguousarray(x.reshape(b, 3 * g * g, patch * patch * p))


def codes_to_views(codes: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) / CODE_SCALE


def encode_language(backbone: ParamSet, tokens, cfg: ModelConfig) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.max_tokens:
        raise EncodingError(f"expected (B, {cfg.max_tokens}) token ids, got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise EncodingError("token id outside the vocabulary")
    t = ad.embedding(backbone["lang_embed"], tokens)
    t = t + backbone["lang_pos"]
    return t + backbone["segment"][SEGMENT_TEXT]


def encode_views(backbone: ParamSet, views: np.ndarray, cfg: ModelConfig) -> Tensor:
    if views.shape[1:] != (3, cfg.view_size, cfg.view_size, cfg.n_planes):
        raise EncodingError(f"views shape {views.shape[1:]} does not match model config")
    patches = Tensor(patchify(views, cfg.patch))
    o = ad.linear(patches, backbone["patch_w"], backbone["patch_b"])
    pos = ad.concat([backbone["vis_pos"]] * 3, axis=0)
    view_rows = ad.reshape(ad.broadcast_to(
        ad.reshape(backbone["view_embed"], (3, 1, cfg.width)),
        (3, cfg.patches_per_view, cfg.width)), (cfg.k, cfg.width))
    o = o + pos + view_rows
    return o + backbone["segment"][SEGMENT_VISION]


def concat_inputs(p: Optional[Tensor], t: Tensor, o: Tensor) -> Tensor:
    """``X = [P; T; O]`` along the token axis; prompts may be shared ``(n, C)``."""
    widths = {t.shape[-1], o.shape[-1]} | ({p.shape[-1]} if p is not None else set())
    if len(widths) != 1:
        raise ad.ShapeError(f"token widths differ: P {None if p is None else p.shape}, T {t.shape}, O {o.shape}")
    parts = [t, o]
    if p is not None and p.shape[-2] > 0:
        if p.ndim == 2:
            p = ad.broadcast_to(p, (t.shape[0],) + p.shape)
        parts.insert(0, p)
    return ad.concat(parts, axis=-2)


def _attention_block(x: Tensor, bb: ParamSet, i: int, cfg: ModelConfig) -> Tensor:
    b, n, c = x.shape
    h, dk = cfg.heads, cfg.d_k
    y = ad.layer_norm(x, bb[f"l{i}.ln1_g"], bb[f"l{i}.ln1_b"], cfg.ln_eps)

    def heads(w):
        z = ad.reshape(ad.matmul(y, w), (b, n, h, dk))
        return ad.reshape(ad.transpose(z, (0, 2, 1, 3)), (b * h, n, dk))

    att = ad.attention(heads(bb[f"l{i}.wq"]), heads(bb[f"l{i}.wk"]), heads(bb[f"l{i}.wv"]), dk)
    att = ad.reshape(ad.transpose(ad.reshape(att, (b, h, n, dk)), (0, 2, 1, 3)), (b, n, c))
    x = x + ad.linear(att, bb[f"l{i}.wo"], bb[f"l{i}.bo"])
    y = ad.layer_norm(x, bb[f"l{i}.ln2_g"], bb[f"l{i}.ln2_b"], cfg.ln_eps)
    y = ad.linear(ad.gelu(ad.linear(y, bb[f"l{i}.w1"], bb[f"l{i}.b1"])), bb[f"l{i}.w2"], bb[f"l{i}.b2"])
    return x + y


def mvte_forward(x: Tensor, backbone: ParamSet, n_prompts: int, cfg: ModelConfig):
    """Transformer over all tokens; returns ``(X_hat, P_hat)``.

    ``P_hat`` is the first ``n_prompts`` rows of the final layer output
    (None when there are no prompts).
    """
    for i in range(cfg.layers):
        x = _attention_block(x, backbone, i, cfg)
    x = ad.layer_norm(x, backbone["lnf_g"], backbone["lnf_b"], cfg.ln_eps)
    if n_prompts == 0:
        return x, None
    return x[:, n_prompts:], x[:, :n_prompts]


def project_prompts(p_hat: Tensor, mode: str, prompt: Optional[ParamSet] = None) -> Tensor:
    """``(B, n, C)`` prompt states -> ``(B, C)``; every mode starts with a mean over n."""
    if mode not in PROJECTION_MODES:
        raise ValueError(f"unknown projection mode {mode!r}")
    v = ad.mean(p_hat, axis=-2)
    if mode in ("identity", "average_pooling"):
        return v
    if mode == "linear":
        return ad.linear(v, prompt["proj_w"], prompt["proj_b"])
    hidden = ad.gelu(ad.linear(v, prompt["proj_w1"], prompt["proj_b1"]))
    return ad.linear(hidden, prompt["proj_w2"], prompt["proj_b2"])


def fuse_features(x_hat: Tensor, p_vec: Optional[Tensor]) -> Tensor:
    if p_vec is None:
        return x_hat
    if p_vec.shape[-1] != x_hat.shape[-1]:
        raise ad.ShapeError(f"prompt vector width {p_vec.shape} does not match features {x_hat.shape}")
    if p_vec.ndim == x_hat.ndim - 1:
        p_vec = ad.reshape(p_vec, p_vec.shape[:-1] + (1, p_vec.shape[-1]))
    return x_hat + p_vec


def predict_action(x_out: Tensor, head: ParamSet) -> Tensor:
    """Mean-pool tokens, apply the head: ``(B, tokens, C)`` -> ``(B, n_logits)``."""
    return ad.linear(ad.mean(x_out, axis=-2), head["w"], head["b"])


def split_blocks(logits: np.ndarray, cfg: ModelConfig):
    bounds = np.cumsum((0,) + cfg.blocks)
    return [logits[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def decode(logits, cfg: ModelConfig) -> np.ndarray:
    """Greedy per-block argmax -> ``(B, 5)`` int action tuples."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.stack([blk.argmax(axis=-1) for blk in split_blocks(data, cfg)], axis=-1)


def imitation_loss(logits: Tensor, actions, cfg: ModelConfig) -> Tensor:
    """Mean over the batch of the summed per-block cross-entropies."""
    actions = np.asarray(actions, dtype=np.int64).reshape(-1, 5)
    bounds = np.cumsum((0,) + cfg.blocks)
    total = None
    for j, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        ce = ad.cross_entropy(logits[:, lo:hi], actions[:, j])
        total = ce if total is None else total + ce
    return ad.mean(total)


@dataclass
class ForwardOut:
    logits: Tensor
    x_out: Tensor
    x_hat: Tensor
    p_hat: Optional[Tensor]
    p_vec: Optional[Tensor]


def forward(backbone: ParamSet, head: ParamSet, prompt: Optional[ParamSet],
            tokens, views: np.ndarray, cfg: ModelConfig) -> ForwardOut:
    t = encode_language(backbone, tokens, cfg)
    o = encode_views(backbone, views, cfg)
    p = None
    n = 0
    if prompt is not None:
        p = prompt["prompts"] + backbone["segment"][SEGMENT_PROMPT]
        n = p.shape[0]
    x = concat_inputs(p, t, o)
    x_hat, p_hat = mvte_forward(x, backbone, n, cfg)
    p_vec = None
    if p_hat is not None:
        p_vec = project_prompts(p_hat, projection_mode_of(prompt), prompt)
    x_out = fuse_features(x_hat, p_vec)
    return ForwardOut(predict_action(x_out, head), x_out, x_hat, p_hat, p_vec)
