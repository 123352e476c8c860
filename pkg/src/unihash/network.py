"""Backbone MLP and the split-merge mixture of hash experts.

Parameters live in a flat ``dict`` of named float64 arrays so the trainer,
optimizer and gradient checker can address every array by name. Layers use
the ``x @ W + b`` convention with ``W`` shaped ``(fan_in, fan_out)``; expert
banks are stacked along a leading expert axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from unihash.errors import ConfigError, ShapeError

GATE_MODES = ("sigmoid_norm", "softmax")
BRANCHES = ("c", "p")
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    feature_dim: int = 64
    code_len: int = 16
    num_experts: int = 8
    top_k: int = 2
    backbone_layers: int = 1
    gate_mode: str = "sigmoid_norm"
    shared_experts: bool = True
    tanh_output: bool = True

    def __post_init__(self):
        if min(self.input_dim, self.feature_dim, self.code_len, self.num_experts) < 1:
            raise ConfigError("dimensions and expert count must be positive")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"need 1 <= top_k <= num_experts (got k={self.top_k}, m={self.num_experts})")
        if self.backbone_layers < 0:
            raise ConfigError("backbone_layers must be >= 0")
        if self.backbone_layers == 0 and self.input_dim != self.feature_dim:
            raise ConfigError("identity backbone requires input_dim == feature_dim")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}")


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def expert_bank(self, branch: str) -> str:
        return "experts" if self.config.shared_experts else f"experts_{branch}"


class RoutingRecord(NamedTuple):
    """Per branch: ``(N, k)`` selected expert indices and their normalized weights."""

    indices: dict
    weights: dict


class CodePair(NamedTuple):
    u_c: np.ndarray
    u_p: np.ndarray
    routing: RoutingRecord


def as_real(x):
    """Float array of at least double precision (extended precision passes through)."""
    x = np.asarray(x)
    return x if x.dtype in (np.float64, np.longdouble) else x.astype(np.float64)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    D, d, q, m = config.input_dim, config.feature_dim, config.code_len, config.num_experts
    arrays = {}
    fan = D
    for layer in range(config.backbone_layers):
        arrays[f"backbone.{layer}.weight"] = _uniform(rng, fan, (fan, d))
        arrays[f"backbone.{layer}.bias"] = _uniform(rng, fan, (d,))
        fan = d
    banks = ["experts"] if config.shared_experts else ["experts_c", "experts_p"]
    for bank in banks:
        arrays[f"{bank}.w1"] = _uniform(rng, d, (m, d, q))
        arrays[f"{bank}.b1"] = _uniform(rng, d, (m, q))
        arrays[f"{bank}.w2"] = _uniform(rng, q, (m, q, q))
        arrays[f"{bank}.b2"] = _uniform(rng, q, (m, q))
    for s in BRANCHES:
        arrays[f"gate_{s}.w1"] = _uniform(rng, d, (d, d))
        arrays[f"gate_{s}.b1"] = _uniform(rng, d, (d,))
        arrays[f"gate_{s}.w2"] = _uniform(rng, d, (d, m))
        arrays[f"gate_{s}.b2"] = _uniform(rng, d, (m,))
    return ModelParams(config, arrays)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _backbone(params: ModelParams, X):
    acts = [X]
    h = X
    for layer in range(params.config.backbone_layers):
        h = np.maximum(h @ params[f"backbone.{layer}.weight"] + params[f"backbone.{layer}.bias"], 0.0)
        acts.append(h)
    return h, acts


def backbone_forward(params: ModelParams, x) -> np.ndarray:
    """Map one input vector (or a row batch) to backbone features."""
    x = as_real(x)
    if x.shape[-1] != params.config.input_dim:
        raise ShapeError(f"input has dimension {x.shape[-1]}, model expects {params.config.input_dim}")
    v, _ = _backbone(params, x)
    return v


def gate_scores(params: ModelParams, branch: str, v):
    """Return ``(raw, activated)`` gate scores for features ``v``."""
    v = as_real(v)
    if v.shape[-1] != params.config.feature_dim:
        raise ShapeError(f"feature dimension {v.shape[-1]} != {params.config.feature_dim}")
    g = f"gate_{branch}"
    h = np.maximum(v @ params[f"{g}.w1"] + params[f"{g}.b1"], 0.0)
    raw = h @ params[f"{g}.w2"] + params[f"{g}.b2"]
    act = sigmoid(raw) if params.config.gate_mode == "sigmoid_norm" else softmax(raw)
    return raw, act


def select_topk(scores, k: int):
    """Indices of the ``k`` largest scores (ties to the smaller index) and their sum-normalized weights.

    Works on a single score vector or row-wise on a matrix. Rows whose
    selected scores sum below 1e-12 fall back to uniform ``1/k`` weights.
    """
    scores = as_real(scores)
    m = scores.shape[-1]
    if not 1 <= k <= m:
        raise ConfigError(f"k={k} must lie in [1, {m}]")
    idx = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    sel = np.take_along_axis(scores, idx, axis=-1)
    total = sel.sum(axis=-1, keepdims=True)
    small = total < WEIGHT_FLOOR
    w = np.where(small, 1.0 / k, sel / np.where(small, 1.0, total))
    return idx, w


def _expert_outputs(params: ModelParams, bank: str, V):
    # all experts on all rows: hidden (N, m, q), out (N, m, q)
    pre = np.einsum("nd,mdq->nmq", V, params[f"{bank}.w1"]) + params[f"{bank}.b1"]
    hid = np.maximum(pre, 0.0)
    out = np.einsum("nmq,mqr->nmr", hid, params[f"{bank}.w2"]) + params[f"{bank}.b2"]
    return hid, out


def _merge(E, idx, w):
    # fixed summation order over the selected slots
    rows = np.arange(E.shape[0])
    z = w[:, 0, None] * E[rows, idx[:, 0]]
    for j in range(1, idx.shape[1]):
        z = z + w[:, j, None] * E[rows, idx[:, j]]
    return z


def forward(params: ModelParams, X):
    """Batched forward pass. Returns ``(U_c, U_p, cache)``; the cache feeds the backward pass."""
    cfg = params.config
    X = as_real(X)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected (N, {cfg.input_dim}) inputs, got {X.shape}")
    V, acts = _backbone(params, X)
    cache = {"acts": acts, "V": V, "experts": {}, "branch": {}}
    codes = {}
    for s in BRANCHES:
        bank = params.expert_bank(s)
        if bank not in cache["experts"]:
            cache["experts"][bank] = _expert_outputs(params, bank, V)
        _, E = cache["experts"][bank]
        g = f"gate_{s}"
        gh = np.maximum(V @ params[f"{g}.w1"] + params[f"{g}.b1"], 0.0)
        raw = gh @ params[f"{g}.w2"] + params[f"{g}.b2"]
        act = sigmoid(raw) if cfg.gate_mode == "sigmoid_norm" else softmax(raw)
        idx, w = select_topk(act, cfg.top_k)
        z = _merge(E, idx, w)
        u = np.tanh(z) if cfg.tanh_output else z
        codes[s] = u
        cache["branch"][s] = {"bank": bank, "gh": gh, "act": act, "idx": idx, "w": w, "u": u}
    return codes["c"], codes["p"], cache


def routing_of(cache) -> RoutingRecord:
    b = cache["branch"]
    return RoutingRecord({s: b[s]["idx"] for s in BRANCHES}, {s: b[s]["w"] for s in BRANCHES})


def smmoh_forward(params: ModelParams, v) -> CodePair:
    """Route one backbone feature vector (or a batch) through both branches."""
    v = as_real(v)
    single = v.ndim == 1
    V = v[None, :] if single else v
    if V.shape[1] != params.config.feature_dim:
        raise ShapeError(f"feature dimension {V.shape[1]} != {params.config.feature_dim}")
    codes, idxs, ws = {}, {}, {}
    for s in BRANCHES:
        _, E = _expert_outputs(params, params.expert_bank(s), V)
        _, act = gate_scores(params, s, V)
        idx, w = select_topk(act, params.config.top_k)
        z = _merge(E, idx, w)
        codes[s] = np.tanh(z) if params.config.tanh_output else z
        idxs[s], ws[s] = idx, w
    if single:
        codes = {s: u[0] for s, u in codes.items()}
        idxs = {s: i[0] for s, i in idxs.items()}
        ws = {s: w[0] for s, w in ws.items()}
    return CodePair(codes["c"], codes["p"], RoutingRecord(idxs, ws))


def encode(params: ModelParams, X, batch_size: int = 1024):
    """Continuous codes for both branches, computed in fixed-size chunks."""
    X = as_real(X)
    uc, up = [], []
    for start in range(0, len(X), batch_size):
        a, b, _ = forward(params, X[start:start + batch_size])
        uc.append(a)
        up.append(b)
    q = params.config.code_len
    if not uc:
        return np.zeros((0, q)), np.zeros((0, q))
    return np.concatenate(uc), np.concatenate(up)
