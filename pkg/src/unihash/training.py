"""Reverse-mode gradients, finite-difference checking, RMSProp and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from unihash.centers import HashCenterTable, default_centers, generate_centers
from unihash.dataset import SplitDataset
from unihash.errors import ConfigError, FormatError, NumericError, ShapeError
from unihash.network import BRANCHES, ModelConfig, ModelParams, forward, encode, init_params
from unihash.retrieval import consistency_tau2
from unihash.objectives import (
    DetachSide,
    LossWeights,
    center_loss_grad,
    mutual_loss_grad,
    pairwise_loss_grad,
    similarity_matrix,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UHCK"
CHECKPOINT_VERSION = 1
LOG_HEADER = ("epoch", "loss", "loss_center", "loss_pairwise", "loss_mutual", "tau2", "detach_side")
SCHEDULES = ("per_epoch", "per_iteration")


@dataclass(frozen=True)
class CenterConfig:
    method: str = "auto"  # auto | hadamard | random
    d_floor: int | None = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    detach_schedule: str = "per_epoch"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    centers: CenterConfig = field(default_factory=CenterConfig)
    lr: float = 1e-4
    alpha: float = 0.99
    eps: float = 1e-8
    include_diagonal: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (the pairwise loss needs pairs)")
        if self.detach_schedule not in SCHEDULES:
            raise ConfigError(f"detach_schedule must be one of {SCHEDULES}")
        if not self.lr > 0 or not 0 <= self.alpha < 1 or not self.eps > 0:
            raise ConfigError("invalid RMSProp hyperparameters")


# ---------------------------------------------------------------- loss + backward

class LossParts(NamedTuple):
    total: float
    center: float
    pairwise: float
    mutual: float


class Evaluation(NamedTuple):
    parts: LossParts
    grads: dict | None
    U_c: np.ndarray
    U_p: np.ndarray
    cache: dict


def detach_for_step(t: int) -> DetachSide:
    """Even step index treats the pairwise codes as the target, odd the center codes."""
    return DetachSide.PAIRWISE if t % 2 == 0 else DetachSide.CENTER


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite gradient in {name}", where=name)


def evaluate(params: ModelParams, centers, X, Y, weights: LossWeights, detach,
             need_grad: bool = True, mutual_target: np.ndarray | None = None,
             include_diagonal: bool = True) -> Evaluation:
    """Forward, weighted objective and (optionally) exact reverse-mode gradients.

    ``mutual_target`` replaces the detached branch's codes inside the mutual
    term; the finite-difference checker uses it to freeze the target.
    """
    detach = DetachSide(detach)
    cfg = params.config
    U_c, U_p, cache = forward(params, X)
    S = similarity_matrix(Y)
    L_C, dC = center_loss_grad(U_c, Y, centers)
    L_P, dP = pairwise_loss_grad(U_p, S, include_diagonal)
    if detach is DetachSide.PAIRWISE:
        tgt = U_p if mutual_target is None else mutual_target
        L_M, dMc, dMp = mutual_loss_grad(U_c, tgt, detach)
    else:
        tgt = U_c if mutual_target is None else mutual_target
        L_M, dMc, dMp = mutual_loss_grad(tgt, U_p, detach)
    total = weights.center * L_C + weights.pairwise * L_P + weights.mutual * L_M
    parts = LossParts(total, L_C, L_P, L_M)
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss {parts}", where="loss")
    if not need_grad:
        return Evaluation(parts, None, U_c, U_p, cache)

    dU = {
        "c": weights.center * dC + weights.mutual * dMc,
        "p": weights.pairwise * dP + weights.mutual * dMp,
    }
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    V = cache["V"]
    N = V.shape[0]
    rows = np.arange(N)
    dV = np.zeros_like(V)
    dE = {bank: np.zeros_like(out) for bank, (_, out) in cache["experts"].items()}

    for s in BRANCHES:
        b = cache["branch"][s]
        u, idx, w, act, gh = b["u"], b["idx"], b["w"], b["act"], b["gh"]
        E = cache["experts"][b["bank"]][1]
        dz = dU[s] * (1.0 - u * u) if cfg.tanh_output else dU[s]
        k = idx.shape[1]
        dw = np.empty((N, k))
        for j in range(k):
            dw[:, j] = np.sum(dz * E[rows, idx[:, j]], axis=1)
            dE[b["bank"]][rows, idx[:, j]] += w[:, j, None] * dz
        # w_j = a_j / sum_sel(a): only the selected activations receive gradient
        sel = np.take_along_axis(act, idx, axis=1)
        tot = sel.sum(axis=1, keepdims=True)
        live = tot >= 1e-12
        dsel = np.where(live, (dw - np.sum(dw * w, axis=1, keepdims=True)) / np.where(live, tot, 1.0), 0.0)
        dact = np.zeros_like(act)
        np.put_along_axis(dact, idx, dsel, axis=1)
        if cfg.gate_mode == "sigmoid_norm":
            draw = dact * act * (1.0 - act)
        else:
            draw = act * (dact - np.sum(act * dact, axis=1, keepdims=True))
        g = f"gate_{s}"
        grads[f"{g}.w2"] += gh.T @ draw
        grads[f"{g}.b2"] += draw.sum(axis=0)
        dgpre = (draw @ params[f"{g}.w2"].T) * (gh > 0)
        grads[f"{g}.w1"] += V.T @ dgpre
        grads[f"{g}.b1"] += dgpre.sum(axis=0)
        dV += dgpre @ params[f"{g}.w1"].T

    for bank, (hid, _) in cache["experts"].items():
        d_out = dE[bank]
        grads[f"{bank}.b2"] += d_out.sum(axis=0)
        grads[f"{bank}.w2"] += np.einsum("nmq,nmr->mqr", hid, d_out)
        dpre = np.einsum("nmr,mqr->nmq", d_out, params[f"{bank}.w2"]) * (hid > 0)
        grads[f"{bank}.b1"] += dpre.sum(axis=0)
        grads[f"{bank}.w1"] += np.einsum("nd,nmq->mdq", V, dpre)
        dV += np.einsum("nmq,mdq->nd", dpre, params[f"{bank}.w1"])

    acts = cache["acts"]
    dh = dV
    for layer in reversed(range(cfg.backbone_layers)):
        dpre = dh * (acts[layer + 1] > 0)
        grads[f"backbone.{layer}.weight"] += acts[layer].T @ dpre
        grads[f"backbone.{layer}.bias"] += dpre.sum(axis=0)
        dh = dpre @ params[f"backbone.{layer}.weight"].T

    for name, g in grads.items():
        _check_finite(name, g)
    return Evaluation(parts, grads, U_c, U_p, cache)


def backward(params: ModelParams, centers, X, Y, weights: LossWeights, detach,
             include_diagonal: bool = True):
    """Return ``(loss, grads)`` for one batch; ``grads`` mirrors ``params.arrays``."""
    ev = evaluate(params, centers, X, Y, weights, detach, include_diagonal=include_diagonal)
    return ev.parts.total, ev.grads


# ---------------------------------------------------------------- finite differences

def numeric_gradient_errors(loss_fn: Callable[[dict], float], arrays: dict, grads: dict, eps: float,
                            signature: Callable[[dict], object] | None = None):
    """Central-difference check of ``grads`` against ``loss_fn`` over every scalar of ``arrays``.

    ``arrays`` is perturbed in place and restored. Coordinates where
    ``signature`` (e.g. routing decisions) changes between ``theta - eps``,
    ``theta`` and ``theta + eps`` are skipped. Returns ``(per-array max
    relative error, skipped count)``.
    """
    if not 0 < eps <= 1e-2:
        raise ConfigError(f"eps must lie in (0, 1e-2], got {eps}")
    base_sig = signature(arrays) if signature else None
    errors, skipped = {}, 0
    for name, arr in arrays.items():
        worst = 0.0
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(arrays)
            sp = signature(arrays) if signature else None
            flat[i] = orig - eps
            lm = loss_fn(arrays)
            sm = signature(arrays) if signature else None
            flat[i] = orig
            if signature and not (_same(sp, base_sig) and _same(sm, base_sig)):
                skipped += 1
                continue
            fd = (lp - lm) / (2 * eps)
            rel = abs(fd - g[i]) / max(abs(g[i]), abs(fd), 1e-8)
            worst = max(worst, rel)
        errors[name] = float(worst)
    return errors, skipped


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def routing_signature(cache) -> tuple:
    """Every discrete decision of a forward pass: top-k picks and ReLU patterns."""
    sig = [cache["branch"][s]["idx"] for s in BRANCHES]
    sig += [cache["branch"][s]["gh"] > 0 for s in BRANCHES]
    sig += [hid > 0 for hid, _ in cache["experts"].values()]
    sig += [a > 0 for a in cache["acts"][1:]]
    return tuple(sig)


def finite_diff_errors(params: ModelParams, centers, X, Y, weights: LossWeights, detach,
                       eps: float = 1e-4, grads: dict | None = None, include_diagonal: bool = True):
    """Per-array max relative error of the analytic gradient; see :func:`finite_diff_check`.

    The perturbed forward passes run in ``np.longdouble`` so that loss
    roundoff (about ``ulp(L) / eps`` in double) does not swamp coordinates
    whose true gradient is near zero.
    """
    detach = DetachSide(detach)
    if grads is None:
        grads = evaluate(params, centers, X, Y, weights, detach, include_diagonal=include_diagonal).grads
    work = ModelParams(params.config, {k: v.astype(np.longdouble) for k, v in params.arrays.items()})
    Xl = np.asarray(X, dtype=np.longdouble)
    U_c, U_p, _ = forward(work, Xl)
    target = U_p if detach is DetachSide.PAIRWISE else U_c
    last = {}

    def loss_fn(arrays):
        ev = evaluate(work, centers, Xl, Y, weights, detach, need_grad=False,
                      mutual_target=target, include_diagonal=include_diagonal)
        last["sig"] = routing_signature(ev.cache)
        return ev.parts.total

    def signature(arrays):
        if "sig" not in last:
            loss_fn(arrays)
        return last.pop("sig")

    return numeric_gradient_errors(loss_fn, work.arrays, grads, eps, signature)


def finite_diff_check(params: ModelParams, centers, X, Y, weights: LossWeights, detach,
                      eps: float = 1e-4, grads: dict | None = None, include_diagonal: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients over all parameters.

    The detached branch's codes are frozen at their unperturbed values, so
    the reference is the gradient the trainer actually applies.
    """
    errors, _ = finite_diff_errors(params, centers, X, Y, weights, detach, eps, grads, include_diagonal)
    return max(errors.values()) if errors else 0.0


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-4
    alpha: float = 0.99
    eps: float = 1e-8
    square_avg: dict = field(default_factory=dict)


def rmsprop_step(state: OptimizerState, params: ModelParams, grads: dict):
    """Uncentered RMSProp without momentum; updates ``state`` and ``params`` in place."""
    for name, p in params.arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.square_avg.get(name)
        if v is None:
            v = state.square_avg[name] = np.zeros_like(p)
        v *= state.alpha
        v += (1.0 - state.alpha) * g * g
        p -= state.lr * g / (np.sqrt(v) + state.eps)
    return state, params


# ---------------------------------------------------------------- checkpoint

def _flatten_config(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if dataclasses.is_dataclass(val):
            for k, v in _flatten_config(val).items():
                out[f"{f.name}.{k}"] = v
        else:
            out[f.name] = val
    return out


def _unflatten_config(cls, flat: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if default is not None and dataclasses.is_dataclass(default):
            sub = {k[len(f.name) + 1:]: v for k, v in flat.items() if k.startswith(f.name + ".")}
            kwargs[f.name] = _unflatten_config(type(default), sub)
        elif f.name in flat:
            kwargs[f.name] = flat[f.name]
    return cls(**kwargs)


@dataclass(eq=False)
class Checkpoint:
    """Trained parameters, centers and the config that produced them.

    Parameters are rounded to float32 on construction so that a saved and
    reloaded checkpoint encodes exactly like the in-memory one.
    """

    params: ModelParams
    centers: HashCenterTable
    config: TrainConfig
    seed: int = 0

    def __post_init__(self):
        self.params = ModelParams(
            self.params.config,
            {k: v.astype(np.float32).astype(np.float64) for k, v in self.params.arrays.items()})

    def to_bytes(self) -> bytes:
        arrays = dict(self.params.arrays)
        arrays["centers"] = self.centers.centers
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        buf.write(struct.pack("<Q", len(arrays)))
        for name, a in arrays.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<Q", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<Q", a.ndim))
            buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        for a in arrays.values():
            buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        meta = {f"train.{k}": v for k, v in _flatten_config(self.config).items()}
        meta["seed"] = self.seed
        meta["centers.min_distance"] = self.centers.min_distance
        text = "".join(f"{k}={json.dumps(v)}\n" for k, v in meta.items()).encode("utf-8")
        buf.write(struct.pack("<Q", len(text)))
        buf.write(text)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != CHECKPOINT_MAGIC:
            raise FormatError("missing UHCK magic")
        try:
            off = 4
            (version,) = struct.unpack_from("<I", blob, off)
            off += 4
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            (count,) = struct.unpack_from("<Q", blob, off)
            off += 8
            manifest = []
            for _ in range(count):
                (nlen,) = struct.unpack_from("<Q", blob, off)
                off += 8
                name = blob[off:off + nlen].decode("utf-8")
                off += nlen
                (rank,) = struct.unpack_from("<Q", blob, off)
                off += 8
                shape = struct.unpack_from(f"<{rank}Q", blob, off)
                off += 8 * rank
                manifest.append((name, shape))
            arrays = {}
            for name, shape in manifest:
                size = int(np.prod(shape, dtype=np.int64))
                a = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
                off += 4 * size
                arrays[name] = a.astype(np.float64)
            (mlen,) = struct.unpack_from("<Q", blob, off)
            off += 8
            text = blob[off:off + mlen].decode("utf-8")
        except (struct.error, ValueError) as exc:
            raise FormatError(f"truncated or corrupt checkpoint: {exc}") from None
        meta = {}
        for line in text.splitlines():
            k, _, v = line.partition("=")
            meta[k] = json.loads(v)
        train_flat = {k[len("train."):]: v for k, v in meta.items() if k.startswith("train.")}
        config = _unflatten_config(TrainConfig, train_flat)
        centers = HashCenterTable(arrays.pop("centers").astype(np.int8), int(meta["centers.min_distance"]))
        return cls(ModelParams(config.model, arrays), centers, config, int(meta["seed"]))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- training loop

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    loss_center: float
    loss_pairwise: float
    loss_mutual: float
    tau2: float
    detach_side: str


class TrainingAborted(NumericError):
    def __init__(self, message, epoch, batch):
        super().__init__(message, where=(epoch, batch))
        self.epoch = epoch
        self.batch = batch


def write_log(records, path_or_buf) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in records:
        w.writerow([r.epoch, repr(r.loss), repr(r.loss_center), repr(r.loss_pairwise),
                    repr(r.loss_mutual), repr(r.tau2), r.detach_side])
    text = buf.getvalue()
    if path_or_buf is not None:
        Path(path_or_buf).write_text(text, encoding="utf-8")
    return text


def make_centers(config: TrainConfig, num_classes: int) -> HashCenterTable:
    q = config.model.code_len
    method = config.centers.method
    if method == "auto":
        if config.centers.d_floor is None:
            return default_centers(num_classes, q, seed=config.seed)
        method = "hadamard" if (q & (q - 1)) == 0 and num_classes <= 2 * q else "random"
    return generate_centers(num_classes, q, method, config.centers.d_floor, seed=config.seed)


def train(config: TrainConfig, data: SplitDataset, centers: HashCenterTable | None = None,
          params: ModelParams | None = None):
    """Run the full training loop; returns ``(Checkpoint, list[EpochRecord])``.

    Classes are indexed over the whole label space, so centers exist for
    unseen classes too; their rows simply never appear as positives.
    """
    ds = data.dataset
    mcfg = config.model
    if mcfg.input_dim != ds.feature_dim:
        raise ConfigError(f"model input_dim={mcfg.input_dim} but data has {ds.feature_dim} features")
    if centers is None:
        centers = make_centers(config, ds.num_classes)
    if centers.num_classes != ds.num_classes or centers.q != mcfg.code_len:
        raise ConfigError(f"centers {centers.centers.shape} inconsistent with C={ds.num_classes}, q={mcfg.code_len}")
    if len(data.train) < 2:
        raise ConfigError("training pool needs at least two samples")
    if params is None:
        params = init_params(mcfg, seed=config.seed)
    elif params.config != mcfg:
        raise ConfigError("initial parameters were built for a different model config")
    params = params.copy()
    state = OptimizerState(config.lr, config.alpha, config.eps)
    X_all, Y_all = ds.take(data.train)
    n = len(X_all)
    N = min(config.batch_size, n)
    records = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for bi, start in enumerate(range(0, n, N)):
            sel = order[start:start + N]
            if len(sel) < 2:
                continue
            step += 1
            t = epoch if config.detach_schedule == "per_epoch" else step
            detach = detach_for_step(t)
            try:
                ev = evaluate(params, centers, X_all[sel], Y_all[sel], config.weights, detach,
                              include_diagonal=config.include_diagonal)
            except NumericError as exc:
                raise TrainingAborted(f"epoch {epoch}, batch {bi}: {exc}", epoch, bi) from exc
            rmsprop_step(state, params, ev.grads)
            sums += ev.parts
            batches += 1
        mean = sums / max(batches, 1)
        U_c, U_p = encode(params, X_all)
        side = detach_for_step(epoch).value if config.detach_schedule == "per_epoch" else "per_iteration"
        rec = EpochRecord(epoch, *(float(v) for v in mean), consistency_tau2(U_c, U_p), side)
        records.append(rec)
        log.debug("epoch %d loss %.6f tau2 %.6f", epoch, rec.loss, rec.tau2)
    return Checkpoint(params, centers, config, config.seed), records
