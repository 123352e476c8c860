"""Center, pairwise and mutual losses and their gradients with respect to the codes.

Each ``*_loss`` returns a scalar; the matching ``*_loss_grad`` returns the
scalar together with the gradient(s) the trainer backpropagates.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from unihash.errors import ConfigError, NumericError, ShapeError
from unihash.network import as_real

LOG_FLOOR = 1e-12
COS_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    center: float = 4.0
    pairwise: float = 1.0
    mutual: float = 1.0

    def __post_init__(self):
        for v in (self.center, self.pairwise, self.mutual):
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"loss weights must be finite and >= 0, got {self}")

    def as_tuple(self):
        return (self.center, self.pairwise, self.mutual)


class DetachSide(str, Enum):
    """Which branch is held constant as the mutual-loss target."""

    PAIRWISE = "detach_pairwise"
    CENTER = "detach_center"


def _sq_norms(A, what):
    """Squared row norms; exactly-zero rows are rejected."""
    aa = np.einsum("nq,nq->n", A, A)
    zero = np.flatnonzero(aa == 0)
    if len(zero):
        raise NumericError(f"{what}: row {int(zero[0])} has zero norm", where=int(zero[0]))
    return aa


def _cos_pairs(A, B, what):
    # cos computed as a.b / sqrt(|a|^2 |b|^2) so that cos(a, a) == 1 exactly
    aa = _sq_norms(A, what)
    bb = _sq_norms(B, what)
    ab = np.einsum("nq,nq->n", A, B)
    den = np.maximum(np.sqrt(aa * bb), COS_FLOOR)
    return ab / den, aa, bb, den


def center_loss_grad(U_c, labels, centers):
    """Center loss and its gradient with respect to ``U_c``."""
    U = as_real(U_c)
    Y = np.asarray(labels, dtype=np.float64)
    H = centers.as_float() if hasattr(centers, "as_float") else np.asarray(centers, dtype=np.float64)
    N, q = U.shape
    C = H.shape[0]
    if N < 1:
        raise ShapeError("center loss needs at least one row")
    if C < 2:
        raise ConfigError("center loss needs at least two classes")
    if H.shape[1] != q or Y.shape != (N, C):
        raise ShapeError(f"codes {U.shape}, labels {Y.shape}, centers {H.shape} are inconsistent")
    uu = _sq_norms(U, "center loss")
    hh = np.einsum("cq,cq->c", H, H)
    dots = U @ H.T
    den = np.maximum(np.sqrt(uu[:, None] * hh[None, :]), COS_FLOOR)
    cos = dots / den
    scale = np.sqrt(q)
    logits = scale * cos
    P = np.exp(logits - logits.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    Q = 1.0 - P
    Pc = np.maximum(P, LOG_FLOOR)
    Qc = np.maximum(Q, LOG_FLOOR)
    loss = -np.sum(Y * np.log(Pc) + (1 - Y) * np.log(Qc)) / N

    dP = -(Y * np.where(P > LOG_FLOOR, 1.0 / Pc, 0.0)
           - (1 - Y) * np.where(Q > LOG_FLOOR, 1.0 / Qc, 0.0)) / N
    dlogit = P * (dP - np.sum(P * dP, axis=1, keepdims=True))
    dcos = scale * dlogit
    # d cos / d u = h / den - cos * u / |u|^2   (den unclamped away from zero)
    dU = (dcos / den) @ H - np.sum(dcos * cos, axis=1, keepdims=True) * U / uu[:, None]
    return loss, dU


def center_loss(U_c, labels, centers) -> float:
    return center_loss_grad(U_c, labels, centers)[0]


def similarity_matrix(labels) -> np.ndarray:
    """1 where two rows share at least one label."""
    Y = np.asarray(labels, dtype=np.int64)
    return (Y @ Y.T > 0).astype(np.float64)


def pairwise_terms(I, S):
    """Per-pair negative log-likelihood ``log(1+e^-|I|) + max(0, I) - S*I``."""
    return np.log1p(np.exp(-np.abs(I))) + np.maximum(0.0, I) - S * I


def pairwise_loss_grad(U_p, S, include_diagonal: bool = True):
    U = as_real(U_p)
    S = np.asarray(S, dtype=np.float64)
    N = U.shape[0]
    if N < 2:
        raise ShapeError("pairwise loss needs at least two rows")
    if S.shape != (N, N):
        raise ShapeError(f"similarity matrix {S.shape} does not match {N} codes")
    I = 0.5 * (U @ U.T)
    mask = np.ones((N, N))
    if not include_diagonal:
        np.fill_diagonal(mask, 0.0)
    count = mask.sum()
    loss = np.sum(mask * pairwise_terms(I, S)) / count
    # d term / d I = sigmoid(I) - S
    sig = 0.5 * (1.0 + np.tanh(0.5 * I))
    G = mask * (sig - S) / count
    dU = 0.5 * (G + G.T) @ U
    return loss, dU


def pairwise_loss(U_p, S, include_diagonal: bool = True) -> float:
    return pairwise_loss_grad(U_p, S, include_diagonal)[0]


def mutual_loss_grad(U_c, U_p, detach: DetachSide | str):
    """Mean ``1 - cos(u_c, u_p)``; only the non-detached side receives gradient.

    Returns ``(loss, dU_c, dU_p)`` where the detached side's gradient is zero.
    """
    detach = DetachSide(detach)
    A = as_real(U_c)
    B = as_real(U_p)
    if A.shape != B.shape:
        raise ShapeError(f"branch codes differ in shape: {A.shape} vs {B.shape}")
    N = A.shape[0]
    cos, aa, bb, den = _cos_pairs(A, B, "mutual loss")
    loss = np.mean(1.0 - cos)
    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    if detach is DetachSide.PAIRWISE:
        dA = -(B / den[:, None] - cos[:, None] * A / aa[:, None]) / N
    else:
        dB = -(A / den[:, None] - cos[:, None] * B / bb[:, None]) / N
    return loss, dA, dB


def mutual_loss(U_c, U_p, detach: DetachSide | str = DetachSide.PAIRWISE) -> float:
    return mutual_loss_grad(U_c, U_p, detach)[0]


def total_loss(L_C: float, L_P: float, L_M: float, w: LossWeights) -> float:
    return w.center * L_C + w.pairwise * L_P + w.mutual * L_M
