"""Fixed binary hash centers, one per class, with a minimum Hamming separation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import hadamard

from unihash.errors import CapabilityError, ConfigError, GenerationError

MAX_RESAMPLES = 10_000


@dataclass(frozen=True, eq=False)
class HashCenterTable:
    centers: np.ndarray  # (C, q) int8, entries exactly +-1
    min_distance: int

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.int8)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ConfigError("centers must be a non-empty (C, q) matrix")
        if not np.all(np.abs(c) == 1):
            raise ConfigError("center entries must be exactly +-1")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def q(self) -> int:
        return self.centers.shape[1]

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def as_float(self) -> np.ndarray:
        return self.centers.astype(np.float64)

    def to_text(self) -> str:
        return "\n".join(" ".join(f"{int(v):+d}" for v in row) for row in self.centers) + "\n"


def _pairwise_hamming(centers: np.ndarray) -> np.ndarray:
    c = np.asarray(centers, dtype=np.int64)
    q = c.shape[1]
    # inner product of +-1 vectors: q - 2 * hamming
    return (q - c @ c.T) // 2


def min_pairwise_hamming(table) -> int:
    """Smallest Hamming distance over distinct class pairs (``q`` when there is one class)."""
    centers = table.centers if isinstance(table, HashCenterTable) else np.asarray(table)
    C, q = centers.shape
    if C < 2:
        return int(q)
    d = _pairwise_hamming(centers)
    iu = np.triu_indices(C, k=1)
    return int(d[iu].min())


def generate_centers(C: int, q: int, method: str = "hadamard", d_floor: int | None = None,
                     seed: int = 0) -> HashCenterTable:
    """Build a center table.

    ``hadamard`` takes rows of the Sylvester Hadamard matrix of order ``q``
    (then their negations once ``C > q``); ``seed`` plays no role there.
    ``random`` draws seeded +-1 vectors and keeps redrawing one member of the
    closest pair until every pair is at least ``d_floor`` apart
    (default ``ceil(q / 4)``).
    """
    if C < 1 or q < 1:
        raise ConfigError(f"need C >= 1 and q >= 1 (got C={C}, q={q})")
    if method == "hadamard":
        if q & (q - 1):
            raise CapabilityError(f"hadamard centers need q a power of two (got {q})")
        if C > 2 * q:
            raise CapabilityError(f"hadamard centers support at most 2q={2 * q} classes (got {C})")
        H = hadamard(q).astype(np.int8)
        rows = np.concatenate([H, -H])[:C]
        table = HashCenterTable(rows, 0)
        d = min_pairwise_hamming(table)
        if d_floor is not None and d < d_floor:
            raise GenerationError(f"hadamard centers reach distance {d} < d_floor={d_floor}", best=d)
        return HashCenterTable(rows, d)
    if method != "random":
        raise ConfigError(f"unknown center method {method!r}")

    if d_floor is None:
        d_floor = math.ceil(q / 4)
    rng = np.random.default_rng(seed)
    centers = rng.choice(np.array([-1, 1], dtype=np.int8), size=(C, q))
    if C == 1:
        return HashCenterTable(centers, q)
    iu = np.triu_indices(C, k=1)
    best = -1
    for _ in range(MAX_RESAMPLES + 1):
        dist = _pairwise_hamming(centers)[iu]
        worst = int(np.argmin(dist))
        cur = int(dist[worst])
        best = max(best, cur)
        if cur >= d_floor:
            return HashCenterTable(centers, cur)
        # redraw the later member of the closest pair
        centers[iu[1][worst]] = rng.choice(np.array([-1, 1], dtype=np.int8), size=q)
    raise GenerationError(
        f"random centers did not reach d_floor={d_floor} in {MAX_RESAMPLES} resamples "
        f"(best min distance {best})", best=best)


def default_centers(C: int, q: int, seed: int = 0) -> HashCenterTable:
    """Hadamard when feasible, otherwise random with the default floor."""
    if q & (q - 1) == 0 and C <= 2 * q:
        return generate_centers(C, q, "hadamard", seed=seed)
    return generate_centers(C, q, "random", seed=seed)
