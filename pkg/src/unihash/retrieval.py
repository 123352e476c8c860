"""Binary codes, popcount Hamming search and retrieval metrics.

Bit ``j`` of a code lives in word ``j // 64`` at bit position ``j % 64``
(LSB first); bits past ``q`` are always zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from unihash.errors import ProtocolError, ShapeError
from unihash.network import encode

BRANCH_NAMES = {"c": "center", "p": "pairwise"}


class PackedCode(NamedTuple):
    q: int
    words: np.ndarray  # (ceil(q/64),) uint64


def n_words(q: int) -> int:
    return (q + 63) // 64


def pack_bits(bits) -> np.ndarray:
    """Pack a ``(..., q)`` 0/1 array into ``(..., ceil(q/64))`` uint64 words."""
    bits = np.asarray(bits).astype(np.uint64)
    q = bits.shape[-1]
    W = n_words(q)
    pad = np.zeros(bits.shape[:-1] + (W * 64,), dtype=np.uint64)
    pad[..., :q] = bits
    pad = pad.reshape(bits.shape[:-1] + (W, 64))
    shifts = np.arange(64, dtype=np.uint64)
    return np.bitwise_or.reduce(pad << shifts, axis=-1)


def unpack_bits(words, q: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint64)
    shifts = np.arange(64, dtype=np.uint64)
    bits = (words[..., None] >> shifts) & np.uint64(1)
    return bits.reshape(words.shape[:-1] + (-1,))[..., :q].astype(np.uint8)


def pack_codes(U) -> np.ndarray:
    """Sign-binarize continuous codes row-wise (``sign(0) = +1``) and pack them."""
    U = np.asarray(U)
    return pack_bits(U >= 0)


def binarize(u) -> PackedCode:
    u = np.asarray(u, dtype=np.float64)
    return PackedCode(u.shape[-1], pack_codes(u))


def hamming_distance(a: PackedCode, b: PackedCode) -> int:
    if a.q != b.q or a.words.shape != b.words.shape:
        raise ShapeError(f"code lengths differ: {a.q} vs {b.q}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


def hamming_matrix(Qw, Dw) -> np.ndarray:
    """All-pairs Hamming distances between packed query rows and database rows."""
    Qw = np.asarray(Qw, dtype=np.uint64)
    Dw = np.asarray(Dw, dtype=np.uint64)
    if Qw.shape[-1] != Dw.shape[-1]:
        raise ShapeError("packed word counts differ")
    out = np.zeros((Qw.shape[0], Dw.shape[0]), dtype=np.int64)
    for w in range(Qw.shape[1]):
        out += np.bitwise_count(Qw[:, w, None] ^ Dw[None, :, w])
    return out


def code_to_hex(words) -> str:
    return "".join(f"{int(w):016x}" for w in words)


@dataclass(frozen=True, eq=False)
class PackedCodeIndex:
    q: int
    codes: np.ndarray  # (n, W) uint64
    ids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.uint64)
        ids = np.array(self.ids, dtype=np.int64)
        labels = np.array(self.labels, dtype=np.uint8)
        if not (len(codes) == len(ids) == len(labels)):
            raise ShapeError("codes, ids and labels differ in length")
        if codes.ndim != 2 or codes.shape[1] != n_words(self.q):
            raise ShapeError(f"expected (n, {n_words(self.q)}) packed codes")
        for a in (codes, ids, labels):
            a.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> PackedCode:
        return PackedCode(self.q, self.codes[i])

    @classmethod
    def build(cls, U, ids, labels) -> "PackedCodeIndex":
        U = np.asarray(U)
        return cls(U.shape[1], pack_codes(U), ids, labels)


def search(index: PackedCodeIndex, query: PackedCode, K: int):
    """Top-``K`` ``(id, distance)`` pairs by ascending distance, ties by database position."""
    if len(index) == 0:
        raise ProtocolError("search on an empty index")
    if K < 1:
        raise ValueError("K must be >= 1")
    if query.q != index.q:
        raise ShapeError(f"query has {query.q} bits, index {index.q}")
    dist = hamming_matrix(np.asarray(query.words)[None, :], index.codes)[0]
    order = np.argsort(dist, kind="stable")[:K]
    return [(int(index.ids[i]), int(dist[i])) for i in order]


def average_precision(rel, R: int, K: int) -> float:
    """AP@K over a ranked 0/1 relevance list, normalized by ``min(R, K)``."""
    rel = np.asarray(rel, dtype=np.float64)[:K]
    if R <= 0 or rel.sum() == 0:
        return 0.0
    hits = np.cumsum(rel)
    prec = hits / np.arange(1, len(rel) + 1)
    return float(np.sum(prec * rel) / min(R, K))


def _relevance(q_labels, db_labels) -> np.ndarray:
    return (np.asarray(q_labels, dtype=np.int64) @ np.asarray(db_labels, dtype=np.int64).T) > 0


def _ranking(Qw, index: PackedCodeIndex):
    dist = hamming_matrix(Qw, index.codes)
    return dist, np.argsort(dist, axis=1, kind="stable")


def ap_per_query(q_codes, q_labels, index: PackedCodeIndex, K: int) -> np.ndarray:
    rel_all = _relevance(q_labels, index.labels)
    _, order = _ranking(q_codes, index)
    top = np.take_along_axis(rel_all, order[:, :K], axis=1).astype(np.float64)
    R = rel_all.sum(axis=1)
    hits = np.cumsum(top, axis=1)
    prec = hits / np.arange(1, top.shape[1] + 1)
    num = np.sum(prec * top, axis=1)
    den = np.minimum(R, K).astype(np.float64)
    return np.where((R > 0) & (num > 0), num / np.where(den > 0, den, 1.0), 0.0)


def mean_average_precision(q_codes, q_labels, index: PackedCodeIndex, K: int) -> float:
    """mAP@K with label-intersection relevance; queries without relevant items count as 0."""
    if len(q_codes) == 0:
        raise ProtocolError("empty query set")
    if len(index) == 0:
        raise ProtocolError("empty database")
    return float(np.mean(ap_per_query(q_codes, q_labels, index, K)))


class PRPoint(NamedTuple):
    radius: int
    precision: float
    recall: float


def pr_curve(q_codes, q_labels, index: PackedCodeIndex) -> list[PRPoint]:
    """Micro-averaged precision/recall of the within-radius set for radius ``0..q``.

    An empty retrieval at some radius reports precision 1 by convention.
    """
    rel = _relevance(q_labels, index.labels)
    dist = hamming_matrix(q_codes, index.codes)
    total_rel = int(rel.sum())
    out = []
    for r in range(index.q + 1):
        within = dist <= r
        got = int(within.sum())
        hit = int((within & rel).sum())
        prec = hit / got if got else 1.0
        recall = hit / total_rel if total_rel else 0.0
        out.append(PRPoint(r, prec, recall))
    return out


def consistency_tau2(U_c, U_p) -> float:
    """Mean squared Euclidean distance between the two branches' codes."""
    A = np.asarray(U_c, dtype=np.float64)
    B = np.asarray(U_p, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeError(f"branch codes differ in shape: {A.shape} vs {B.shape}")
    if A.shape[0] == 0:
        return 0.0
    return float(np.mean(np.sum((A - B) ** 2, axis=1)))


# ---------------------------------------------------------------- checkpoint evaluation

class _Encoded:
    """Lazily encodes dataset rows once per checkpoint and caches packed codes per branch."""

    def __init__(self, params, dataset):
        self.params = params
        self.dataset = dataset
        self._cont = {}

    def continuous(self, ids):
        key = tuple(ids)
        if key not in self._cont:
            X, _ = self.dataset.take(ids)
            self._cont[key] = encode(self.params, X)
        return self._cont[key]

    def packed(self, ids, branch):
        U_c, U_p = self.continuous(ids)
        return pack_codes(U_c if branch == "c" else U_p)

    def labels(self, ids):
        return self.dataset.take(ids)[1]


def _branch_map(enc: _Encoded, query, database, K, branch):
    if not query:
        raise ProtocolError("empty query set")
    if not database:
        raise ProtocolError("empty database")
    index = PackedCodeIndex(enc.params.config.code_len, enc.packed(database, branch),
                            database, enc.labels(database))
    return mean_average_precision(enc.packed(query, branch), enc.labels(query), index, K), index


def pick_branch(map_c: float, map_p: float) -> str:
    """``argmax`` over the two branches; ties go to the center branch."""
    return "c" if map_c >= map_p else "p"


def select_branch(checkpoint, dataset, validation, K: int):
    """Evaluate both branches on the validation ``(query, database)`` pair.

    Returns ``(branch, {"c": mAP_c, "p": mAP_p})`` with branch in ``{"c", "p"}``.
    """
    if validation is None:
        raise ProtocolError("no validation protocol available")
    enc = _Encoded(checkpoint.params, dataset)
    maps = {s: _branch_map(enc, validation.query, validation.database, K, s)[0] for s in ("c", "p")}
    return pick_branch(maps["c"], maps["p"]), maps


@dataclass
class ProtocolMetrics:
    map_center: float
    map_pairwise: float
    map_selected: float
    n_query: int
    n_database: int
    pr_curve: list = field(default_factory=list)


@dataclass
class MetricsReport:
    K: int
    selected_branch: str
    selection_maps: dict
    tau2: float
    protocols: dict  # name -> ProtocolMetrics | None (absent)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        prot = {}
        for name, m in self.protocols.items():
            if m is None:
                prot[name] = {"status": "absent"}
            else:
                prot[name] = {
                    "status": "ok",
                    "map_center": m.map_center,
                    "map_pairwise": m.map_pairwise,
                    "map_selected": m.map_selected,
                    "n_query": m.n_query,
                    "n_database": m.n_database,
                    "pr_curve": [p._asdict() for p in m.pr_curve],
                }
        return {
            "K": self.K,
            "selected_branch": BRANCH_NAMES[self.selected_branch],
            "selection_map": {BRANCH_NAMES[s]: v for s, v in self.selection_maps.items()},
            "tau2": self.tau2,
            "protocols": prot,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def metrics_csv(self) -> str:
        lines = ["protocol,branch,K,mAP"]
        for name, m in self.protocols.items():
            if m is None:
                continue
            for branch, v in (("center", m.map_center), ("pairwise", m.map_pairwise),
                              ("selected", m.map_selected)):
                lines.append(f"{name},{branch},{self.K},{v!r}")
        return "\n".join(lines) + "\n"

    def pr_csv(self) -> str:
        lines = ["protocol,branch,radius,precision,recall"]
        sel = BRANCH_NAMES[self.selected_branch]
        for name, m in self.protocols.items():
            if m is None:
                continue
            for p in m.pr_curve:
                lines.append(f"{name},{sel},{p.radius},{p.precision!r},{p.recall!r}")
        return "\n".join(lines) + "\n"


def evaluate_protocols(checkpoint, dataset, protocols, K: int = 100, pr: bool = True,
                       only: list | None = None) -> MetricsReport:
    """mAP@K for both branches (and the selected one) on every available protocol.

    The branch is chosen on ``protocols.validation`` when present, otherwise on
    the first available protocol. ``tau2`` is measured over every query of
    the available protocols.
    """
    enc = _Encoded(checkpoint.params, dataset)
    names = [n for n in protocols.protocols if only is None or n in only]
    if protocols.validation is not None:
        branch, sel_maps = select_branch(checkpoint, dataset, protocols.validation, K)
    else:
        first = next((protocols[n] for n in names if protocols[n] is not None), None)
        if first is None:
            raise ProtocolError("no protocol available for branch selection")
        sel_maps = {s: _branch_map(enc, first.query, first.database, K, s)[0] for s in ("c", "p")}
        branch = pick_branch(sel_maps["c"], sel_maps["p"])

    results = {}
    all_queries = []
    for name in names:
        p = protocols[name]
        if p is None:
            results[name] = None
            continue
        maps = {}
        for s in ("c", "p"):
            maps[s], index = _branch_map(enc, p.query, p.database, K, s)
            if s == branch and pr:
                curve = pr_curve(enc.packed(p.query, s), enc.labels(p.query), index)
        results[name] = ProtocolMetrics(maps["c"], maps["p"], maps[branch], len(p.query),
                                        len(p.database), curve if pr else [])
        all_queries.extend(p.query)
    all_queries = list(dict.fromkeys(all_queries))
    if all_queries:
        U_c, U_p = enc.continuous(all_queries)
        tau2 = consistency_tau2(U_c, U_p)
    else:
        tau2 = math.nan
    return MetricsReport(K, branch, sel_maps, tau2, results)


def export_codes(checkpoint, dataset, ids, branches=("c", "p")) -> str:
    """Lines ``id;branch;hex`` with each 64-bit word printed as 16 hex digits, word 0 first."""
    enc = _Encoded(checkpoint.params, dataset)
    lines = []
    for s in branches:
        packed = enc.packed(list(ids), s)
        for i, w in zip(ids, packed):
            lines.append(f"{int(i)};{BRANCH_NAMES[s]};{code_to_hex(w)}")
    return "\n".join(lines) + "\n"
