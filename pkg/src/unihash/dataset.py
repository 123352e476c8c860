"""Synthetic data, feature-file I/O, and the seen/unseen split protocols.

A :class:`Dataset` stores its samples column-wise (ids, feature matrix,
multi-hot label matrix); :attr:`Dataset.samples` materializes the row view.
Every id list held by a :class:`SplitDataset` refers to ``Dataset.ids``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from unihash.errors import ConfigError, FormatError, ProtocolError

BINARY_MAGIC = b"UHF1"
PROTOCOL_NAMES = ("seen@seen", "seen@all", "unseen@unseen", "unseen@all")


class Sample(NamedTuple):
    id: int
    features: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    is_multilabel: bool = False

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.uint8)
        if feats.ndim != 2 or labels.ndim != 2:
            raise ConfigError("features and labels must be 2-d")
        if not (len(ids) == len(feats) == len(labels)):
            raise ConfigError("ids, features and labels differ in length")
        if len(np.unique(ids)) != len(ids):
            raise ConfigError("sample ids are not unique")
        if not np.all(np.isfinite(feats)):
            raise ConfigError("non-finite feature value")
        if np.any(labels > 1):
            raise ConfigError("labels must be 0/1")
        if len(labels) and np.any(labels.sum(axis=1) == 0):
            raise ConfigError("every sample needs at least one label")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_pos", {int(i): n for n, i in enumerate(ids)})

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.is_multilabel == other.is_multilabel
            and np.array_equal(self.ids, other.ids)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(int(i), f, y) for i, f, y in zip(self.ids, self.features, self.labels)]

    def positions(self, ids) -> np.ndarray:
        """Row positions of the given sample ids."""
        return np.array([self._pos[int(i)] for i in ids], dtype=np.int64)

    def take(self, ids) -> tuple[np.ndarray, np.ndarray]:
        pos = self.positions(ids)
        return self.features[pos], self.labels[pos]


@dataclass(frozen=True, eq=False)
class SplitDataset:
    dataset: Dataset
    seen_classes: frozenset
    unseen_classes: frozenset
    train: list
    val_query: list
    query_seen: list
    query_unseen: list
    db_seen: list
    db_unseen: list
    db_all: list
    seed: int = 0
    seen_ratio: float = 1.0


class Protocol(NamedTuple):
    query: list
    database: list


@dataclass(frozen=True)
class ProtocolSets:
    """The four retrieval settings; an entry is ``None`` when its class group is empty."""

    protocols: dict = field(default_factory=dict)
    validation: Protocol | None = None

    def __getitem__(self, name):
        return self.protocols[name]

    def available(self):
        return [n for n in PROTOCOL_NAMES if self.protocols.get(n) is not None]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _class_directions(C: int, D: int, rng: np.random.Generator) -> np.ndarray:
    # Gram-Schmidt in blocks of D rows; rows are exactly orthonormal when C <= D.
    draws = rng.standard_normal((C, D))
    out = np.empty_like(draws)
    for start in range(0, C, D):
        block = draws[start:start + D]
        q, r = np.linalg.qr(block.T)
        q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
        out[start:start + D] = q.T[: len(block)]
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def generate_synthetic(C: int, D_in: int, n_per_class: int, spread: float, seed: int,
                       extra_label_prob: float = 0.0) -> Dataset:
    """Gaussian clusters around seeded unit-norm class directions.

    Samples come in a seeded random order with ids ``0..n-1``. With
    ``extra_label_prob > 0`` a sample also receives a second random label and
    its mean moves to the midpoint of both class directions. Features are
    rounded to float32 so the binary feature file round-trips exactly.
    """
    if C < 2 or D_in < 2 or n_per_class < 1:
        raise ConfigError(f"need C >= 2, D_in >= 2, n_per_class >= 1 (got {C}, {D_in}, {n_per_class})")
    if not (spread >= 0 and math.isfinite(spread)):
        raise ConfigError(f"spread must be finite and >= 0 (got {spread})")
    if not 0.0 <= extra_label_prob <= 1.0:
        raise ConfigError("extra_label_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    dirs = _class_directions(C, D_in, rng)
    n = C * n_per_class
    primary = np.repeat(np.arange(C), n_per_class)
    labels = np.zeros((n, C), dtype=np.uint8)
    labels[np.arange(n), primary] = 1
    means = dirs[primary].copy()
    if extra_label_prob > 0:
        extra = rng.random(n) < extra_label_prob
        other = (primary + rng.integers(1, C, size=n)) % C
        labels[extra, other[extra]] = 1
        means[extra] = 0.5 * (dirs[primary[extra]] + dirs[other[extra]])
    noise = rng.standard_normal((n, D_in))
    feats = (means + spread * noise).astype(np.float32).astype(np.float64)
    # interleave classes so Hamming-distance ties do not favour low class ids
    order = rng.permutation(n)
    return Dataset(np.arange(n), feats[order], labels[order], is_multilabel=bool(extra_label_prob > 0))


# ---------------------------------------------------------------- file I/O

def write_features(ds: Dataset, path, binary: bool = True) -> None:
    path = Path(path)
    n, D, C = len(ds), ds.feature_dim, ds.num_classes
    if binary:
        if not np.array_equal(ds.ids, np.arange(n)):
            raise FormatError("binary feature files store implicit ids 0..n-1")
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<QQQB", n, D, C, int(ds.is_multilabel)))
            rec = np.zeros(n, dtype=[("y", "u1", (C,)), ("x", "<f4", (D,))])
            rec["y"] = ds.labels
            rec["x"] = ds.features
            fh.write(rec.tobytes())
        return
    lines = [f"{n} {D} {C} {int(ds.is_multilabel)}"]
    for i, x, y in zip(ds.ids, ds.features, ds.labels):
        lines.append(f"{int(i)};{','.join(str(int(v)) for v in y)};{','.join(repr(float(v)) for v in x)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str, lineno: int):
    parts = line.split()
    if len(parts) != 4:
        raise FormatError(f"line {lineno}: header must be 'n D_in C multilabel'")
    try:
        n, D, C, ml = (int(p) for p in parts)
    except ValueError:
        raise FormatError(f"line {lineno}: header fields must be integers") from None
    if n < 0 or D < 1 or C < 1 or ml not in (0, 1):
        raise FormatError(f"line {lineno}: header values out of range")
    return n, D, C, ml


def _load_text(text: str) -> Dataset:
    rows = [ln for ln in text.splitlines()]
    if not rows or not rows[0].strip():
        raise FormatError("empty feature file")
    n, D, C, ml = _parse_header(rows[0], 1)
    ids = np.empty(n, dtype=np.int64)
    labels = np.empty((n, C), dtype=np.uint8)
    feats = np.empty((n, D), dtype=np.float64)
    body = [(k + 2, ln) for k, ln in enumerate(rows[1:]) if ln.strip()]
    if len(body) != n:
        raise FormatError(f"header declares {n} rows, found {len(body)}")
    for r, (lineno, ln) in enumerate(body):
        parts = ln.strip().split(";")
        if len(parts) != 3:
            raise FormatError(f"line {lineno}: expected 'id;labels;features'")
        try:
            ids[r] = int(parts[0])
            y = [int(v) for v in parts[1].split(",")]
            x = [float(v) for v in parts[2].split(",")]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if len(y) != C:
            raise FormatError(f"line {lineno}: row has {len(y)} labels, header says {C}")
        if len(x) != D:
            raise FormatError(f"line {lineno}: row has {len(x)} features, header says {D}")
        if any(v not in (0, 1) for v in y) or sum(y) == 0:
            raise FormatError(f"line {lineno}: labels must be 0/1 with at least one set")
        if not all(math.isfinite(v) for v in x):
            raise FormatError(f"line {lineno}: non-finite feature value")
        labels[r] = y
        feats[r] = x
    if len(np.unique(ids)) != n:
        raise FormatError("duplicate sample ids")
    return Dataset(ids, feats, labels, is_multilabel=bool(ml))


def _load_binary(blob: bytes) -> Dataset:
    head = struct.calcsize("<QQQB")
    if len(blob) < 4 + head:
        raise FormatError("truncated binary header")
    n, D, C, ml = struct.unpack_from("<QQQB", blob, 4)
    if ml not in (0, 1) or D < 1 or C < 1:
        raise FormatError("binary header values out of range")
    dt = np.dtype([("y", "u1", (C,)), ("x", "<f4", (D,))])
    payload = blob[4 + head:]
    if len(payload) != n * dt.itemsize:
        raise FormatError(f"payload holds {len(payload)} bytes, expected {n * dt.itemsize}")
    rec = np.frombuffer(payload, dtype=dt, count=n)
    labels = rec["y"].astype(np.uint8)
    feats = rec["x"].astype(np.float64)
    bad = np.flatnonzero((labels > 1).any(axis=1) | (labels.sum(axis=1) == 0))
    if len(bad):
        raise FormatError(f"record {int(bad[0])}: labels must be 0/1 with at least one set")
    bad = np.flatnonzero(~np.isfinite(feats).all(axis=1))
    if len(bad):
        raise FormatError(f"record {int(bad[0])}: non-finite feature value")
    return Dataset(np.arange(n), feats, labels, is_multilabel=bool(ml))


def load_features(path) -> Dataset:
    """Read a feature file; the binary form is recognised by its magic bytes."""
    blob = Path(path).read_bytes()
    if not blob.strip():
        raise FormatError("empty feature file")
    if blob[:4] == BINARY_MAGIC:
        return _load_binary(blob)
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("not a text feature file and missing UHF1 magic") from None
    return _load_text(text)


# ---------------------------------------------------------------- splitting

def _take_front(ids: list, frac: float) -> int:
    n = _round_half_up(frac * len(ids))
    if len(ids) > 1:
        n = min(n, len(ids) - 1)
    return n


def split_seen_unseen(ds: Dataset, seen_ratio: float, seed: int, query_frac: float = 0.2,
                      val_frac: float = 0.1, train_frac: float = 1.0) -> SplitDataset:
    """Partition classes into seen/unseen groups and samples into query/database roles.

    A sample is *pure* for a group when all of its labels fall inside that
    group; mixed samples only ever land in ``db_all``. Pure samples are
    bucketed by their lowest label, each bucket is shuffled, and the leading
    ``query_frac`` share becomes queries. Of the seen database, a further
    ``val_frac`` per bucket is held out as validation queries; the rest
    (optionally subsampled by ``train_frac``) is the training pool.
    """
    C = ds.num_classes
    if not (0.0 < seen_ratio <= 1.0):
        raise ConfigError(f"seen_ratio must lie in (0, 1], got {seen_ratio}")
    for name, v in (("query_frac", query_frac), ("val_frac", val_frac)):
        if not 0.0 <= v < 1.0:
            raise ConfigError(f"{name} must lie in [0, 1), got {v}")
    if not 0.0 < train_frac <= 1.0:
        raise ConfigError(f"train_frac must lie in (0, 1], got {train_frac}")
    n_seen = C if seen_ratio == 1.0 else _round_half_up(seen_ratio * C)
    if seen_ratio < 1.0 and not 1 <= n_seen < C:
        raise ConfigError(f"seen_ratio={seen_ratio} gives {n_seen} seen of {C} classes")

    rng = np.random.default_rng(seed)
    order = rng.permutation(C)
    seen = frozenset(int(c) for c in order[:n_seen])
    unseen = frozenset(int(c) for c in order[n_seen:])
    seen_mask = np.zeros(C, dtype=bool)
    seen_mask[list(seen)] = True

    has_seen = (ds.labels[:, seen_mask] > 0).any(axis=1)
    has_unseen = (ds.labels[:, ~seen_mask] > 0).any(axis=1)
    pure_seen = has_seen & ~has_unseen
    pure_unseen = has_unseen & ~has_seen
    primary = np.argmax(ds.labels > 0, axis=1)

    def partition(mask):
        queries, dbs = [], []
        for c in range(C):
            bucket = ds.ids[mask & (primary == c)]
            bucket = list(rng.permutation(bucket))
            nq = _take_front(bucket, query_frac)
            queries.append(bucket[:nq])
            dbs.append(bucket[nq:])
        return queries, dbs

    q_seen, db_seen_b = partition(pure_seen)
    q_unseen, db_unseen_b = partition(pure_unseen)

    val, train = [], []
    for bucket in db_seen_b:
        nv = _take_front(bucket, val_frac) if bucket else 0
        val.extend(bucket[:nv])
        rest = bucket[nv:]
        if train_frac < 1.0 and rest:
            rest = rest[: max(1, _round_half_up(train_frac * len(rest)))]
        train.extend(rest)

    pos = {int(i): n for n, i in enumerate(ds.ids)}

    def ordered(chunks):
        flat = [int(i) for ch in chunks for i in ch]
        return sorted(flat, key=pos.__getitem__)

    db_seen = ordered(db_seen_b)
    db_unseen = ordered(db_unseen_b)
    mixed = [int(i) for i in ds.ids[has_seen & has_unseen]]
    return SplitDataset(
        dataset=ds,
        seen_classes=seen,
        unseen_classes=unseen,
        train=ordered([train]),
        val_query=ordered([val]),
        query_seen=ordered(q_seen),
        query_unseen=ordered(q_unseen),
        db_seen=db_seen,
        db_unseen=db_unseen,
        db_all=ordered([db_seen, db_unseen, mixed]),
        seed=seed,
        seen_ratio=seen_ratio,
    )


def build_eval_protocols(split: SplitDataset) -> ProtocolSets:
    """Pair each query group with its database for the four retrieval settings."""
    pairs = {
        "seen@seen": (split.query_seen, split.db_seen),
        "seen@all": (split.query_seen, split.db_all),
        "unseen@unseen": (split.query_unseen, split.db_unseen),
        "unseen@all": (split.query_unseen, split.db_all),
    }
    out = {}
    for name, (q, db) in pairs.items():
        group = split.seen_classes if name.startswith("seen") else split.unseen_classes
        if not group:
            out[name] = None
            continue
        if not q or not db:
            raise ProtocolError(f"{name}: empty {'query' if not q else 'database'} set")
        out[name] = Protocol(list(q), list(db))
    validation = None
    if split.val_query and split.train:
        validation = Protocol(list(split.val_query), list(split.train))
    return ProtocolSets(out, validation)
