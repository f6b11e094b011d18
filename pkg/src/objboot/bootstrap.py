"""Memory banks of object representations and cycle-consistent cross-image matching.

Objects are identified by keys ``(image_id, view, k)``. Bank ``M_i`` stores the
view-``i`` representations of objects that span both views, so every stored key
has its counterpart (the other view, same image and cluster index) in the other
bank. A query object from the current batch is matched to its nearest
neighbour in its own view's bank; the match is kept only if hopping to the
other view, retrieving the nearest neighbour in the current batch, and
hopping back lands on the query itself.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .encoder import NumericError

_NORM_FLOOR = 1e-12


class ObjectKey(NamedTuple):
    image_id: int
    view: int
    k: int


class RetrievalUnavailable(LookupError):
    """Nearest-neighbour query against an empty collection."""


class MissingCounterpart(RuntimeError):
    pass


def jump(key: ObjectKey) -> ObjectKey:
    """Swap the view of a key: object k of view 1 <-> object k of view 2."""
    key = ObjectKey(*key)
    if key.view not in (1, 2):
        raise ValueError(f"view must be 1 or 2, got {key.view}")
    return ObjectKey(key.image_id, 3 - key.view, key.k)


def cosine_matrix(queries: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    qn = queries / np.linalg.norm(queries, axis=-1, keepdims=True)
    vn = vectors / np.maximum(np.linalg.norm(vectors, axis=-1, keepdims=True), _NORM_FLOOR)
    return qn @ vn.T


def nn_indices(queries: np.ndarray, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive cosine argmax for each query row; ties go to the smallest index."""
    queries = np.atleast_2d(queries)
    if len(vectors) == 0:
        raise RetrievalUnavailable("empty collection")
    if np.any(np.linalg.norm(queries, axis=-1) == 0):
        raise NumericError("nn query", "zero-norm query vector")
    cos = cosine_matrix(queries, vectors)
    idx = np.argmax(cos, axis=1)
    return idx, cos[np.arange(len(idx)), idx]


def nn_retrieve(query: np.ndarray, collection: np.ndarray) -> tuple[int, np.ndarray]:
    idx, _ = nn_indices(np.asarray(query)[None, :], np.asarray(collection))
    return int(idx[0]), np.asarray(collection)[idx[0]]


@dataclass
class BankGroup:
    image_id: int
    object_ids: np.ndarray  # (m,)
    vectors: np.ndarray  # (m, d)


@dataclass
class BankSnapshot:
    """Immutable flattened view of a bank, in insertion order."""

    view_index: int
    keys: list[ObjectKey]
    vectors: np.ndarray  # (M, d)

    def __post_init__(self):
        self.index = {key: i for i, key in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.keys)


class MemoryBank:
    """FIFO of per-image groups, holding at most ``capacity`` images."""

    def __init__(self, view_index: int, capacity: int, dim: int | None = None):
        if view_index not in (1, 2):
            raise ValueError("view_index must be 1 or 2")
        self.view_index = view_index
        self.capacity = capacity
        self.dim = dim
        self.groups: deque[BankGroup] = deque()

    def insert(self, image_id: int, object_ids, vectors) -> None:
        vectors = np.array(vectors, dtype=float, ndmin=2)
        object_ids = np.asarray(object_ids, dtype=np.int64)
        if len(object_ids) != len(vectors):
            raise ValueError("object_ids and vectors differ in length")
        if not np.all(np.isfinite(vectors)):
            raise NumericError(f"bank {self.view_index} insert", "non-finite object representation")
        if len(vectors) and np.any(np.linalg.norm(vectors, axis=1) == 0):
            raise NumericError(f"bank {self.view_index} insert", "zero object representation")
        self.groups.append(BankGroup(int(image_id), object_ids, vectors))
        while len(self.groups) > self.capacity:
            self.groups.popleft()

    def __len__(self) -> int:
        return sum(len(g.object_ids) for g in self.groups)

    @property
    def image_ids(self) -> list[int]:
        return [g.image_id for g in self.groups]

    def snapshot(self) -> BankSnapshot:
        keys = [ObjectKey(g.image_id, self.view_index, int(k)) for g in self.groups for k in g.object_ids]
        if self.groups:
            vectors = np.concatenate([g.vectors for g in self.groups], axis=0)
        else:
            vectors = np.zeros((0, self.dim or 0))
        return BankSnapshot(self.view_index, keys, vectors)

    def state(self) -> list[tuple[int, np.ndarray, np.ndarray]]:
        return [(g.image_id, g.object_ids, g.vectors) for g in self.groups]


class BankPair:
    """The two view banks, always updated together so they hold the same images."""

    def __init__(self, capacity: int, dim: int | None = None):
        self.banks = (MemoryBank(1, capacity, dim), MemoryBank(2, capacity, dim))

    def __getitem__(self, view: int) -> MemoryBank:
        return self.banks[view - 1]

    def insert(self, image_id: int, object_ids, vectors_view1, vectors_view2) -> None:
        if len(vectors_view1) != len(vectors_view2):
            raise MissingCounterpart("both views must store the same objects")
        self.banks[0].insert(image_id, object_ids, vectors_view1)
        self.banks[1].insert(image_id, object_ids, vectors_view2)

    def snapshot(self) -> tuple[BankSnapshot, BankSnapshot]:
        return self.banks[0].snapshot(), self.banks[1].snapshot()

    @property
    def empty(self) -> bool:
        return len(self.banks[0]) == 0


def bank_insert(bank: MemoryBank, image_id: int, object_ids, vectors) -> None:
    bank.insert(image_id, object_ids, vectors)


@dataclass
class BatchObjects:
    """Valid objects of the current batch for one view: keys and teacher representations."""

    view: int
    keys: list[ObjectKey]
    vectors: np.ndarray

    def __post_init__(self):
        self.index = {key: i for i, key in enumerate(self.keys)}


@dataclass
class MatchRecord:
    object_key: ObjectKey
    nn_key: ObjectKey | None
    cosine: float
    cycle_consistent: bool
    warmup: bool = False
    trace: tuple[ObjectKey, ...] = ()  # nn in bank, jump, nn in batch, jump


def _counterpart(snapshot: BankSnapshot, key: ObjectKey) -> int:
    try:
        return snapshot.index[jump(key)]
    except KeyError:
        raise MissingCounterpart(f"no counterpart for {key} in bank {snapshot.view_index}") from None


def match_view(batch: tuple[BatchObjects, BatchObjects], banks: tuple[BankSnapshot, BankSnapshot],
               view: int) -> list[MatchRecord]:
    """Nearest neighbours and cycle-consistency for every batch object of ``view``."""
    own, other = batch[view - 1], batch[2 - view]
    bank_own, bank_other = banks[view - 1], banks[2 - view]
    if len(own.keys) == 0:
        return []
    if len(bank_own) == 0:
        return [MatchRecord(key, None, float("nan"), False, warmup=True) for key in own.keys]
    hop1, cos1 = nn_indices(own.vectors, bank_own.vectors)
    jumped = np.array([_counterpart(bank_other, bank_own.keys[i]) for i in hop1], dtype=np.int64)
    if len(other.keys) == 0:
        return [MatchRecord(key, bank_own.keys[i], float(c), False) for key, i, c in zip(own.keys, hop1, cos1)]
    hop2, _ = nn_indices(bank_other.vectors[jumped], other.vectors)
    records = []
    for q, key in enumerate(own.keys):
        nn_key = bank_own.keys[hop1[q]]
        back = other.keys[hop2[q]]
        trace = (nn_key, bank_other.keys[jumped[q]], back, jump(back))
        records.append(MatchRecord(key, nn_key, float(cos1[q]), jump(back) == key, trace=trace))
    return records


def cycle_consistent(key: ObjectKey, banks: tuple[BankSnapshot, BankSnapshot],
                     batch: tuple[BatchObjects, BatchObjects]) -> bool:
    """Single-object form of the criterion; ``False`` (with a warning) while the bank is empty."""
    key = ObjectKey(*key)
    own = batch[key.view - 1]
    if len(banks[key.view - 1]) == 0:
        warnings.warn("memory bank empty (warm-up): cycle consistency reported false", stacklevel=2)
        return False
    single = BatchObjects(key.view, [key], own.vectors[own.index[key]][None, :])
    pair = (single, batch[1]) if key.view == 1 else (batch[0], single)
    return match_view(pair, banks, key.view)[0].cycle_consistent


def bootstrapping_ratio(records: list[MatchRecord]) -> tuple[float, bool]:
    """Fraction of valid objects (both views) passing the cycle test.

    Returns ``(ratio, defined)``; with no records the ratio is 0 and ``defined`` is False.
    """
    if not records:
        return 0.0, False
    return sum(r.cycle_consistent for r in records) / len(records), True
