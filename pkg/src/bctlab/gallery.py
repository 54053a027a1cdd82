"""Versioned feature store, class prototypes and open-set assignment.

Prototypes may come from different model versions (a partially backfilled
gallery). Comparing a wider query against a narrower prototype uses the
query's leading coordinates; the reverse is an error.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .nncore import EPS_NORM, DegenerateInputError, DimensionError, l2norm_forward

MAGIC = b"BCTF"
STORE_FORMAT = 1
DISTANCES = ("cosine", "euclidean")


class MissingClassError(KeyError):
    def __init__(self, missing: Sequence[int], version: str):
        super().__init__(f"no records under version {version!r} for classes {sorted(missing)}")
        self.missing = sorted(missing)


@dataclass
class FeatureRecord:
    sample_id: str
    class_id: int
    version: str
    embedding: np.ndarray  # float32


class FeatureStore:
    """Embeddings keyed by ``(sample_id, model_version)``; stored as float32."""

    def __init__(self):
        self._records: dict[tuple[str, str], FeatureRecord] = {}
        self.dims: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records.values())

    def versions(self) -> list[str]:
        return list(self.dims)

    def add(self, sample_id: str, class_id: int, version: str, embedding) -> None:
        v = np.asarray(embedding, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("embeddings must be finite")
        key = (sample_id, version)
        if key in self._records:
            raise ValueError(f"duplicate record {key}")
        dim = self.dims.setdefault(version, v.size)
        if v.size != dim:
            raise DimensionError(f"version {version!r} has dim {dim}, got {v.size}")
        self._records[key] = FeatureRecord(sample_id, int(class_id), version, v)

    def add_many(self, sample_ids, class_ids, version: str, embeddings) -> None:
        for s, c, e in zip(sample_ids, class_ids, np.asarray(embeddings)):
            self.add(s, int(c), version, e)

    def get(self, sample_id: str, version: str) -> FeatureRecord:
        return self._records[(sample_id, version)]

    def records(self, version: str, class_ids: Optional[Iterable[int]] = None) -> list[FeatureRecord]:
        keep = None if class_ids is None else set(int(c) for c in class_ids)
        return [r for r in self._records.values()
                if r.version == version and (keep is None or r.class_id in keep)]

    def matrix(self, sample_ids: Sequence[str], version: str) -> np.ndarray:
        """Stacked float64 embeddings in the given order."""
        try:
            return np.stack([self._records[(s, version)].embedding for s in sample_ids]).astype(np.float64)
        except KeyError as e:
            raise KeyError(f"no feature for {e.args[0]}") from None

    def merge(self, other: "FeatureStore") -> "FeatureStore":
        for r in other:
            self.add(r.sample_id, r.class_id, r.version, r.embedding)
        return self

    # -------------------------------------------------------------- binary

    def to_bytes(self) -> bytes:
        dims = set(self.dims.values())
        if len(dims) > 1:
            raise DimensionError("a store file holds one embedding dim; write versions separately")
        dim = dims.pop() if dims else 0
        out = [MAGIC, struct.pack("<IIQ", STORE_FORMAT, dim, len(self._records))]
        for r in self._records.values():
            sid = r.sample_id.encode("utf-8")
            ver = r.version.encode("utf-8")
            out.append(struct.pack("<H", len(sid)) + sid)
            out.append(struct.pack("<q", r.class_id))
            out.append(struct.pack("<H", len(ver)) + ver)
            out.append(r.embedding.astype("<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureStore":
        if data[:4] != MAGIC:
            raise ValueError("not a feature store file (bad magic)")
        fmt, dim, count = struct.unpack_from("<IIQ", data, 4)
        if fmt != STORE_FORMAT:
            raise ValueError(f"unsupported feature store format {fmt}")
        pos = 4 + 16
        store = cls()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            sid = data[pos:pos + n].decode("utf-8")
            pos += n
            (cid,) = struct.unpack_from("<q", data, pos)
            pos += 8
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            ver = data[pos:pos + n].decode("utf-8")
            pos += n
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float32)
            pos += 4 * dim
            store.add(sid, cid, ver, vec)
        if pos != len(data):
            raise ValueError("trailing bytes after feature store records")
        return store

    def save(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(self.to_bytes())
        return p

    @classmethod
    def load(cls, path) -> "FeatureStore":
        return cls.from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------ gallery


def truncate_for_comparison(embedding, target_dim: int, distance: str = "cosine") -> np.ndarray:
    """Leading ``target_dim`` coordinates, renormalized under cosine distance.

    Accepts a single vector or a row matrix.
    """
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape[-1] < target_dim:
        raise DimensionError(f"cannot truncate dim {e.shape[-1]} to larger dim {target_dim}")
    if e.shape[-1] == target_dim:
        return e
    t = e[..., :target_dim]
    if distance == "cosine":
        t = l2norm_forward(t).reshape(t.shape)
    return t


def _distance(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    """Pairwise distances between rows of ``a`` and rows of ``b``."""
    if kind == "cosine":
        return 1.0 - a @ b.T
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


@dataclass
class Prototype:
    vector: np.ndarray
    source_version: str


@dataclass
class Gallery:
    distance: str = "cosine"
    set_function: str = "mean"
    prototypes: dict[int, Prototype] = field(default_factory=dict)

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        if self.set_function != "mean":
            raise ValueError("only the mean set function is supported")

    def __len__(self) -> int:
        return len(self.prototypes)

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.prototypes)

    def provenance(self) -> dict[int, str]:
        return {c: self.prototypes[c].source_version for c in self.class_ids}

    def update(self, entries: dict[int, Prototype]) -> "Gallery":
        self.prototypes.update(entries)
        return self

    def distances(self, queries) -> tuple[list[int], np.ndarray]:
        """Class ids (ascending) and the ``Q x N`` distance matrix."""
        if not self.prototypes:
            raise ValueError("empty gallery")
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        ids = self.class_ids
        out = np.empty((q.shape[0], len(ids)))
        by_dim: dict[int, list[int]] = {}
        for j, c in enumerate(ids):
            by_dim.setdefault(self.prototypes[c].vector.size, []).append(j)
        for dim, cols in by_dim.items():
            qq = truncate_for_comparison(q, dim, self.distance)
            protos = np.stack([self.prototypes[ids[j]].vector for j in cols])
            out[:, cols] = _distance(qq, protos, self.distance)
        return ids, out

    def similarities(self, queries) -> tuple[list[int], np.ndarray]:
        ids, d = self.distances(queries)
        return ids, (1.0 - d) if self.distance == "cosine" else -d

    def to_dict(self) -> dict:
        return {
            "distance": self.distance,
            "set_function": self.set_function,
            "prototypes": [
                {"class_id": c, "source_version": self.prototypes[c].source_version,
                 "vector": self.prototypes[c].vector.tolist()}
                for c in self.class_ids
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Gallery":
        g = cls(d["distance"], d.get("set_function", "mean"))
        for p in d["prototypes"]:
            g.prototypes[int(p["class_id"])] = Prototype(np.asarray(p["vector"], dtype=np.float64),
                                                         p["source_version"])
        return g

    def save(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), sort_keys=True))
        return p

    @classmethod
    def load(cls, path) -> "Gallery":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_prototypes(store: FeatureStore, version: str, class_ids: Iterable[int],
                     distance: str = "cosine", sample_ids: Optional[Iterable[str]] = None) -> dict[int, Prototype]:
    """Mean embedding per class under one version.

    ``sample_ids`` optionally restricts which records count (e.g. the gallery
    split only).
    """
    wanted = sorted(set(int(c) for c in class_ids))
    allow = None if sample_ids is None else set(sample_ids)
    groups: dict[int, list[np.ndarray]] = {c: [] for c in wanted}
    for r in store.records(version, wanted):
        if allow is None or r.sample_id in allow:
            groups[r.class_id].append(r.embedding)
    missing = [c for c, v in groups.items() if not v]
    if missing:
        raise MissingClassError(missing, version)
    out = {}
    for c in wanted:
        m = np.mean(np.stack(groups[c]).astype(np.float64), axis=0)
        if distance == "cosine":
            if np.linalg.norm(m) <= EPS_NORM:
                raise DegenerateInputError(f"class {c}: mean embedding is zero, prototype undefined")
            m = l2norm_forward(m)[0]
        out[c] = Prototype(m, version)
    return out


def build_gallery(store: FeatureStore, version: str, class_ids: Iterable[int], distance: str = "cosine",
                  sample_ids: Optional[Iterable[str]] = None) -> Gallery:
    return Gallery(distance).update(build_prototypes(store, version, class_ids, distance, sample_ids))


def assign(gallery: Gallery, query_embedding) -> tuple[int, float]:
    """Nearest class and its distance; ties go to the smallest class id."""
    ids, d = gallery.distances(query_embedding)
    j = int(np.argmin(d[0]))  # argmin returns the first minimum, ids ascend
    return ids[j], float(d[0, j])


def backfill_classes(class_ids: Sequence[int], fraction: float, seed: int) -> list[int]:
    """The seeded ``ceil(fraction * N)`` classes that receive new prototypes."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    ids = sorted(int(c) for c in class_ids)
    k = math.ceil(round(fraction * len(ids), 9))
    perm = np.random.default_rng(seed).permutation(len(ids))
    return sorted(ids[i] for i in perm[:k])


def partial_backfill(store: FeatureStore, old_version: str, new_version: str, fraction: float, seed: int,
                     class_ids: Optional[Iterable[int]] = None, distance: str = "cosine",
                     sample_ids: Optional[Iterable[str]] = None) -> Gallery:
    """Gallery whose chosen classes use ``new_version`` prototypes."""
    if class_ids is None:
        class_ids = sorted({r.class_id for r in store.records(old_version)})
    ids = sorted(set(int(c) for c in class_ids))
    sample_ids = None if sample_ids is None else set(sample_ids)
    new_ids = set(backfill_classes(ids, fraction, seed))
    # Both versions must cover every class, whichever side is used.
    old_p = build_prototypes(store, old_version, ids, distance, sample_ids)
    new_p = build_prototypes(store, new_version, ids, distance, sample_ids)
    g = Gallery(distance)
    g.update({c: (new_p[c] if c in new_ids else old_p[c]) for c in ids})
    return g
