"""Synthetic open-set identity data.

Identities are Gaussian clusters in a latent space, mapped to inputs through
one frozen random affine map followed by ``tanh``. Training identities get
class ids ``0 .. T-1``; open-set identities ``T .. T+O-1``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    num_train_identities: int = 60
    num_openset_identities: int = 40
    samples_per_identity: int = 50
    input_dim: int = 32
    class_separation: float = 8.0
    rng_seed: int = 0
    latent_dim: int = 8
    mixing_gain: float = 0.75

    def __post_init__(self):
        for name in ("num_train_identities", "num_openset_identities", "samples_per_identity",
                     "input_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.class_separation < 0:
            raise ValueError("class_separation must be >= 0")
        if self.mixing_gain <= 0:
            raise ValueError("mixing_gain must be > 0")


@dataclass(frozen=True)
class LabeledSample:
    sample_id: str
    class_id: int
    input: tuple[float, ...]


class Dataset:
    """Inputs, labels and ids as parallel arrays, plus the generating spec."""

    def __init__(self, spec: SyntheticSpec, sample_ids: Sequence[str], labels, inputs,
                 identity_order: Sequence[int]):
        self.spec = spec
        self.sample_ids = list(sample_ids)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.identity_order = [int(c) for c in identity_order]
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("duplicate sample ids")
        if self.inputs.shape != (len(self.sample_ids), spec.input_dim) or len(self.labels) != len(self.sample_ids):
            raise ValueError("inputs, labels and ids disagree in length or dim")
        if sorted(self.identity_order) != list(self.train_ids):
            raise ValueError("identity order must permute the training ids")
        self._pos = {s: i for i, s in enumerate(self.sample_ids)}

    @property
    def train_ids(self) -> range:
        return range(self.spec.num_train_identities)

    @property
    def openset_ids(self) -> range:
        t = self.spec.num_train_identities
        return range(t, t + self.spec.num_openset_identities)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def indices_of(self, sample_ids: Sequence[str]) -> np.ndarray:
        return np.array([self._pos[s] for s in sample_ids], dtype=np.int64)

    def samples(self) -> list[LabeledSample]:
        return [LabeledSample(s, int(c), tuple(float(v) for v in x))
                for s, c, x in zip(self.sample_ids, self.labels, self.inputs)]

    def identity_subset(self, fraction: float) -> list[int]:
        """First ``round(fraction * T)`` identities of a fixed permutation.

        Subsets for different fractions are nested.
        """
        if not 0 < fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        k = max(1, int(round(fraction * len(self.identity_order))))
        return sorted(self.identity_order[:k])

    def select(self, class_ids) -> np.ndarray:
        """Row indices of samples whose class is in ``class_ids``."""
        return np.flatnonzero(np.isin(self.labels, np.asarray(list(class_ids))))

    def train_indices(self, fraction: float = 1.0) -> np.ndarray:
        return self.select(self.identity_subset(fraction))

    def openset_indices(self) -> np.ndarray:
        return self.select(self.openset_ids)


def _sphere(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v


def generate(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.rng_seed)
    n_ids = spec.num_train_identities + spec.num_openset_identities
    centers = _sphere(rng, n_ids, spec.latent_dim, spec.class_separation)
    # Frozen mixing map; the gain keeps tanh out of full saturation.
    mix = rng.standard_normal((spec.latent_dim, spec.input_dim)) * spec.mixing_gain / math.sqrt(spec.latent_dim)
    offset = rng.uniform(-0.5, 0.5, size=spec.input_dim)
    n = spec.samples_per_identity
    labels = np.repeat(np.arange(n_ids), n)
    latent = centers[labels] + rng.standard_normal((n_ids * n, spec.latent_dim))
    inputs = np.tanh(latent @ mix + offset)
    ids = [f"c{c:04d}_s{i:04d}" for c in range(n_ids) for i in range(n)]
    order = rng.permutation(spec.num_train_identities)
    return Dataset(spec, ids, labels, inputs, order)


def split_queries_galleries(dataset: Dataset, per_class_gallery: int, per_class_query: int,
                            seed: int, class_ids=None) -> tuple[list[str], list[str]]:
    """Disjoint gallery/query sample ids covering the same identities.

    ``class_ids`` defaults to the open-set identities.
    """
    if per_class_gallery < 1 or per_class_query < 1:
        raise ValueError("need at least one gallery and one query sample per class")
    classes = list(dataset.openset_ids if class_ids is None else class_ids)
    rng = np.random.default_rng(seed)
    gallery: list[str] = []
    query: list[str] = []
    for c in classes:
        idx = np.flatnonzero(dataset.labels == c)
        if per_class_gallery + per_class_query > len(idx):
            raise ValueError(
                f"class {c} has {len(idx)} samples, needs {per_class_gallery + per_class_query}"
            )
        idx = idx[rng.permutation(len(idx))]
        gallery += [dataset.sample_ids[i] for i in idx[:per_class_gallery]]
        query += [dataset.sample_ids[i] for i in idx[per_class_gallery:per_class_gallery + per_class_query]]
    return gallery, query


# ----------------------------------------------------------------------- I/O


def save(dataset: Dataset, path) -> tuple[Path, Path]:
    """Write ``<stem>.jsonl`` and ``<stem>.spec.json``."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".jsonl" else path
    data_path = stem.with_suffix(".jsonl")
    spec_path = stem.with_suffix(".spec.json")
    data_path.parent.mkdir(parents=True, exist_ok=True)
    with open(data_path, "w") as f:
        for s, c, x in zip(dataset.sample_ids, dataset.labels, dataset.inputs):
            f.write(json.dumps({"sample_id": s, "class_id": int(c), "input": x.tolist()}) + "\n")
    with open(spec_path, "w") as f:
        json.dump({"spec": asdict(dataset.spec), "identity_order": dataset.identity_order}, f,
                  indent=2, sort_keys=True)
    return data_path, spec_path


def load(path) -> Dataset:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".jsonl" else path
    with open(stem.with_suffix(".spec.json")) as f:
        meta = json.load(f)
    spec = SyntheticSpec(**meta["spec"])
    ids, labels, inputs = [], [], []
    with open(stem.with_suffix(".jsonl")) as f:
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            ids.append(r["sample_id"])
            labels.append(r["class_id"])
            inputs.append(r["input"])
    ds = Dataset(spec, ids, labels, np.array(inputs, dtype=np.float64).reshape(len(ids), spec.input_dim),
                 meta["identity_order"])
    n_ids = spec.num_train_identities + spec.num_openset_identities
    if ds.labels.size and (ds.labels.min() < 0 or ds.labels.max() >= n_ids):
        raise ValueError("class id outside the declared identity range")
    return ds
