"""1:1 verification, 1:N open-set search and compatibility arithmetic.

Operating-point convention: decision thresholds sit on observed negative
scores (impostor pairs, or best scores of out-of-gallery queries) and a
score is accepted when ``score >= threshold``. At a target rate the chosen
threshold is the lowest candidate whose empirical false rate does not
exceed the target; if none qualifies, only scores strictly above every
negative are accepted.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .gallery import FeatureStore, Gallery, truncate_for_comparison
from .nncore import DimensionError, l2norm_forward


class InvalidGainError(ValueError):
    """Update gain requested where it is undefined."""


# ------------------------------------------------------------ thresholds


@dataclass
class OperatingPoint:
    target: float
    value: float
    achieved: float
    threshold: float
    strict: bool  # True: accept score > threshold, False: score >= threshold


def _accepted(scores: np.ndarray, threshold: float, strict: bool) -> np.ndarray:
    return scores > threshold if strict else scores >= threshold


def select_threshold(negatives, target: float) -> tuple[float, bool]:
    """Lowest negative-score threshold with false rate <= ``target``."""
    neg = np.sort(np.asarray(negatives, dtype=np.float64))
    n = neg.size
    if n == 0:
        raise ValueError("need at least one negative score")
    uniq = np.unique(neg)
    count_ge = n - np.searchsorted(neg, uniq, side="left")
    ok = count_ge <= target * n + 1e-12 * n
    if ok.any():
        return float(uniq[np.argmax(ok)]), False
    return float(neg[-1]), True


def rate_at(positives, negatives, target: float, positive_ok=None) -> OperatingPoint:
    """True rate at a false-rate target.

    ``positive_ok`` (optional boolean mask) marks positives that may count as
    hits at all, e.g. searches whose top match is the right class.
    """
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.asarray(negatives, dtype=np.float64)
    t, strict = select_threshold(neg, target)
    hit = _accepted(pos, t, strict)
    if positive_ok is not None:
        hit &= np.asarray(positive_ok, dtype=bool)
    value = float(hit.mean()) if pos.size else 0.0
    achieved = float(_accepted(neg, t, strict).mean())
    return OperatingPoint(float(target), value, achieved, t, strict)


def curve(positives, negatives, positive_ok=None) -> list[tuple[float, float]]:
    """(false rate, true rate) at every candidate threshold, by false rate."""
    pos = np.asarray(positives, dtype=np.float64)
    neg = np.sort(np.asarray(negatives, dtype=np.float64))
    ok = np.ones(pos.size, bool) if positive_ok is None else np.asarray(positive_ok, dtype=bool)
    good = np.sort(pos[ok])
    n, m = neg.size, max(pos.size, 1)
    pts = [(0.0, float((good > neg[-1]).sum() / m))]
    for u in np.unique(neg)[::-1]:
        far = float((n - np.searchsorted(neg, u, side="left")) / n)
        tar = float((good.size - np.searchsorted(good, u, side="left")) / m)
        pts.append((far, tar))
    return pts


# ------------------------------------------------------------------ report


@dataclass
class EvalReport:
    protocol: str  # "verify_1v1" | "search_1vN"
    query_version: str
    gallery_version: str
    operating_points: list[OperatingPoint]
    curve: list[tuple[float, float]]
    retrieval_rates: dict[int, float] = field(default_factory=dict)
    criterion_verdict: Optional[bool] = None
    update_gain: Optional[float] = None

    def at(self, target: float) -> float:
        for op in self.operating_points:
            if math.isclose(op.target, target, rel_tol=1e-12, abs_tol=0.0):
                return op.value
        raise KeyError(f"no operating point at {target}")

    @property
    def value(self) -> float:
        """Metric at the first (headline) operating point."""
        return self.operating_points[0].value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve"] = [list(p) for p in self.curve]
        d["retrieval_rates"] = {str(k): v for k, v in self.retrieval_rates.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.protocol == "verify_1v1":
            w.writerow(["far", "tar"])
        else:
            w.writerow(["fpir", "tpir"])
        for a, b in self.curve:
            w.writerow([repr(a), repr(b)])
        return buf.getvalue()


# ---------------------------------------------------------------- protocols


def _align(a: np.ndarray, b: np.ndarray, distance: str) -> tuple[np.ndarray, np.ndarray]:
    """Truncate the wider side to the narrower dim."""
    k = min(a.shape[1], b.shape[1])
    return truncate_for_comparison(a, k, distance), truncate_for_comparison(b, k, distance)


def pair_scores(feats_a: np.ndarray, feats_b: np.ndarray, distance: str = "cosine") -> np.ndarray:
    """Row-wise similarity between aligned feature rows."""
    a, b = _align(np.asarray(feats_a, np.float64), np.asarray(feats_b, np.float64), distance)
    if distance == "cosine":
        a, b = l2norm_forward(a), l2norm_forward(b)
        return np.einsum("ij,ij->i", a, b)
    return -np.linalg.norm(a - b, axis=1)


def make_pairs(sample_ids: Sequence[str], labels, n_genuine: int, n_impostor: int,
               seed: int) -> list[tuple[str, str, bool]]:
    """Seeded genuine and impostor pairs (distinct samples, unordered)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    n = len(sample_ids)
    gen = [(i, j) for i in range(n) for j in range(i + 1, n) if labels[i] == labels[j]]
    n_impostor = min(n_impostor, n * (n - 1) // 2 - len(gen))
    if n_genuine < len(gen):
        gen = [gen[k] for k in sorted(rng.choice(len(gen), n_genuine, replace=False))]
    imp: set[tuple[int, int]] = set()
    while len(imp) < n_impostor:
        i, j = rng.integers(0, n, size=2)
        if i == j or labels[i] == labels[j]:
            continue
        imp.add((min(i, j), max(i, j)))
    pairs = [(sample_ids[i], sample_ids[j], True) for i, j in gen]
    pairs += [(sample_ids[i], sample_ids[j], False) for i, j in sorted(imp)]
    return pairs


def verify_1v1(store: FeatureStore, version_a: str, version_b: str,
               pairs: Sequence[tuple[str, str, bool]], far_targets: Sequence[float] = (1e-2,),
               distance: str = "cosine") -> EvalReport:
    """TAR at FAR with the first pair member from ``version_a``, second from ``version_b``."""
    genuine = np.array([g for _, _, g in pairs], dtype=bool)
    if not (~genuine).any():
        raise ValueError("verification needs at least one impostor pair")
    try:
        fa = store.matrix([a for a, _, _ in pairs], version_a)
        fb = store.matrix([b for _, b, _ in pairs], version_b)
    except KeyError as e:
        raise KeyError(f"unresolvable pair id: {e.args[0]}") from None
    s = pair_scores(fa, fb, distance)
    pos, neg = s[genuine], s[~genuine]
    ops = [rate_at(pos, neg, t) for t in far_targets]
    return EvalReport("verify_1v1", version_a, version_b, ops, curve(pos, neg))


def search_1vN(query_feats, query_labels, gallery: Gallery, fpir_targets: Sequence[float] = (1e-1,),
               ranks: Sequence[int] = (1, 5), query_version: str = "", gallery_version: str = "") -> EvalReport:
    """Open-set identification of query rows against class prototypes.

    Queries whose class has no prototype are the out-of-gallery probes that
    define FPIR; in-gallery queries count toward TPIR when their top match is
    correct and passes the threshold.
    """
    labels = np.asarray(query_labels, dtype=np.int64)
    ids, sim = gallery.similarities(np.asarray(query_feats, dtype=np.float64))
    ids_arr = np.asarray(ids)
    known = np.isin(labels, ids_arr)
    if not (~known).any():
        raise ValueError("no out-of-gallery queries: FPIR undefined")
    if not known.any():
        raise ValueError("no in-gallery queries: TPIR undefined")
    # Stable sort on -sim keeps ascending class ids among ties.
    order = np.argsort(-sim, axis=1, kind="stable")
    best = sim[np.arange(len(labels)), order[:, 0]]
    top1 = ids_arr[order[:, 0]]
    correct = top1 == labels
    pos, neg, ok = best[known], best[~known], correct[known]
    ops = [rate_at(pos, neg, t, ok) for t in fpir_targets]
    rates = {}
    ranked = ids_arr[order[known]]
    for k in ranks:
        rates[int(k)] = float((ranked[:, :k] == labels[known][:, None]).any(axis=1).mean())
    if not gallery_version:
        gallery_version = "+".join(sorted(set(gallery.provenance().values())))
    return EvalReport("search_1vN", query_version, gallery_version, ops, curve(pos, neg, ok), rates)


# ---------------------------------------------------------------- criteria


def check_empirical_criterion(m_new_old: float, m_old_old: float) -> bool:
    return m_new_old > m_old_old


def update_gain(m_new_old: float, m_old_old: float, m_paragon: float) -> float:
    """Share of the full-backfill improvement kept without backfilling."""
    if not check_empirical_criterion(m_new_old, m_old_old):
        raise InvalidGainError("update gain is undefined when the empirical criterion fails")
    den = m_paragon - m_old_old
    if den <= 0:
        raise InvalidGainError("paragon does not improve on the old model")
    return (m_new_old - m_old_old) / den


def _features(model_or_feats, inputs) -> np.ndarray:
    if hasattr(model_or_feats, "embed"):
        return np.asarray(model_or_feats.embed(inputs), dtype=np.float64)
    return np.asarray(model_or_feats, dtype=np.float64)


def check_strict_criterion(model_new, model_old, inputs, labels, distance: str = "cosine",
                           tol: float = 0.0) -> tuple[bool, list[tuple[int, int]]]:
    """Pairwise check over all ordered pairs ``i != j``.

    Different-class pairs must not get closer and same-class pairs must not
    drift apart when the first sample is embedded by the new model.
    ``model_*`` may be checkpoints or precomputed feature arrays.
    """
    new = _features(model_new, inputs)
    old = _features(model_old, inputs)
    if new.shape[0] != old.shape[0]:
        raise DimensionError("feature sets differ in length")
    if new.shape[1] != old.shape[1]:
        new = truncate_for_comparison(new, old.shape[1], distance)
    y = np.asarray(labels)
    if distance == "cosine":
        d_new = 1.0 - new @ old.T
        d_old = 1.0 - old @ old.T
    else:
        d_new = np.linalg.norm(new[:, None, :] - old[None, :, :], axis=2)
        d_old = np.linalg.norm(old[:, None, :] - old[None, :, :], axis=2)
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(y), dtype=bool)
    bad = off & ((same & (d_new > d_old + tol)) | (~same & (d_new < d_old - tol)))
    viol = [(int(i), int(j)) for i, j in zip(*np.nonzero(bad))]
    return not viol, viol
