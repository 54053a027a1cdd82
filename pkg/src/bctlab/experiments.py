"""Benchmark splits, paired evaluation and the standard study recipes.

A ``Benchmark`` fixes, for one dataset, which open-set samples form the
gallery, which are queries, which identities are held out of the gallery as
distractors, and which verification pairs are scored. Every study below
evaluates checkpoints through one shared benchmark, so numbers from
different studies are directly comparable.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import evalproto as E
from . import gallery as G
from . import trainer as T
from .datagen import Dataset, split_queries_galleries
from .trainer import Checkpoint, TrainRecipe


@dataclass
class EvalSettings:
    gallery_per_class: int = 10
    query_per_class: int = 40
    distractor_fraction: float = 0.25  # open-set identities kept out of the gallery
    n_genuine: int = 3000
    n_impostor: int = 30000
    far_targets: list[float] = field(default_factory=lambda: [1e-2])
    fpir_targets: list[float] = field(default_factory=lambda: [1e-1])
    ranks: list[int] = field(default_factory=lambda: [1, 5])
    split_seed: int = 1
    pair_seed: int = 2
    backfill_seed: int = 3

    def __post_init__(self):
        if not 0 < self.distractor_fraction < 1:
            raise ValueError("distractor_fraction must lie in (0, 1)")
        if not self.far_targets or not self.fpir_targets:
            raise ValueError("need at least one operating point per protocol")


class Benchmark:
    """Open-set evaluation split of one dataset."""

    def __init__(self, dataset: Dataset, settings: Optional[EvalSettings] = None):
        self.dataset = dataset
        self.settings = s = settings or EvalSettings()
        ids = list(dataset.openset_ids)
        n_out = max(1, int(round(s.distractor_fraction * len(ids))))
        if n_out >= len(ids):
            raise ValueError("need at least one in-gallery identity")
        held = set(np.random.default_rng(s.split_seed).permutation(ids)[:n_out].tolist())
        self.distractor_classes = sorted(held)
        self.gallery_classes = [c for c in ids if c not in held]
        self.gallery_ids, self.query_ids = split_queries_galleries(
            dataset, s.gallery_per_class, s.query_per_class, s.split_seed, ids)
        gallery_set = set(self.gallery_ids)
        # Distractor identities contribute queries only.
        self.gallery_ids = [g for g in self.gallery_ids
                            if dataset.labels[dataset.indices_of([g])[0]] not in held]
        assert gallery_set >= set(self.gallery_ids)
        self.query_labels = dataset.labels[dataset.indices_of(self.query_ids)]
        self.pairs = E.make_pairs(self.query_ids, self.query_labels, s.n_genuine, s.n_impostor, s.pair_seed)

    def extract(self, checkpoints: Iterable[Checkpoint], store: Optional[G.FeatureStore] = None) -> G.FeatureStore:
        """Open-set features for every checkpoint not yet in ``store``."""
        store = store if store is not None else G.FeatureStore()
        idx = self.dataset.openset_indices()
        for c in checkpoints:
            if c.version not in store.dims:
                T.extract_features(c, self.dataset, idx, store)
        return store

    def gallery(self, store: G.FeatureStore, version: str, distance: str = "cosine") -> G.Gallery:
        return G.build_gallery(store, version, self.gallery_classes, distance, self.gallery_ids)

    def backfilled(self, store: G.FeatureStore, old_version: str, new_version: str, fraction: float,
                   distance: str = "cosine") -> G.Gallery:
        return G.partial_backfill(store, old_version, new_version, fraction, self.settings.backfill_seed,
                                  self.gallery_classes, distance, self.gallery_ids)

    def search(self, store: G.FeatureStore, query_version: str, gallery: G.Gallery | str,
               distance: str = "cosine") -> E.EvalReport:
        gv = gallery if isinstance(gallery, str) else ""
        if isinstance(gallery, str):
            gallery = self.gallery(store, gallery, distance)
        return E.search_1vN(store.matrix(self.query_ids, query_version), self.query_labels, gallery,
                            self.settings.fpir_targets, self.settings.ranks, query_version, gv)

    def verify(self, store: G.FeatureStore, query_version: str, gallery_version: str,
               distance: str = "cosine") -> E.EvalReport:
        return E.verify_1v1(store, query_version, gallery_version, self.pairs, self.settings.far_targets, distance)

    def evaluate(self, store: G.FeatureStore, query_version: str, gallery_version: str,
                 distance: str = "cosine") -> dict[str, E.EvalReport]:
        return {"search": self.search(store, query_version, gallery_version, distance),
                "verify": self.verify(store, query_version, gallery_version, distance)}


# ------------------------------------------------------------------ recipes


def desk_recipe(seed: int = 0, **overrides) -> TrainRecipe:
    """Default architecture, head and optimizer for the synthetic benchmark."""
    return replace(TrainRecipe(init_seed=seed), **overrides)


@dataclass
class Named:
    recipe: TrainRecipe
    old: Optional[str] = None  # name of the model this one is made compatible with


def standard_recipes(base: Optional[TrainRecipe] = None, lam: float = 1.0) -> dict[str, Named]:
    """Every model of the compatibility studies, keyed by version tag.

    Init seeds differ per model so that independently trained models start
    from independent weights.
    """
    base = base or desk_recipe()
    s = base.init_seed

    def r(version, k, **kw):
        return replace(base, version=version, init_seed=s * 1000 + k, **kw)

    bct = dict(bct_mode="influence", lam=lam)
    wider = base.embed_dim * 2
    deeper = [2 * d for d in base.hidden_dims]
    return {
        "old": Named(r("old", 1, data_fraction=0.5)),
        "new": Named(r("new", 2)),
        "beta": Named(r("beta", 3, **bct), "old"),
        "beta_kd": Named(r("beta_kd", 4, t_bct="new_kd", **bct), "old"),
        "beta_sys": Named(r("beta_sys", 5, t_bct="new_synth", **bct), "old"),
        "l2": Named(r("l2", 6, bct_mode="l2", lam=lam), "old"),
        "lwf": Named(r("lwf", 7, data_fraction=0.5, bct_mode="lwf", lam=lam), "old"),
        "beta_relu": Named(r("beta_relu", 8, relu_on_embedding=True, **bct), "old"),
        "beta_2x": Named(r("beta_2x", 9, embed_dim=wider, **bct), "old"),
        "beta_deep": Named(r("beta_deep", 10, hidden_dims=deeper, **bct), "old"),
        "new_2x": Named(r("new_2x", 11, embed_dim=wider)),
        "chain1": Named(r("chain1", 21, data_fraction=0.25)),
        "chain2": Named(r("chain2", 22, data_fraction=0.5, **bct), "chain1"),
        "chain3": Named(r("chain3", 23, data_fraction=1.0, **bct), "chain2"),
    }


class Zoo:
    """Trains named recipes on demand, each at most once."""

    def __init__(self, dataset: Dataset, recipes: dict[str, Named]):
        self.dataset = dataset
        self.recipes = recipes
        self.trained: dict[str, Checkpoint] = {}

    def __getitem__(self, name: str) -> Checkpoint:
        if name not in self.trained:
            if name not in self.recipes:
                raise KeyError(f"unknown recipe {name!r}")
            n = self.recipes[name]
            old = self[n.old] if n.old is not None else None
            self.trained[name] = T.train(n.recipe, self.dataset, old)
        return self.trained[name]

    def get(self, names: Sequence[str]) -> list[Checkpoint]:
        return [self[n] for n in names]


# ------------------------------------------------------------------ studies

PROTOCOLS = ("search", "verify")


def compat_summary(bench: Benchmark, store: G.FeatureStore, old: str, new: str,
                   paragon: Optional[str] = None, distance: str = "cosine") -> dict:
    """Self-test, cross-test, empirical criterion and update gain per protocol.

    With ``new == old`` the result is the baseline row: no verdict or gain.
    """
    out: dict = {"old": old, "new": new, "paragon": paragon, "protocols": {}}
    for proto in PROTOCOLS:
        run = bench.search if proto == "search" else bench.verify
        m_oo = run(store, old, old, distance).value
        row: dict = {"old_old": m_oo}
        if new == old:
            row["verdict"] = "baseline"
            out["protocols"][proto] = row
            continue
        row["new_old"] = m_no = run(store, new, old, distance).value
        row["new_new"] = run(store, new, new, distance).value
        ok = E.check_empirical_criterion(m_no, m_oo)
        row["verdict"] = "compatible" if ok else "incompatible"
        if paragon is not None:
            row["paragon"] = m_p = run(store, paragon, paragon, distance).value
            try:
                row["update_gain"] = E.update_gain(m_no, m_oo, m_p)
            except E.InvalidGainError:
                row["update_gain"] = None
        out["protocols"][proto] = row
    return out


def backfill_sweep(bench: Benchmark, store: G.FeatureStore, old_version: str, new_version: str,
                   fractions: Optional[Sequence[float]] = None, distance: str = "cosine") -> list[tuple[float, float]]:
    """Search accuracy of new-model queries as gallery classes are backfilled.

    Fraction 0 is the backward-compatibility test (new queries, old gallery);
    fraction 1 is the new model's self-test.
    """
    if fractions is None:
        fractions = [k / 10 for k in range(11)]
    out = []
    for f in fractions:
        g = bench.backfilled(store, old_version, new_version, f, distance)
        out.append((float(f), bench.search(store, new_version, g).value))
    return out


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    rho = spearmanr(x, y).statistic
    return float(rho) if not math.isnan(rho) else 0.0


def lambda_sweep(bench: Benchmark, dataset: Dataset, old: Checkpoint, base: TrainRecipe,
                 lams: Sequence[float] = (0.0, 0.5, 1.0, 4.0)) -> list[dict]:
    """Backward search accuracy of BCT models across influence weights."""
    store = bench.extract([old])
    out = []
    for i, lam in enumerate(lams):
        r = replace(base, version=f"lam{lam:g}", bct_mode="influence", lam=float(lam),
                    init_seed=base.init_seed + i)
        ck = T.train(r, dataset, old)
        bench.extract([ck], store)
        out.append({"lam": float(lam), "new_old": bench.search(store, ck.version, old.version).value,
                    "new_new": bench.search(store, ck.version, ck.version).value})
    return out


def settings_dict(settings: EvalSettings) -> dict:
    return asdict(settings)
