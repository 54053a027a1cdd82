"""Training runs for old, new, baseline and backward-compatible models.

A run minimizes the new model's own classification loss plus, depending on
``bct_mode``, a weighted second term tied to a frozen old checkpoint:

* ``l2``: half squared distance to old features on the old training set
* ``influence``: cross-entropy of new features through the old classifier,
  on the old training set (``t_bct="old"``) or on all training data with
  new classes served by synthesized weights (``"new_synth"``) or by
  distillation (``"new_kd"``)
* ``lwf``: old-classifier cross-entropy against the old model's soft labels
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import heads as H
from .datagen import Dataset
from .gallery import FeatureStore
from .nncore import DimensionError, EmbeddingModel, LayerSpec, SgdConfig, l2norm_forward, mlp_specs, sgd_step

log = logging.getLogger(__name__)

BCT_MODES = ("none", "l2", "influence", "lwf")
T_BCT = ("old", "new_synth", "new_kd")
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: Optional[int], loss: float, reason: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {reason} (loss={loss})")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class HeadSpec:
    variant: str = "cosine_margin"
    scale: float = 16.0
    margin: float = 0.25


@dataclass
class TrainRecipe:
    version: str = "model"
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    embed_dim: int = 16
    head: HeadSpec = field(default_factory=HeadSpec)
    data_fraction: float = 1.0
    bct_mode: str = "none"
    t_bct: str = "old"
    lam: Optional[float] = None
    kd_temperature: Optional[float] = None
    relu_on_embedding: bool = False
    distance: str = "cosine"
    init_seed: int = 0
    sgd: SgdConfig = field(default_factory=SgdConfig)

    def __post_init__(self):
        if isinstance(self.head, dict):
            self.head = HeadSpec(**self.head)
        if isinstance(self.sgd, dict):
            self.sgd = SgdConfig(**self.sgd)
        self.hidden_dims = [int(d) for d in self.hidden_dims]
        if self.bct_mode not in BCT_MODES:
            raise ValueError(f"bct_mode must be one of {BCT_MODES}")
        if self.t_bct not in T_BCT:
            raise ValueError(f"t_bct must be one of {T_BCT}")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must lie in (0, 1]")
        if self.bct_mode != "none" and self.lam is None:
            raise ValueError("lam is required when bct_mode is set")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.distance not in ("cosine", "euclidean"):
            raise ValueError("distance must be 'cosine' or 'euclidean'")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")

    def layer_specs(self, input_dim: int) -> list[LayerSpec]:
        return mlp_specs([input_dim, *self.hidden_dims, self.embed_dim], self.relu_on_embedding)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sgd"]["learning_rate_schedule"] = [list(x) for x in self.sgd.learning_rate_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRecipe":
        return cls(**d)


@dataclass
class Checkpoint:
    model: EmbeddingModel
    head: H.ClassifierHead
    recipe: TrainRecipe
    log: list[dict]
    version: str
    old_version: Optional[str] = None
    old_digest: Optional[str] = None

    def blob(self) -> bytes:
        arrays = self.model.params + self.head.params()
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)

    def manifest(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "version": self.version,
            "recipe": self.recipe.to_dict(),
            "layers": [s.to_dict() for s in self.model.specs],
            "param_shapes": [list(s) for s in self.model.param_shapes()],
            "head": {
                "variant": self.head.variant,
                "scale": self.head.scale,
                "margin": self.head.margin,
                "class_ids": self.head.class_ids,
                "param_shapes": [list(p.shape) for p in self.head.params()],
            },
            "log": self.log,
            "old_version": self.old_version,
            "old_digest": self.old_digest,
        }

    def digest(self) -> str:
        """Content hash over parameters and manifest."""
        h = hashlib.sha256(self.blob())
        h.update(json.dumps(self.manifest(), sort_keys=True).encode())
        return h.hexdigest()

    def embed(self, x) -> np.ndarray:
        """Embeddings as used for comparison (normalized for cosine distance)."""
        z = self.model.forward(x)
        return l2norm_forward(z) if self.recipe.distance == "cosine" else z


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "params.bin").write_bytes(ckpt.blob())
    (d / "manifest.json").write_text(json.dumps(ckpt.manifest(), indent=2, sort_keys=True))
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    if man.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {man.get('format')}")
    flat = np.frombuffer((d / "params.bin").read_bytes(), dtype="<f8")
    shapes = [tuple(s) for s in man["param_shapes"]] + [tuple(s) for s in man["head"]["param_shapes"]]
    total = sum(int(np.prod(s)) for s in shapes)
    if flat.size != total:
        raise ValueError(f"parameter blob holds {flat.size} values, manifest needs {total}")
    arrays, k = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[k:k + n].reshape(s).astype(np.float64))
        k += n
    n_model = len(man["param_shapes"])
    model = EmbeddingModel([LayerSpec.from_dict(x) for x in man["layers"]], arrays[:n_model])
    hm = man["head"]
    hp = arrays[n_model:]
    head = H.ClassifierHead(hm["variant"], hp[0], hm["class_ids"], hp[1] if len(hp) > 1 else None,
                            hm["scale"], hm["margin"])
    return Checkpoint(model, head, TrainRecipe.from_dict(man["recipe"]), man["log"], man["version"],
                      man.get("old_version"), man.get("old_digest"))


# ------------------------------------------------------------------ training


class _SecondTerm:
    """Mode-specific loss tied to the frozen old checkpoint.

    Returns ``(loss, grad)`` for a batch where ``grad`` already carries the
    per-sample weighting that turns batch means into the summed objective.
    """

    def __init__(self, recipe: TrainRecipe, old: Checkpoint, x: np.ndarray, y: np.ndarray):
        self.mode = recipe.bct_mode
        self.t_bct = recipe.t_bct
        self.old_head = old.head
        self.temperature = recipe.kd_temperature
        self.in_old = np.isin(y, np.asarray(old.head.class_ids))
        if self.mode == "l2" and recipe.embed_dim != old.model.embed_dim:
            raise DimensionError("the l2 baseline needs equal old and new embedding dims")
        if recipe.embed_dim < old.head.embed_dim:
            raise DimensionError("new embedding narrower than the old classifier")
        self.old_feats = old.model.forward(x) if self.mode in ("l2", "lwf") or self.t_bct == "new_kd" else None
        if self.mode == "influence" and self.t_bct == "new_synth":
            groups = {int(c): x[y == c] for c in np.unique(y[~self.in_old])}
            self.old_head = H.extend_head(old.head, old.model, groups)
        if self.mode == "lwf":
            self.soft = H.softmax(H.head_logits(old.head, self.old_feats))

    def __call__(self, z: np.ndarray, y: np.ndarray, rows: np.ndarray) -> tuple[float, np.ndarray]:
        b = z.shape[0]
        grad = np.zeros_like(z)
        loss = 0.0
        if self.mode == "lwf":
            lv = H.lwf_loss(z, self.old_head, self.soft[rows])
            return lv.loss, lv.grads["embeddings"]
        if self.mode == "influence" and self.t_bct == "new_synth":
            lv = H.influence_loss(z, self.old_head, y)
            return lv.loss, lv.grads["embeddings"]
        m = self.in_old[rows]
        if m.any():
            if self.mode == "l2":
                lv = H.l2_feature_regularizer(z[m], self.old_feats[rows[m]])
            else:
                lv = H.influence_loss(z[m], self.old_head, y[m])
            w = m.sum() / b
            loss += w * lv.loss
            grad[m] = w * lv.grads["embeddings"]
        if self.mode == "influence" and self.t_bct == "new_kd" and not m.all():
            n = ~m
            lv = H.kd_influence_loss(z[n], self.old_feats[rows[n]], self.old_head, self.temperature)
            w = n.sum() / b
            loss += w * lv.loss
            grad[n] = w * lv.grads["embeddings"]
        return loss, grad


def train(recipe: TrainRecipe, dataset: Dataset, old: Optional[Checkpoint] = None,
          on_epoch: Optional[Callable[[int, EmbeddingModel, H.ClassifierHead], None]] = None) -> Checkpoint:
    """Train one model on the identity subset ``recipe.data_fraction``.

    ``on_epoch`` is called after every epoch with read-only access to the
    model and head (for monitoring; it must not mutate them).
    """
    if recipe.bct_mode != "none" and old is None:
        raise ValueError(f"bct_mode={recipe.bct_mode!r} needs an old checkpoint")
    idx = dataset.train_indices(recipe.data_fraction)
    x, y = dataset.inputs[idx], dataset.labels[idx]
    class_ids = sorted(int(c) for c in np.unique(y))
    if len(class_ids) < 2:
        raise ValueError("need at least two training classes")

    rng = np.random.default_rng(recipe.init_seed)
    model = EmbeddingModel.init(recipe.layer_specs(dataset.spec.input_dim), rng)
    hs = recipe.head
    head = H.ClassifierHead.init(hs.variant, recipe.embed_dim, class_ids, rng, hs.scale, hs.margin)
    cols = head.columns(y)

    old_digest = old.digest() if old is not None else None
    second = _SecondTerm(recipe, old, x, y) if recipe.bct_mode != "none" else None
    lam = recipe.lam or 0.0

    sgd = recipe.sgd
    order_rng = np.random.default_rng(sgd.rng_seed)
    history: list[dict] = []
    initial = None
    over = 0
    for epoch in range(sgd.epochs):
        perm = order_rng.permutation(len(y))
        tot = main = aux = 0.0
        nb = 0
        for bi, start in enumerate(range(0, len(y), sgd.batch_size)):
            rows = perm[start:start + sgd.batch_size]
            z, cache = model.forward(x[rows], keep_cache=True)
            logits, hc = H.head_forward(head, z, y[rows])
            ce = H.cross_entropy(logits, cols[rows])
            gz, gw, gb = H.head_backward(head, hc, ce.grads["logits"])
            batch_loss = ce.loss
            if second is not None:
                l2, g2 = second(z, y[rows], rows)
                aux += l2
                if lam != 0.0:
                    gz = gz + lam * g2
                    batch_loss += lam * l2
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(epoch, bi, batch_loss, "non-finite loss")
            _, grads = model.backward(gz, cache)
            head_grads = [gw] if gb is None else [gw, gb]
            sgd_step(model.params + head.params(), grads + head_grads, sgd, epoch)
            tot += batch_loss
            main += ce.loss
            nb += 1
        entry = {"epoch": epoch, "loss": tot / nb, "main": main / nb}
        if second is not None:
            entry["aux"] = aux / nb
        history.append(entry)
        log.debug("%s epoch %d loss %.5f", recipe.version, epoch, entry["loss"])
        if on_epoch is not None:
            on_epoch(epoch, model, head)
        if initial is None:
            initial = entry["loss"]
        over = over + 1 if entry["loss"] > 10 * initial else 0
        if over >= 3:
            raise TrainingDiverged(epoch, None, entry["loss"], "loss above 10x initial for 3 epochs")

    if old is not None and old.digest() != old_digest:
        raise RuntimeError("old checkpoint was modified during training")
    return Checkpoint(model, head, recipe, history, recipe.version,
                      old.version if old is not None and recipe.bct_mode != "none" else None,
                      old_digest if recipe.bct_mode != "none" else None)


def train_chain(recipes: Sequence[TrainRecipe], dataset: Dataset) -> list[Checkpoint]:
    """Train models in sequence, each against the previous one only."""
    if not recipes:
        raise ValueError("empty chain")
    out: list[Checkpoint] = []
    for i, r in enumerate(recipes):
        if i == 0 and r.bct_mode != "none":
            raise ValueError("the first model of a chain has no old model")
        out.append(train(r, dataset, out[-1] if i else None))
    return out


def extract_features(ckpt: Checkpoint, dataset: Dataset, indices=None,
                     store: Optional[FeatureStore] = None) -> FeatureStore:
    """Add one record per sample, tagged with the checkpoint version."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    x = dataset.inputs[idx]
    if x.shape[1] != ckpt.model.input_dim:
        raise DimensionError("sample dim does not match the model input")
    feats = ckpt.embed(x)
    store = store if store is not None else FeatureStore()
    store.add_many([dataset.sample_ids[i] for i in idx], dataset.labels[idx], ckpt.version, feats)
    return store
