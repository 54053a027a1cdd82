"""Command-line experiment runner.

Every command reads one JSON experiment config (validated against
``CONFIG_SCHEMA``), resolves the dataset and any named models it needs,
and writes its artifacts under ``<out>/<command>-<config hash>/``. Models
named in the config are loaded from ``paths.checkpoints`` when listed there
and trained from their recipe otherwise.

Exit status is 0 iff the artifact was fully written; failures print a JSON
error object on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional

import jsonschema

from . import datagen, experiments as X
from . import gallery as G
from . import trainer as T
from .nncore import SgdConfig

COMMANDS = ("gen", "train", "extract", "index", "eval", "compat", "chain", "backfill-sweep")

_names = {"type": "array", "items": {"type": "string"}, "minItems": 1}
_num = {"type": "number"}
_recipe = {
    "type": "object",
    "properties": {
        "hidden_dims": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "embed_dim": {"type": "integer", "minimum": 1},
        "head": {
            "type": "object",
            "properties": {
                "variant": {"enum": ["softmax", "norm_softmax", "cosine_margin"]},
                "scale": {"type": "number", "exclusiveMinimum": 0},
                "margin": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "data_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "bct_mode": {"enum": list(T.BCT_MODES)},
        "t_bct": {"enum": list(T.T_BCT)},
        "lam": {"type": ["number", "null"], "minimum": 0},
        "kd_temperature": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "relu_on_embedding": {"type": "boolean"},
        "distance": {"enum": ["cosine", "euclidean"]},
        "init_seed": {"type": "integer", "minimum": 0},
        "sgd": {
            "type": "object",
            "properties": {
                "learning_rate_schedule": {
                    "type": "array", "minItems": 1,
                    "items": {"type": "array", "prefixItems": [{"type": "integer"}, {"type": "number"}],
                              "minItems": 2, "maxItems": 2},
                },
                "weight_decay": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "rng_seed": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bctlab experiment config",
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "paths": {
            "type": "object",
            "properties": {
                "dataset": {"type": "string"},
                "checkpoints": {"type": "object", "additionalProperties": {"type": "string"}},
                "stores": {"type": "array", "items": {"type": "string"}},
                "gallery": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "data": {
            "type": "object",
            "properties": {
                "num_train_identities": {"type": "integer", "minimum": 1},
                "num_openset_identities": {"type": "integer", "minimum": 1},
                "samples_per_identity": {"type": "integer", "minimum": 1},
                "input_dim": {"type": "integer", "minimum": 1},
                "class_separation": {"type": "number", "minimum": 0},
                "latent_dim": {"type": "integer", "minimum": 1},
                "mixing_gain": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "eval": {
            "type": "object",
            "properties": {
                "gallery_per_class": {"type": "integer", "minimum": 1},
                "query_per_class": {"type": "integer", "minimum": 1},
                "distractor_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "n_genuine": {"type": "integer", "minimum": 1},
                "n_impostor": {"type": "integer", "minimum": 1},
                "far_targets": {"type": "array", "items": _num, "minItems": 1},
                "fpir_targets": {"type": "array", "items": _num, "minItems": 1},
                "ranks": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "split_seed": {"type": "integer", "minimum": 0},
                "pair_seed": {"type": "integer", "minimum": 0},
                "backfill_seed": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "lam": {"type": "number", "minimum": 0},
        "base_recipe": _recipe,
        "recipes": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {"recipe": _recipe, "old": {"type": ["string", "null"]}},
                "additionalProperties": False,
            },
        },
        "train": {"type": "object", "properties": {"models": _names}, "additionalProperties": False},
        "extract": {
            "type": "object",
            "properties": {"models": _names, "samples": {"enum": ["openset", "all"]}},
            "additionalProperties": False,
        },
        "index": {
            "type": "object",
            "properties": {
                "version": {"type": "string"},
                "new_version": {"type": "string"},
                "fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
            "required": ["version"],
            "additionalProperties": False,
        },
        "evaluate": {
            "type": "object",
            "properties": {
                "protocol": {"enum": ["search", "verify"]},
                "query": {"type": "string"},
                "gallery": {"type": "string"},
            },
            "required": ["protocol", "query", "gallery"],
            "additionalProperties": False,
        },
        "compat": {
            "type": "object",
            "properties": {
                "old": {"type": "string"},
                "new": {"type": "string"},
                "paragon": {"type": ["string", "null"]},
            },
            "required": ["old", "new"],
            "additionalProperties": False,
        },
        "chain": {"type": "object", "properties": {"models": _names}, "additionalProperties": False},
        "backfill": {
            "type": "object",
            "properties": {
                "old": {"type": "string"},
                "new": {"type": "string"},
                "fractions": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                              "minItems": 1},
            },
            "required": ["old", "new"],
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg)).hexdigest()


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None


class Context:
    """Resolved config plus lazily built dataset, benchmark and models."""

    def __init__(self, cfg: dict, out: Path, command: str):
        self.cfg = cfg
        self.seed = int(cfg.get("seed", 0))
        self.hash = config_hash(cfg)
        self.dir = out / f"{command}-{self.hash[:12]}"
        self.paths = cfg.get("paths", {})
        self.inputs: dict[str, str] = {}
        self._dataset = None
        self._bench = None
        self._zoo = None
        self._store = None

    # ---------------------------------------------------------------- inputs

    @property
    def dataset(self) -> datagen.Dataset:
        if self._dataset is None:
            p = self.paths.get("dataset")
            if p:
                self._dataset = datagen.load(p)
                stem = Path(p).with_suffix("") if Path(p).suffix == ".jsonl" else Path(p)
                self.inputs["dataset"] = git_blob_hash(stem.with_suffix(".jsonl").read_bytes())
            else:
                spec = datagen.SyntheticSpec(**{"rng_seed": self.seed, **self.cfg.get("data", {})})
                self._dataset = datagen.generate(spec)
        return self._dataset

    @property
    def bench(self) -> X.Benchmark:
        if self._bench is None:
            self._bench = X.Benchmark(self.dataset, X.EvalSettings(**self.cfg.get("eval", {})))
        return self._bench

    def base_recipe(self) -> T.TrainRecipe:
        over = dict(self.cfg.get("base_recipe", {}))
        base = X.desk_recipe(self.seed)
        if "head" in over:
            over["head"] = T.HeadSpec(**{**asdict(base.head), **over["head"]})
        if "sgd" in over:
            sgd = asdict(base.sgd)
            sgd.update(over["sgd"])
            sgd["learning_rate_schedule"] = [tuple(x) for x in sgd["learning_rate_schedule"]]
            over["sgd"] = SgdConfig(**sgd)
        return replace(base, **over)

    @property
    def zoo(self) -> X.Zoo:
        if self._zoo is None:
            recipes = X.standard_recipes(self.base_recipe(), float(self.cfg.get("lam", 1.0)))
            for name, entry in self.cfg.get("recipes", {}).items():
                base = recipes[name].recipe if name in recipes else replace(self.base_recipe(), version=name)
                d = base.to_dict()
                for k, v in entry.get("recipe", {}).items():
                    d[k] = {**d[k], **v} if isinstance(v, dict) else v
                d["version"] = name
                old = entry["old"] if "old" in entry else (recipes[name].old if name in recipes else None)
                recipes[name] = X.Named(T.TrainRecipe.from_dict(d), old)
            self._zoo = X.Zoo(self.dataset, recipes)
            for name, path in self.paths.get("checkpoints", {}).items():
                ck = T.load_checkpoint(path)
                self._zoo.trained[name] = ck
                self.inputs[f"checkpoint:{name}"] = git_blob_hash((Path(path) / "params.bin").read_bytes())
        return self._zoo

    def model(self, name: str) -> T.Checkpoint:
        ck = self.zoo[name]
        self.inputs.setdefault(f"checkpoint:{name}", ck.digest())
        return ck

    def store(self, names) -> G.FeatureStore:
        """Open-set features for ``names``: from ``paths.stores`` or extracted."""
        if self._store is None:
            self._store = G.FeatureStore()
            for p in self.paths.get("stores", []):
                self._store.merge(G.FeatureStore.load(p))
                self.inputs[f"store:{Path(p).name}"] = git_blob_hash(Path(p).read_bytes())
        missing = [n for n in names if self.version_of(n) not in self._store.dims]
        self.bench.extract([self.model(n) for n in missing], self._store)
        return self._store

    def version_of(self, name: str) -> str:
        if name in self.paths.get("checkpoints", {}) or (self._zoo and name in self._zoo.trained):
            return self.zoo[name].version
        if name in self.zoo.recipes:
            return self.zoo.recipes[name].recipe.version
        return name

    def distance(self, name: str) -> str:
        if name in self.zoo.recipes or name in self.zoo.trained:
            return self.model(name).recipe.distance
        return "cosine"

    # --------------------------------------------------------------- outputs

    def write(self, name: str, data: bytes | str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        p.write_bytes(data.encode() if isinstance(data, str) else data)
        return p

    def report(self, command: str, body: dict) -> dict:
        return {"command": command, "config_hash": self.hash, "inputs": dict(sorted(self.inputs.items())),
                **body}


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ commands


def cmd_gen(ctx: Context) -> dict:
    ds = ctx.dataset
    data_path, spec_path = datagen.save(ds, ctx.dir / "dataset")
    b = ctx.bench
    splits = {"gallery_ids": b.gallery_ids, "query_ids": b.query_ids, "gallery_classes": b.gallery_classes,
              "distractor_classes": b.distractor_classes,
              "pairs": [[a, c, g] for a, c, g in b.pairs]}
    ctx.write("splits.json", _json(splits))
    ctx.inputs["dataset"] = git_blob_hash(data_path.read_bytes())
    return ctx.report("gen", {"dataset": str(data_path), "spec": str(spec_path), "samples": len(ds)})


def cmd_train(ctx: Context) -> dict:
    names = ctx.cfg.get("train", {}).get("models", ["old"])
    for n in names:
        ctx.model(n)
    saved = {}
    for n, ck in sorted(ctx.zoo.trained.items()):
        T.save_checkpoint(ck, ctx.dir / "checkpoints" / n)
        saved[n] = {"digest": ck.digest(), "old": ck.old_version, "final_loss": ck.log[-1]["loss"]}
    return ctx.report("train", {"checkpoints": saved})


def cmd_extract(ctx: Context) -> dict:
    spec = ctx.cfg.get("extract", {})
    names = spec.get("models", ["old"])
    written = {}
    for n in names:
        ck = ctx.model(n)
        idx = None if spec.get("samples", "openset") == "all" else ctx.dataset.openset_indices()
        st = T.extract_features(ck, ctx.dataset, idx)
        p = st.save(ctx.dir / f"features-{ck.version}.bctf")
        written[n] = {"path": str(p), "records": len(st), "hash": git_blob_hash(p.read_bytes())}
    return ctx.report("extract", {"stores": written})


def _gallery(ctx: Context, spec: dict) -> G.Gallery:
    v = spec["version"]
    nv = spec.get("new_version")
    names = [v] + ([nv] if nv else [])
    store = ctx.store(names)
    dist = ctx.distance(v)
    if nv is None:
        return ctx.bench.gallery(store, ctx.version_of(v), dist)
    return ctx.bench.backfilled(store, ctx.version_of(v), ctx.version_of(nv), spec.get("fraction", 1.0), dist)


def cmd_index(ctx: Context) -> dict:
    spec = ctx.cfg.get("index")
    if spec is None:
        raise ConfigError("index needs an 'index' section")
    g = _gallery(ctx, spec)
    p = g.save(ctx.dir / "gallery.json")
    prov = g.provenance()
    counts: dict[str, int] = {}
    for v in prov.values():
        counts[v] = counts.get(v, 0) + 1
    return ctx.report("index", {"gallery": str(p), "classes": len(g), "provenance_counts": counts})


def cmd_eval(ctx: Context) -> dict:
    spec = ctx.cfg.get("evaluate")
    if spec is None:
        raise ConfigError("eval needs an 'evaluate' section")
    q, g = spec["query"], spec["gallery"]
    dist = ctx.distance(g)
    if spec["protocol"] == "search":
        if "gallery" in ctx.paths:
            store = ctx.store([q])
            gal = G.Gallery.load(ctx.paths["gallery"])
            ctx.inputs["gallery"] = git_blob_hash(Path(ctx.paths["gallery"]).read_bytes())
            rep = ctx.bench.search(store, ctx.version_of(q), gal)
        else:
            store = ctx.store([q, g])
            rep = ctx.bench.search(store, ctx.version_of(q), ctx.version_of(g), dist)
    else:
        store = ctx.store([q, g])
        rep = ctx.bench.verify(store, ctx.version_of(q), ctx.version_of(g), dist)
    ctx.write("curve.csv", rep.curve_csv())
    return ctx.report("eval", {"report": rep.to_dict()})


def cmd_compat(ctx: Context) -> dict:
    spec = ctx.cfg.get("compat")
    if spec is None:
        raise ConfigError("compat needs a 'compat' section")
    old, new, par = spec["old"], spec["new"], spec.get("paragon")
    names = [old, new] + ([par] if par else [])
    store = ctx.store(names)
    same = ctx.model(old).digest() == ctx.model(new).digest()
    summary = X.compat_summary(ctx.bench, store, ctx.version_of(old),
                               ctx.version_of(old) if same else ctx.version_of(new),
                               None if (same or not par) else ctx.version_of(par), ctx.distance(old))
    if same:
        summary["new"] = ctx.version_of(new)
        summary["verdict"] = "baseline"
    return ctx.report("compat", {"summary": summary})


def cmd_chain(ctx: Context) -> dict:
    names = ctx.cfg.get("chain", {}).get("models", ["chain1", "chain2", "chain3"])
    recipes = ctx.zoo.recipes
    for a, b in zip(names, names[1:]):
        if b not in recipes or recipes[b].old != a:
            raise ConfigError(f"chain model {b!r} must be trained against {a!r}")
    store = ctx.store(names)
    vs = [ctx.version_of(n) for n in names]
    table = {}
    for i, q in enumerate(vs):
        for g in vs[:i + 1]:
            r = ctx.bench.evaluate(store, q, g, ctx.distance(names[0]))
            table[f"{q}|{g}"] = {p: r[p].value for p in X.PROTOCOLS}
    verdicts = {}
    for i in range(1, len(vs)):
        for j in range(i):
            for p in X.PROTOCOLS:
                verdicts[f"{vs[i]}|{vs[j]}|{p}"] = table[f"{vs[i]}|{vs[j]}"][p] > table[f"{vs[j]}|{vs[j]}"][p]
    for n in names:
        T.save_checkpoint(ctx.model(n), ctx.dir / "checkpoints" / n)
    return ctx.report("chain", {"models": vs, "metrics": table, "criterion": verdicts})


def cmd_backfill_sweep(ctx: Context) -> dict:
    spec = ctx.cfg.get("backfill")
    if spec is None:
        raise ConfigError("backfill-sweep needs a 'backfill' section")
    old, new = spec["old"], spec["new"]
    store = ctx.store([old, new])
    pts = X.backfill_sweep(ctx.bench, store, ctx.version_of(old), ctx.version_of(new),
                           spec.get("fractions"), ctx.distance(old))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fraction", "tpir"])
    for f, v in pts:
        w.writerow([repr(f), repr(v)])
    ctx.write("backfill.csv", buf.getvalue())
    rho = X.spearman([f for f, _ in pts], [v for _, v in pts])
    return ctx.report("backfill-sweep", {"points": [list(p) for p in pts], "spearman": rho})


HANDLERS = {
    "gen": cmd_gen, "train": cmd_train, "extract": cmd_extract, "index": cmd_index, "eval": cmd_eval,
    "compat": cmd_compat, "chain": cmd_chain, "backfill-sweep": cmd_backfill_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bctlab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="experiment config (JSON); defaults to an empty config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default="runs", help="output directory")
    return p


def load_config(path: Optional[str], seed: Optional[int]) -> dict:
    cfg = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        if seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg["seed"] = seed
    validate(cfg)
    return cfg


def run(command: str, cfg: dict, out) -> tuple[dict, Path]:
    ctx = Context(cfg, Path(out), command)
    rep = HANDLERS[command](ctx)
    path = ctx.write("report.json", _json(rep))
    return rep, path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        rep, path = run(args.command, cfg, args.out)
    except ConfigError as e:
        print(json.dumps({"error": "ConfigError", "message": str(e), "command": args.command}), file=sys.stderr)
        return 2
    except Exception as e:  # every module error becomes a machine-readable failure
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}),
              file=sys.stderr)
        return 1
    print(json.dumps({"report": str(path), "config_hash": rep["config_hash"]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
