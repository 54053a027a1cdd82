"""Shared setup for the experiment drivers."""
import argparse
import json

from bctlab import datagen, experiments as X


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc.strip().splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="dataset and model seed")
    p.add_argument("--lam", type=float, default=1.0, help="influence loss weight")
    p.add_argument("--json", action="store_true", help="print machine-readable results")
    return p


def lab(seed: int, lam: float = 1.0):
    ds = datagen.generate(datagen.SyntheticSpec(rng_seed=seed))
    return ds, X.Benchmark(ds), X.Zoo(ds, X.standard_recipes(X.desk_recipe(seed), lam))


def emit(rows, as_json: bool, preamble: str = "") -> None:
    if as_json:
        print(json.dumps(rows, indent=2, sort_keys=True))
        return
    if preamble:
        print(preamble)
    if rows:
        print("  ".join(f"{k:>12}" for k in rows[0]))
    for r in rows:
        print("  ".join(f"{v:>12.3f}" if isinstance(v, float) else f"{str(v):>12}" for v in r.values()))
