"""Compatibility table: old/new/BCT variants and baselines against the old gallery.

For each model, prints the self-test, the backward cross-test against the
old model, the empirical-criterion verdict and the update gain (paragon: the
independently trained new model), on both search and verification.
"""
import sys
import time

sys.path.insert(0, __file__.rsplit("/", 1)[0])
from _common import emit, lab, parser  # noqa: E402

from bctlab import experiments as X  # noqa: E402

MODELS = ["new", "beta", "beta_kd", "beta_sys", "l2", "lwf", "beta_relu", "beta_2x", "beta_deep"]


def main():
    args = parser(__doc__).parse_args()
    t0 = time.time()
    _, bench, zoo = lab(args.seed, args.lam)
    store = bench.extract(zoo.get(["old"] + MODELS))
    rows = []
    for m in ["old"] + MODELS:
        s = X.compat_summary(bench, store, "old", m, None if m in ("old", "new") else "new")["protocols"]
        for p in X.PROTOCOLS:
            r = s[p]
            rows.append({"model": m, "protocol": p, "old_old": r["old_old"], "new_old": r.get("new_old", r["old_old"]),
                         "new_new": r.get("new_new", r["old_old"]), "verdict": r["verdict"],
                         "gain": r.get("update_gain") if r.get("update_gain") is not None else "-"})
    emit(rows, args.json)
    print(f"# {time.time() - t0:.1f}s", file=sys.stderr)


if __name__ == "__main__":
    main()
