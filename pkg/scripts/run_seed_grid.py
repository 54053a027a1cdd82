"""Seed robustness: old/new/BCT search and verification accuracy over several seeds."""
import sys

sys.path.insert(0, __file__.rsplit("/", 1)[0])
from _common import emit, lab, parser  # noqa: E402

PAIRS = [("old", "old"), ("new", "new"), ("new", "old"), ("beta", "old"), ("beta", "beta")]


def main():
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    rows = []
    for s in args.seeds:
        _, bench, zoo = lab(s, args.lam)
        store = bench.extract(zoo.get(["old", "new", "beta"]))
        for q, g in PAIRS:
            r = bench.evaluate(store, q, g)
            rows.append({"seed": s, "pair": f"{q}->{g}", "search": r["search"].value, "verify": r["verify"].value})
    emit(rows, args.json)


if __name__ == "__main__":
    main()
