"""Partial backfill: search accuracy as gallery classes move to the new model."""
import sys

sys.path.insert(0, __file__.rsplit("/", 1)[0])
from _common import emit, lab, parser  # noqa: E402

from bctlab import experiments as X  # noqa: E402


def main():
    p = parser(__doc__)
    p.add_argument("--new", default="beta", help="model replacing the old one (beta, new, l2, ...)")
    args = p.parse_args()
    _, bench, zoo = lab(args.seed, args.lam)
    store = bench.extract(zoo.get(["old", args.new]))
    pts = X.backfill_sweep(bench, store, "old", args.new)
    emit([{"fraction": f, "tpir": v} for f, v in pts], args.json)
    print(f"spearman {X.spearman(*zip(*pts)):.3f}")


if __name__ == "__main__":
    main()
