"""Influence-weight sweep: backward and self search accuracy of BCT models across lambda."""
import sys

sys.path.insert(0, __file__.rsplit("/", 1)[0])
from _common import emit, lab, parser  # noqa: E402

from bctlab import experiments as X  # noqa: E402


def main():
    p = parser(__doc__)
    p.add_argument("--lams", type=float, nargs="+", default=[0.0, 0.5, 1.0, 4.0])
    args = p.parse_args()
    ds, bench, zoo = lab(args.seed)
    old = zoo["old"]
    base = X.standard_recipes(X.desk_recipe(args.seed))["beta"].recipe
    rows = X.lambda_sweep(bench, ds, old, base, args.lams)
    oo = bench.search(bench.extract([old]), "old", "old").value
    emit(rows, args.json, f"old->old {oo:.3f}")


if __name__ == "__main__":
    main()
