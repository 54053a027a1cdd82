"""Chain study: three sequential BCT updates on 25%/50%/100% of the identities."""
import sys

sys.path.insert(0, __file__.rsplit("/", 1)[0])
from _common import emit, lab, parser  # noqa: E402

from bctlab import experiments as X  # noqa: E402


def main():
    args = parser(__doc__).parse_args()
    _, bench, zoo = lab(args.seed, args.lam)
    names = ["chain1", "chain2", "chain3"]
    store = bench.extract(zoo.get(names))
    rows = []
    for i, q in enumerate(names):
        for g in names[:i + 1]:
            r = bench.evaluate(store, q, g)
            rows.append({"query": q, "gallery": g, **{p: r[p].value for p in X.PROTOCOLS}})
    emit(rows, args.json)


if __name__ == "__main__":
    main()
