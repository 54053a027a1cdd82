import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bctlab import evalproto as E
from bctlab import gallery as G
from bctlab.nncore import DimensionError

N_ORACLE = 200  # random score instances per oracle comparison


def brute_rate(pos, neg, target, ok=None):
    """Exhaustive sweep over the admissible thresholds.

    Admissible: every observed negative score (accept ``score >= t``), plus
    "above every negative" (accept ``score > max(neg)``). The best true rate
    among thresholds whose false rate stays within target is returned.
    """
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    ok = np.ones(pos.size, bool) if ok is None else np.asarray(ok, bool)
    best = float(np.mean((pos > neg.max()) & ok))
    for t in neg:
        if np.sum(neg >= t) <= target * neg.size + 1e-9:
            best = max(best, float(np.mean((pos >= t) & ok)))
    return best


def test_worked_threshold_example():
    op = E.rate_at([0.9, 0.8, 0.4], [0.7, 0.3, 0.2, 0.1], 0.25)
    assert op.value == pytest.approx(2 / 3)
    assert op.achieved == pytest.approx(0.25)


def test_perfect_separation_gives_full_rate():
    for t in (0.0, 1e-3, 0.1, 1.0):
        assert E.rate_at([0.9, 0.95], [0.1, 0.2, 0.3], t).value == 1.0


def test_rate_matches_brute_force_sweep():
    rng = np.random.default_rng(0)
    for k in range(N_ORACLE):
        n_pos, n_neg = rng.integers(1, 30), rng.integers(1, 60)
        levels = 5 if k % 2 else 1000  # coarse levels force ties
        pos = rng.integers(0, levels, n_pos) / levels + 0.2
        neg = rng.integers(0, levels, n_neg) / levels
        target = float(rng.choice([0.0, 1e-2, 0.05, 0.1, 0.25, 0.5, rng.uniform()]))
        ok = rng.random(n_pos) < 0.8 if k % 3 == 0 else None
        assert E.rate_at(pos, neg, target, ok).value == brute_rate(pos, neg, target, ok)


def test_search_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(60):
        n_cls, dim = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        protos = rng.normal(size=(n_cls, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        g = G.Gallery("cosine").update({c: G.Prototype(protos[c], "v") for c in range(n_cls)})
        nq = int(rng.integers(4, 20))
        labels = rng.integers(0, n_cls + 2, nq)
        labels[0], labels[1] = 0, n_cls  # at least one known and one unknown query
        q = rng.normal(size=(nq, dim))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        target = float(rng.choice([0.0, 0.1, 0.3, 1.0]))
        rep = E.search_1vN(q, labels, g, (target,), ranks=(1, 2))
        best_s, best_c = [], []
        for qi in q:
            sims = [float(qi @ protos[c]) for c in range(n_cls)]
            j = int(np.argmax(sims))
            best_s.append(sims[j])
            best_c.append(j)
        best_s, best_c = np.array(best_s), np.array(best_c)
        known = labels < n_cls
        ref = brute_rate(best_s[known], best_s[~known], target, best_c[known] == labels[known])
        assert rep.value == pytest.approx(ref, abs=1e-12)
        top2 = np.argsort(-(q @ protos.T), axis=1)[:, :2]
        assert rep.retrieval_rates[2] == pytest.approx(np.mean([labels[i] in top2[i] for i in np.flatnonzero(known)]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.lists(st.floats(-1, 1), min_size=1, max_size=20),
       st.floats(0, 1), st.floats(0, 1))
def test_true_rate_nondecreasing_in_target(pos, neg, a, b):
    lo, hi = sorted((a, b))
    assert E.rate_at(pos, neg, lo).value <= E.rate_at(pos, neg, hi).value
    assert E.rate_at(pos, neg, hi).achieved <= hi + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.lists(st.floats(-1, 1), min_size=1, max_size=20))
def test_curve_is_monotone_and_bounded(pos, neg):
    pts = E.curve(pos, neg)
    fars = [p[0] for p in pts]
    tars = [p[1] for p in pts]
    assert fars == sorted(fars) and tars == sorted(tars)
    assert all(0 <= v <= 1 for v in fars + tars)


def test_select_threshold_falls_back_to_strict():
    t, strict = E.select_threshold([0.5, 0.5], 0.1)
    assert t == 0.5 and strict
    assert E.rate_at([0.5, 0.6], [0.5, 0.5], 0.1).value == 0.5


# ---- protocols


def _store(rng, n=12, dim=4, versions=("a", "b")):
    s = G.FeatureStore()
    ids = [f"s{i}" for i in range(n)]
    labels = np.arange(n) % 3
    for v in versions:
        s.add_many(ids, labels, v, rng.normal(size=(n, dim)))
    return s, ids, labels


def test_verify_cross_model_uses_first_member_from_a():
    rng = np.random.default_rng(2)
    s, ids, labels = _store(rng)
    pairs = E.make_pairs(ids, labels, 100, 100, seed=0)
    rep = E.verify_1v1(s, "a", "b", pairs, (0.1, 0.5))
    fa = s.matrix([p[0] for p in pairs], "a")
    fb = s.matrix([p[1] for p in pairs], "b")
    sc = E.pair_scores(fa, fb)
    gen = np.array([p[2] for p in pairs])
    assert rep.at(0.1) == pytest.approx(brute_rate(sc[gen], sc[~gen], 0.1))
    assert rep.protocol == "verify_1v1" and rep.query_version == "a"


def test_verify_self_is_invariant_to_pair_order():
    rng = np.random.default_rng(3)
    s, ids, labels = _store(rng)
    pairs = E.make_pairs(ids, labels, 100, 100, seed=1)
    swapped = [(b, a, g) for a, b, g in pairs]
    assert E.verify_1v1(s, "a", "a", pairs).value == E.verify_1v1(s, "a", "a", swapped).value


def test_verify_errors():
    rng = np.random.default_rng(4)
    s, ids, labels = _store(rng)
    with pytest.raises(KeyError):
        E.verify_1v1(s, "a", "a", [("s0", "nope", False)])
    with pytest.raises(ValueError):
        E.verify_1v1(s, "a", "a", [("s0", "s3", True)])


def test_make_pairs_properties():
    labels = np.repeat(np.arange(5), 4)
    ids = [f"x{i}" for i in range(20)]
    pairs = E.make_pairs(ids, labels, 10, 50, seed=3)
    lab = dict(zip(ids, labels))
    gen = [p for p in pairs if p[2]]
    imp = [p for p in pairs if not p[2]]
    assert len(gen) == 10 and len(imp) == 50
    assert all(lab[a] == lab[b] and a != b for a, b, _ in gen)
    assert all(lab[a] != lab[b] for a, b, _ in imp)
    assert len({(a, b) for a, b, _ in imp}) == 50
    assert pairs == E.make_pairs(ids, labels, 10, 50, seed=3)
    # Asking for more impostors than exist returns all of them.
    assert sum(not g for *_, g in E.make_pairs(ids, labels, 0, 10**6, seed=0)) == 20 * 16 // 2


def test_search_needs_both_query_kinds():
    g = G.Gallery().update({0: G.Prototype(np.array([1.0, 0.0]), "v")})
    with pytest.raises(ValueError):
        E.search_1vN(np.array([[1.0, 0.0]]), [0], g)
    with pytest.raises(ValueError):
        E.search_1vN(np.array([[1.0, 0.0]]), [5], g)


def test_search_queries_equal_to_prototypes():
    protos = np.eye(3)
    g = G.Gallery().update({c: G.Prototype(protos[c], "v") for c in range(3)})
    q = np.vstack([protos, [[1, 1, 1]]]) / np.array([[1], [1], [1], [np.sqrt(3)]])
    rep = E.search_1vN(q, [0, 1, 2, 9], g, (0.0, 0.5))
    assert rep.at(0.0) == 1.0 and rep.at(0.5) == 1.0 and rep.retrieval_rates[1] == 1.0


def test_report_serialization():
    rep = E.EvalReport("search_1vN", "a", "b", [E.OperatingPoint(0.1, 0.5, 0.1, 0.3, False)], [(0.0, 0.2), (1.0, 1.0)],
                       {1: 0.7})
    d = rep.to_dict()
    assert d["retrieval_rates"] == {"1": 0.7}
    assert rep.curve_csv().splitlines()[0] == "fpir,tpir"
    assert E.EvalReport("verify_1v1", "a", "a", [], [(0.0, 1.0)]).curve_csv().startswith("far,tar\n")
    with pytest.raises(KeyError):
        rep.at(0.2)


# ---- criteria


def test_update_gain_reproduces_published_values():
    # Verification: new/old 80.25 over old/old 77.86, paragon 86.96.
    assert E.update_gain(80.25, 77.86, 86.96) == pytest.approx(0.2626, abs=1e-4)
    # Search: 67.23 over 59.34, paragon 76.88.
    assert E.update_gain(67.23, 59.34, 76.88) == pytest.approx(0.4498, abs=1e-4)


def test_update_gain_limits_and_errors():
    assert E.update_gain(0.9, 0.5, 0.9) == 1.0
    with pytest.raises(E.InvalidGainError):
        E.update_gain(0.5, 0.5, 0.9)
    with pytest.raises(E.InvalidGainError):
        E.update_gain(0.6, 0.5, 0.5)


def test_empirical_criterion_is_strict():
    assert E.check_empirical_criterion(0.51, 0.5)
    assert not E.check_empirical_criterion(0.5, 0.5)


def _brute_strict(new, old, y):
    viol = []
    for i in range(len(y)):
        for j in range(len(y)):
            if i == j:
                continue
            dn = 1 - new[i] @ old[j]
            do = 1 - old[i] @ old[j]
            if (y[i] == y[j] and dn > do) or (y[i] != y[j] and dn < do):
                viol.append((i, j))
    return viol


def test_strict_criterion_matches_loops():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(3, 9))
        old = rng.normal(size=(n, 3))
        old /= np.linalg.norm(old, axis=1, keepdims=True)
        new = old + 0.3 * rng.normal(size=old.shape)
        new /= np.linalg.norm(new, axis=1, keepdims=True)
        y = rng.integers(0, 3, n)
        ok, viol = E.check_strict_criterion(new, old, None, y)
        assert viol == _brute_strict(new, old, y) and ok == (not viol)


def test_strict_criterion_identity_passes():
    rng = np.random.default_rng(6)
    old = rng.normal(size=(6, 3))
    old /= np.linalg.norm(old, axis=1, keepdims=True)
    assert E.check_strict_criterion(old, old, None, [0, 0, 1, 1, 2, 2])[0]
    with pytest.raises(DimensionError):
        E.check_strict_criterion(old[:3], old, None, [0, 0, 1])
