"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Experiments run on the default synthetic benchmark (60 training / 40
open-set identities, every seed pinned). Models are trained once per module.
"""
import json
from dataclasses import replace

import numpy as np
import pytest

import test_evalproto
import test_heads
import test_nncore
from bctlab import cli, datagen, evalproto as E, experiments as X, heads as H, trainer as T

RESULTS: dict[int, str] = {}
FPIR = X.EvalSettings().fpir_targets[0]


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def r3(x):
    return "None" if x is None else f"{x:.3f}"


@pytest.fixture(scope="module")
def lab():
    ds = datagen.generate(datagen.SyntheticSpec())
    bench = X.Benchmark(ds)
    zoo = X.Zoo(ds, X.standard_recipes())
    names = ["old", "new", "beta", "l2", "beta_relu", "beta_2x", "chain1", "chain2", "chain3"]
    store = bench.extract(zoo.get(names))
    return bench, zoo, store


def both(bench, store, q, g):
    r = bench.evaluate(store, q, g)
    return {p: r[p].value for p in X.PROTOCOLS}


# ---- exact checks


def test_c01_gradient_suite():
    checks = [test_nncore.test_affine_gradients, test_nncore.test_relu_gradients,
              test_nncore.test_l2norm_gradients, test_nncore.test_model_gradients,
              test_heads.test_soft_cross_entropy_gradients, test_heads.test_l2_regularizer_gradients]
    for v in H.VARIANTS:
        for fn in (test_heads.test_head_and_cross_entropy_gradients, test_heads.test_influence_loss_gradients,
                   test_heads.test_kd_loss_gradients, test_heads.test_lwf_loss_gradients):
            checks.append(lambda fn=fn, v=v: fn(v))
    failed = []
    for c in checks:
        try:
            c()
        except AssertionError:
            failed.append(getattr(c, "__name__", "variant check"))
    record(1, "gradient suite", not failed,
           f"{len(checks)} checks x 100 instances, rel err < 1e-4; failed: {failed or 'none'}")


def test_c02_metric_oracle():
    failed = []
    for c in (test_evalproto.test_rate_matches_brute_force_sweep, test_evalproto.test_search_matches_brute_force):
        try:
            c()
        except AssertionError:
            failed.append(c.__name__)
    record(2, "metric oracle equivalence", not failed,
           f"TAR@FAR on {test_evalproto.N_ORACLE} and TPIR@FPIR on 60 random instances; failed: {failed or 'none'}")


def test_c03_update_gain_arithmetic():
    g1 = E.update_gain(80.25, 77.86, 86.96)
    g2 = E.update_gain(67.23, 59.34, 76.88)
    ok = abs(g1 - 0.2626) <= 0.01 and abs(g2 - 0.4498) <= 0.01
    record(3, "update gain arithmetic", ok, f"{g1:.4f} (want 0.2626), {g2:.4f} (want 0.4498)")


# ---- desk experiments


def test_c04_independent_models_incompatible(lab):
    bench, _, store = lab
    no = bench.search(store, "new", "old").value
    oo = bench.search(store, "old", "old").value
    record(4, "independent models incompatible", no <= 0.25 * oo,
           f"TPIR@FPIR={FPIR:g} new->old {r3(no)} <= 0.25 x old->old {r3(oo)}")


def test_c05_bct_compatible_with_gain(lab):
    bench, _, store = lab
    s = X.compat_summary(bench, store, "old", "beta", "new")["protocols"]
    ok = all(s[p]["verdict"] == "compatible" and s[p]["update_gain"] is not None and s[p]["update_gain"] > 0.15
             for p in X.PROTOCOLS)
    detail = "; ".join(f"{p}: beta->old {r3(s[p]['new_old'])} vs old->old {r3(s[p]['old_old'])}, "
                       f"gain {r3(s[p]['update_gain'])}" for p in X.PROTOCOLS)
    record(5, "BCT satisfies the empirical criterion with gain > 0.15", ok, detail)


def test_c06_l2_baseline_fails(lab):
    bench, _, store = lab
    lo = bench.search(store, "l2", "old").value
    oo = bench.search(store, "old", "old").value
    record(6, "l2 baseline fails on search", not E.check_empirical_criterion(lo, oo),
           f"l2->old {r3(lo)} vs old->old {r3(oo)}")


def test_c07_paragon_cost(lab):
    bench, _, store = lab
    bb, nn = both(bench, store, "beta", "beta"), both(bench, store, "new", "new")
    drop = {p: (nn[p] - bb[p]) / nn[p] for p in X.PROTOCOLS}
    record(7, "influence loss costs < 10% self-test accuracy", all(d <= 0.10 for d in drop.values()),
           "; ".join(f"{p}: beta {r3(bb[p])} vs new {r3(nn[p])} ({100 * drop[p]:.1f}% drop)" for p in X.PROTOCOLS))


def test_c08_chain_transitivity(lab):
    bench, _, store = lab
    m = {(q, g): bench.search(store, q, g).value
         for q, g in [("chain3", "chain1"), ("chain1", "chain1"), ("chain3", "chain2"), ("chain2", "chain2")]}
    ok = m["chain3", "chain1"] > m["chain1", "chain1"] and m["chain3", "chain2"] > m["chain2", "chain2"]
    record(8, "chain transitivity on search", ok,
           f"(3,1) {r3(m['chain3', 'chain1'])} vs (1,1) {r3(m['chain1', 'chain1'])}; "
           f"(3,2) {r3(m['chain3', 'chain2'])} vs (2,2) {r3(m['chain2', 'chain2'])}")


def test_c09_partial_backfill(lab):
    bench, _, store = lab
    pts = X.backfill_sweep(bench, store, "old", "beta")
    back = bench.search(store, "beta", "old").value
    full = bench.search(store, "beta", "beta").value
    rho = X.spearman([f for f, _ in pts], [v for _, v in pts])
    ok = pts[0][1] == back and pts[-1][1] == full and rho >= 0.9
    record(9, "partial backfill", ok,
           f"f=0 {r3(pts[0][1])} == backward {r3(back)}, f=1 {r3(pts[-1][1])} == beta self {r3(full)}, "
           f"spearman {rho:.3f}")


def test_c10_relu_failure_case(lab):
    bench, _, store = lab
    relu, plain = both(bench, store, "beta_relu", "old"), both(bench, store, "beta", "old")
    record(10, "ReLU on the embedding hurts backward accuracy", all(relu[p] < plain[p] for p in X.PROTOCOLS),
           "; ".join(f"{p}: relu {r3(relu[p])} < beta {r3(plain[p])}" for p in X.PROTOCOLS))


def test_c11_dimension_change(lab):
    bench, _, store = lab
    wo = bench.search(store, "beta_2x", "old").value
    oo = bench.search(store, "old", "old").value
    record(11, "2K-dim BCT model satisfies the criterion on search", E.check_empirical_criterion(wo, oo),
           f"beta_2x->old {r3(wo)} vs old->old {r3(oo)}")


def test_c12_determinism(tmp_path):
    def once(tag):
        ds = datagen.generate(datagen.SyntheticSpec())
        bench = X.Benchmark(ds)
        zoo = X.Zoo(ds, X.standard_recipes())
        cks = zoo.get(["old", "beta"])
        for ck in cks:
            T.save_checkpoint(ck, tmp_path / tag / ck.version)
        store = bench.extract(cks)
        store.save(tmp_path / tag / "features.bctf")
        rep = X.compat_summary(bench, store, "old", "beta", "beta")
        (tmp_path / tag / "report.json").write_text(json.dumps(rep, sort_keys=True))
        return {p.relative_to(tmp_path / tag): p.read_bytes()
                for p in sorted((tmp_path / tag).rglob("*")) if p.is_file()}

    a, b = once("a"), once("b")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 0, "compat": {"old": "old", "new": "beta", "paragon": "new"}}))
    reports = []
    for out in ("ra", "rb"):
        assert cli.main(["compat", "--config", str(cfg), "--out", str(tmp_path / out)]) == 0
        reports.append(next((tmp_path / out).rglob("report.json")).read_bytes())
    ok = a == b and reports[0] == reports[1]
    record(12, "determinism", ok,
           f"{len(a)} artifacts (checkpoints, store, report) bitwise equal: {a == b}; "
           f"CLI report bytes equal: {reports[0] == reports[1]}")
