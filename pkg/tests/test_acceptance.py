"""Acceptance criteria, one test each; every test logs a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as they
are produced; they are also repeated in the terminal summary.
"""

import filecmp
import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from airwaytopo.anatomy import LARGE, MEDIUM, SMALL, decompose_amc
from airwaytopo.breakage import breakage_attention, refine_pseudo_label, simulate_breakage
from airwaytopo.cli import main
from airwaytopo.losses import DEFAULT_LAMBDA, ProbVolume, amc_loss, ce_loss, dice_loss, gul_loss, total_loss
from airwaytopo.metrics import evaluate
from airwaytopo.phantom import PhantomSpec, generate_phantom
from airwaytopo.pipeline import iterate_self_learning, phantom_cases
from airwaytopo.skeleton import branch_ownership
from airwaytopo.volume import Volume, connected_components, edt, largest_component

from oracles import all_pairs_edt, amc_loop, ce_loop, dice_loop, flood_fill_labels, gul_loop
from oracles import second_min_component_distance
from shapes import tube


def _record(log, number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] #{number} {title}: {detail}"
    print(line)
    log.append(line)
    assert ok, line


def test_01_edt_oracle(acceptance_log):
    rng = np.random.default_rng(1)
    worst, elapsed = 0.0, 0.0
    for i in range(100):
        m = rng.random((10, 10, 10)) < rng.uniform(0.01, 0.3)
        m[tuple(rng.integers(0, 10, 3))] = True
        sp = tuple(rng.choice([0.5, 0.8, 1.0, 1.25, 2.0], 3))
        t0 = time.perf_counter()
        d = edt(m, sp)
        elapsed += time.perf_counter() - t0
        worst = max(worst, float(np.abs(d - all_pairs_edt(m, sp)).max()))
    ok = worst <= 1e-5 and elapsed < 10.0
    _record(acceptance_log, 1, "EDT oracle", ok, f"100 masks, max abs err {worst:.2e}, fast EDT {elapsed:.3f} s")


def test_02_components_oracle(acceptance_log):
    rng = np.random.default_rng(2)
    mismatches = 0
    for i in range(200):
        m = rng.random((12, 12, 12)) < rng.uniform(0.05, 0.45)
        cc = connected_components(m)
        ref, n = flood_fill_labels(m)
        mismatches += int(cc.count != n or not np.array_equal(cc.labels, ref))
    _record(acceptance_log, 2, "CC oracle", mismatches == 0, f"200 masks, {mismatches} partitions differ")


def test_03_attention_oracle(acceptance_log):
    rng = np.random.default_rng(3)
    worst, done = 0.0, 0
    while done < 50:
        m = rng.random((10, 10, 10)) < rng.uniform(0.005, 0.05)
        sp = tuple(rng.choice([0.7, 1.0, 1.5], 3))
        labels, n = flood_fill_labels(m)
        if n < 2:
            continue
        att = breakage_attention(Volume(m.astype(np.uint8), sp))
        worst = max(worst, float(np.abs(att.raw.data - second_min_component_distance(labels, n, sp)).max()))
        done += 1
    mid_err = 0.0
    for axis, sp in [(0, (1.0, 1.0, 1.0)), (1, (0.5, 0.5, 0.5)), (2, (2.0, 1.0, 2.5))]:
        gap = int(round(10.0 / sp[axis]))
        shape = [3, 3, 3]
        shape[axis] = gap + 1
        m = np.zeros(shape, np.uint8)
        a, b, c = [1, 1, 1], [1, 1, 1], [1, 1, 1]
        a[axis], b[axis], c[axis] = 0, gap, gap // 2
        m[tuple(a)] = m[tuple(b)] = 1
        att = breakage_attention(Volume(m, sp), gamma_mm=5.0)
        mid_err = max(mid_err, abs(float(att.normalized.data[tuple(c)]) - 0.5))
    ok = worst <= 1e-5 and mid_err <= 1e-6
    _record(acceptance_log, 3, "attention oracle", ok,
            f"50 masks, max raw err {worst:.2e}; midpoint |H - 0.5| max {mid_err:.1e}")


def test_04_breakage_contract(acceptance_log, phantom6):
    tree, mask = phantom6.gt_tree, phantom6.gt_mask
    fg = mask.data.astype(bool)
    n_want = math.ceil(0.5 * len(tree.leaves()))
    bad_partition = bad_count = bad_frac = 0
    fracs = []
    for seed in range(100):
        s = simulate_breakage(mask, seed=seed, tree=tree)
        broken, gt = s.broken_mask.data.astype(bool), s.breakage_gt.data.astype(bool)
        bad_partition += int(not ((broken | gt) == fg).all() or (broken & gt).any())
        bad_count += int(len(s.removed_branches) != n_want)
        f = [r.removed_fraction for r in s.removed_branches]
        fracs += f
        bad_frac += sum(not 0.10 <= x <= 0.30 for x in f)
    ok = bad_partition == bad_count == bad_frac == 0
    _record(acceptance_log, 4, "breakage contract", ok,
            f"100 runs, {len(tree.leaves())} leaves, pick {n_want}; violations partition={bad_partition} "
            f"count={bad_count} fraction={bad_frac}; fractions in [{min(fracs):.3f}, {max(fracs):.3f}]")


def test_05_reconnection(acceptance_log):
    t0 = time.perf_counter()
    broken_total = restored = 0
    for seed in range(20):
        ph = generate_phantom(PhantomSpec(generations=6, seed=100 + seed))
        s = simulate_breakage(ph.gt_mask, seed=seed, tree=ph.gt_tree)
        broken = s.broken_mask
        main_part = largest_component(broken)
        owner = branch_ownership(ph.gt_tree, ph.gt_mask)
        detached = broken.data.astype(bool) & ~main_part.data.astype(bool)
        out = refine_pseudo_label(broken, main_part, ph.ct).data.astype(bool)
        for r in s.removed_branches:
            vox = detached & (owner == r.branch_id)
            if not vox.any():
                continue
            broken_total += 1
            restored += int(out[vox].all())
    elapsed = time.perf_counter() - t0
    rate = restored / broken_total
    ok = rate >= 0.90 and elapsed < 300
    _record(acceptance_log, 5, "reconnection", ok,
            f"20 phantoms, {restored}/{broken_total} broken leaves restored ({100 * rate:.1f}%), {elapsed:.0f} s")


def test_06_metric_identities(acceptance_log, phantom6):
    tree, mask = phantom6.gt_tree, phantom6.gt_mask
    rep = evaluate(mask, mask, tree)
    ident = [rep.bd_pct, rep.tld_pct, rep.precision_pct, rep.dsc_pct, rep.sensitivity_pct]
    owner = branch_ownership(tree, mask)
    n = len(tree.branches)
    errs = []
    for leaf_id in tree.leaves():
        pred = mask.data.astype(bool) & (owner != leaf_id)
        r = evaluate(pred, mask, tree)
        errs.append(abs(r.bd_pct - 100.0 * (n - 1) / n))
        errs.append(abs(r.tld_pct - 100.0 * (1.0 - tree.branch(leaf_id).length_mm / tree.total_length_mm)))
    ok = all(v == 100.0 for v in ident) and max(errs) <= 1e-9
    _record(acceptance_log, 6, "metric identities", ok,
            f"identity {ident}; {len(tree.leaves())} single-leaf deletions, max err {max(errs):.1e}")


def test_07_loss_oracles(acceptance_log):
    rng = np.random.default_rng(7)
    worst = lin = 0.0
    for _ in range(20):
        logits = rng.normal(scale=2.0, size=(4, 6, 6, 6))
        prob = ProbVolume(np.exp(logits) / np.exp(logits).sum(axis=0))
        labels = rng.integers(0, 4, size=(6, 6, 6))
        g, p = labels > 0, prob.foreground()
        w = rng.random(g.shape) + 0.05
        pairs = [
            (dice_loss(p, g), dice_loop(p, g)),
            (ce_loss(p, g), ce_loop(p, g)),
            (gul_loss(p, g, w), gul_loop(p, g, w)),
            (amc_loss(prob, labels), amc_loop(prob.probs, labels)),
            (total_loss(prob, labels, weights=w), amc_loop(prob.probs, labels) + 0.25 * gul_loop(p, g, w)),
        ]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
        t0, t1 = total_loss(prob, labels, 0.0, w), total_loss(prob, labels, 1.0, w)
        for lam in (0.1, 0.25, 0.7, 3.0):
            lin = max(lin, abs(total_loss(prob, labels, lam, w) - (t0 + lam * (t1 - t0))))
    default_ok = DEFAULT_LAMBDA == 0.25 and total_loss(prob, labels, weights=w) == total_loss(prob, labels, 0.25, w)
    ok = worst <= 1e-6 and lin <= 1e-9 and default_ok
    _record(acceptance_log, 7, "loss oracles", ok,
            f"20 grids 6^3, max oracle err {worst:.1e}, affinity err {lin:.1e}, default lambda 0.25 {default_ok}")


def test_08_amc_partition(acceptance_log):
    bad = 0
    for seed in range(20):
        gens = 3 + seed % 4
        ph = generate_phantom(PhantomSpec(generations=gens, seed=200 + seed))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            amc = decompose_amc(ph.gt_mask)
        sup = [amc.support(c).astype(int) for c in (LARGE, MEDIUM, SMALL)]
        bad += int(not (sum(sup) == ph.gt_mask.data).all())
    v = tube(length=30, radius=3.0)
    amc = decompose_amc(v)
    tube_ok = bool((amc.support(LARGE) == v.data.astype(bool)).all())
    ok = bad == 0 and tube_ok
    _record(acceptance_log, 8, "AMC partition", ok, f"20 phantoms, {bad} not partitioned; straight tube all L {tube_ok}")


@pytest.mark.slow
def test_09_self_learning_trend(acceptance_log):
    t0 = time.perf_counter()
    cases = phantom_cases(10, seed=0, degrade_fraction=0.3)
    res = iterate_self_learning(cases, max_iters=3, select_iter=3)
    elapsed = time.perf_counter() - t0
    tld = res.trend("tld_pct")
    prec = res.trend("precision_pct")
    drop = prec[0] - prec[-1]
    ok = res.error is None and len(tld) == 3 and tld[2] > tld[0] and drop <= 3.0 and elapsed < 900
    _record(acceptance_log, 9, "self-learning trend", ok,
            "TLD " + " -> ".join(f"{v:.3f}" for v in tld) + ", precision "
            + " -> ".join(f"{v:.3f}" for v in prec) + f" (drop {drop:.3f}), {elapsed:.0f} s")


def _tree_files(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


@pytest.mark.slow
def test_10_determinism(acceptance_log, tmp_path, monkeypatch):
    runs = {
        "phantom": ["phantom", "--generations", "5", "--seed", "11", "--out", "out"],
        "simulate-breakage": None,  # needs the phantom mask, filled in below
        "iterate": ["iterate", "--phantoms", "2", "--generations", "4", "--max-iters", "2",
                    "--seed", "5", "--out", "out"],
    }
    src = tmp_path / "src"
    src.mkdir()
    monkeypatch.chdir(src)
    assert main(["phantom", "--generations", "5", "--seed", "3", "--out", "ph"]) == 0
    mask = str(src / "ph" / "gt.mhd")
    runs["simulate-breakage"] = ["simulate-breakage", "--mask", mask, "--seed", "9", "--out", "out"]
    differing = []
    for name, argv in runs.items():
        dirs = []
        for threads in (1, 4):
            d = tmp_path / f"{name}_t{threads}"
            d.mkdir()
            monkeypatch.chdir(d)
            assert main([*argv, "--threads", str(threads)]) == 0
            dirs.append(d / "out")
        files = _tree_files(dirs[0])
        if files != _tree_files(dirs[1]):
            differing.append(f"{name}: file lists")
            continue
        _, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], files, shallow=False)
        differing += [f"{name}: {f}" for f in mismatch + errors]
    n_files = sum(len(_tree_files(tmp_path / f"{k}_t1" / "out")) for k in runs)
    _record(acceptance_log, 10, "determinism", not differing,
            f"{n_files} files across phantom/simulate-breakage/iterate with threads 1 vs 4; "
            f"differing: {differing or 'none'}")
