"""End-to-end acceptance checks; each records one PASS/FAIL line in the terminal summary."""

import hashlib
import random
import time

import numpy as np
import pytest

from _gradcheck import check_case, random_weights, relative_error
from homoglyph import cli, net
from homoglyph import index as kd
from homoglyph.baselines import score_pairs
from homoglyph.corpus import ConfusableTable, generate_spoof, levenshtein, load_names, read_pairs
from homoglyph.evaluate import (
    auc_rank,
    cluster_separation,
    oracle_top1,
    recall_vs_checks,
    synthetic_embeddings,
    time_linear_scan,
)
from homoglyph.render import default_font_path, render_batch

DATA = default_font_path().parent


def test_c1_gradient_check(acceptance):
    start = time.perf_counter()
    names = load_names(kind="domain")
    rng = np.random.default_rng(0)
    rows = []
    for case in range(20):
        w = random_weights(100 + case)
        i, j = rng.choice(len(names), 2, replace=False)
        x1, x2 = render_batch([names[i]]), render_batch([names[j]])
        label = case % 2
        d = net.pair_distances(w, x1, x2)[0]
        # dissimilar pairs get a margin beyond their distance so the hinge is active
        margin = 1.0 if label == 0 else 1.5 * d
        rows += check_case(w, x1, x2, np.array([label]), margin, 0.01, rng, per_tensor=1)
    secs = time.perf_counter() - start
    worst = max(relative_error(a, n, loss) for _, _, a, n, loss in rows)
    ok = len(rows) >= 100 and worst <= 1e-4 and secs < 60
    acceptance.record(1, ok, f"{len(rows)} params, max rel err {worst:.2e}, {secs:.1f} s")
    assert ok


def test_c2_levenshtein_examples(acceptance):
    cases = [
        ("SVCHOST.EXE", "SVCH0ST.EXE", 1),
        ("LSASS.EXE", "LS4SS.EXE", 1),
        ("iexplore.exe", "iexp1orc.exe", 2),
        ("chtime.exe", "chtirne.exe", 2),
        ("iexplore.exe", "explorer.exe", 2),
    ]
    got = [levenshtein(a, b) for a, b, _ in cases]
    ok = got == [w for _, _, w in cases]
    acceptance.record(2, ok, f"distances {got}")
    assert ok


def test_c3_rank_auc_exact(acceptance):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        s = rng.integers(0, 20, 50).astype(float)  # small range so ties are common
        y = rng.integers(0, 2, 50)
        y[:2] = [0, 1]
        pos, neg = s[y == 0], s[y == 1]
        wins = sum((p < n) + 0.5 * (p == n) for p in pos for n in neg)
        if auc_rank(s, y) != wins / (len(pos) * len(neg)):
            mismatches += 1
    acceptance.record(3, mismatches == 0, f"{mismatches} of 1000 instances differ")
    assert mismatches == 0


def _test_aucs(ref, scorers=("edit", "visual", "model")):
    test = read_pairs(ref["dataset"] / "test.tsv")
    w = net.load_model(ref["model"])
    labels = [p.label for p in test]
    return {sc: auc_rank([s for s, _ in score_pairs(test, sc, weights=w)], labels) for sc in scorers}


def test_c4_process_corpus(process_reference, acceptance):
    a = _test_aucs(process_reference)
    secs = process_reference["train_seconds"]
    ok = a["edit"] <= 0.60 and a["model"] >= 0.85 and a["model"] >= a["edit"] + 0.15 and secs <= 900
    acceptance.record(
        4, ok, f"edit {a['edit']:.4f} visual {a['visual']:.4f} model {a['model']:.4f}, train {secs:.0f} s"
    )
    assert ok


def test_c5_domain_corpus(domain_reference, acceptance):
    a = _test_aucs(domain_reference)
    ok = a["model"] - a["visual"] >= 0.02 and a["visual"] - a["edit"] >= 0.02
    acceptance.record(5, ok, f"edit {a['edit']:.4f} visual {a['visual']:.4f} model {a['model']:.4f}")
    assert ok


def test_c6_saturated_query_is_exact(acceptance):
    pts, queries = synthetic_embeddings(5000, 1000, seed=6)
    f = kd.build(pts, seed=6)
    bad = 0
    for q in queries:
        a, b = kd.query(f, q, 5, f.num_leaves), kd.linear_scan(f, q, 5)
        bad += not (np.array_equal(a.ids, b.ids) and np.array_equal(a.distances, b.distances))
    acceptance.record(6, bad == 0, f"{bad} of 1000 queries differ at checks={f.num_leaves}")
    assert bad == 0


@pytest.fixture(scope="module")
def ann_50k():
    start = time.perf_counter()
    pts, queries = synthetic_embeddings(50_000, 1000, seed=0)
    f = kd.build(pts, num_trees=10, seed=0)
    build_s = time.perf_counter() - start
    oracle = oracle_top1(f, queries)
    checks = [2**i for i in range(11)]
    curve = recall_vs_checks(f, queries, oracle, checks, repeats=3)
    linear_us = time_linear_scan(f, queries)
    return {"curve": curve, "linear_us": linear_us, "build_s": build_s, "total_s": time.perf_counter() - start}


def test_c7_recall_and_speed_at_50k(ann_50k, acceptance):
    c = ann_50k["curve"]
    k = c.checks.index(128)
    recall, q_us, lin_us = c.recall[k], c.query_us[k], ann_50k["linear_us"]
    total = ann_50k["total_s"]
    ok = recall >= 0.90 and q_us < lin_us and total <= 600
    acceptance.record(
        7,
        ok,
        f"recall@1 {recall:.3f}, query {q_us:.0f} us vs linear {lin_us:.0f} us, "
        f"build {ann_50k['build_s']:.1f} s, total {total:.0f} s",
    )
    assert ok


def test_c8_recall_monotone_in_checks(ann_50k, acceptance):
    r = ann_50k["curve"].recall
    ok = all(b >= a for a, b in zip(r, r[1:]))
    acceptance.record(8, ok, "recall " + " ".join(f"{v:.3f}" for v in r))
    assert ok


def test_c9_spoof_clusters(domain_reference, acceptance):
    w = net.load_model(domain_reference["model"])
    table = ConfusableTable.load()
    rng = random.Random(9)
    groups = {}
    for base in ("google.com", "facebook.com", "twitter.com", "snapchat.com"):
        fakes = set()
        while len(fakes) < 4:
            fakes.add(generate_spoof(base, table, rng, 3))
        groups[base] = net.embed(w, [base] + sorted(fakes))
    intra, inter = cluster_separation(groups)
    ratio = intra / inter
    ok = intra < inter and ratio <= 0.5
    acceptance.record(9, ok, f"intra {intra:.4f} inter {inter:.4f} ratio {ratio:.3f}")
    assert ok


def _pipeline(root):
    names = DATA / "process_names.txt"
    assert cli.main(["gen", str(names), "--benign", "300", "--spoof", "300", "--out", str(root / "ds")]) == 0
    assert cli.main(["train", str(root / "ds"), "--epochs", "2", "--out", str(root / "model")]) == 0
    args = ["index", str(names), "--model", str(root / "model" / "model.bin"), "--out", str(root / "idx")]
    assert cli.main(args) == 0
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "timing.csv"
    }


def test_c10_byte_identical_reruns(tmp_path, acceptance):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    differ = sorted(k for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differ
    acceptance.record(10, ok, f"{len(a)} files compared, differing: {differ or 'none'}")
    assert ok
