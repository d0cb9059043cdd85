import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segloc.evaluation import (ATTENTION_HEADER, RANK_HEADER, attention_vs_rank, check_svg, closure_stats,
                               completeness_bin, emit_report, median_non_increasing, rank_of,
                               rank_vs_completeness, svg_histogram, svg_line_plot)
from segloc.localization import SegmentDB, knn_query


def line_db(labels, seqs=None):
    db = SegmentDB(dim=2)
    for i, lab in enumerate(labels):
        db.add(i, [float(i + 1), 0.0], np.zeros(3), 1 if seqs is None else seqs[i], 0.0, lab)
    return db


def test_rank_of_examples():
    db = line_db([5, 6, 7])
    assert rank_of(db, [0.0, 0.0], 5) == 1
    assert rank_of(db, [0.0, 0.0], 7) == 3
    assert rank_of(db, [0.0, 0.0], 9) == math.inf
    assert rank_of(SegmentDB(), np.zeros(64), 1) == math.inf
    db = line_db([5, 6, 5], seqs=[2, 1, 1])
    assert rank_of(db, [0.0, 0.0], 5, sequence=2) == 2


@given(st.integers(0, 1000))
@settings(max_examples=30)
def test_rank_consistent_with_knn(seed):
    rng = np.random.default_rng(seed)
    db = SegmentDB(dim=8)
    labels = rng.integers(0, 10, 60)
    for i in range(60):
        db.add(i, rng.normal(size=8), np.zeros(3), int(rng.integers(0, 2)), 0.0, int(labels[i]))
    q = rng.normal(size=8)
    lab = int(rng.integers(0, 10))
    r = rank_of(db, q, lab, sequence=0)
    cands = knn_query(db, q, 60, exclude_sequence=0)
    hits = [m.rank for m in cands if db.labels[m.target_index] == lab]
    assert r == (hits[0] if hits else math.inf)


def test_completeness_bins():
    assert completeness_bin(np.array([0.01, 0.2, 0.21, 0.8, 0.81, 1.0]), 5).tolist() == [0, 0, 1, 3, 4, 4]


def test_rank_vs_completeness():
    rows = rank_vs_completeness(np.ones(10), np.linspace(0.05, 1, 10), 5)
    assert [r[3] for r in rows] == [1.0] * 5
    assert len(rows[0]) == len(RANK_HEADER)
    rows = rank_vs_completeness([3, 1, 2], [0.1, 0.95, 0.5], 5)
    assert rows[1][2] == 0 and math.isnan(rows[1][3])
    assert median_non_increasing(rows)
    rows = rank_vs_completeness([1, 5, math.inf], [0.1, 0.5, 0.9], 5)
    assert not median_non_increasing(rows)
    rows = rank_vs_completeness([1, 1, 1, math.inf], [0.9, 0.9, 0.9, 0.9], 1)
    assert rows[0][3] == 1 and rows[0][6] == math.inf and rows[0][7] == 0.75
    with pytest.raises(ValueError):
        rank_vs_completeness([1], [1], 0)


def test_monotone_synthetic_setup():
    rng = np.random.default_rng(0)
    c = rng.uniform(0.01, 1, 500)
    ranks = np.maximum(1, np.round((1 - c) * 20 + rng.uniform(0, 2, 500)))
    assert median_non_increasing(rank_vs_completeness(ranks, c, 5))


def test_closure_stats_examples():
    s = closure_stats([0.2])
    assert (s.n_correct, s.n_incorrect, s.mean_error) == (1, 0, 0.2)
    s = closure_stats([0.3, 6.0])
    assert (s.n_correct, s.n_incorrect, s.mean_error) == (1, 1, 0.3)
    s = closure_stats([])
    assert (s.n_correct, s.n_incorrect, s.mean_error_text()) == (0, 0, "n/a")
    s = closure_stats(["a", "b"], ground_truth=lambda c: None if c == "a" else 1.0)
    assert (s.n_correct, s.n_incorrect) == (1, 0)


@given(st.lists(st.floats(0, 20), max_size=30), st.randoms())
def test_closure_stats_order_invariant(errs, r):
    shuffled = list(errs)
    r.shuffle(shuffled)
    assert closure_stats(errs) == closure_stats(shuffled)


def test_attention_vs_rank():
    rows, note = attention_vs_rank(np.ones(30), np.arange(30), 10)
    assert note == "" and len(rows) == 10
    assert len({r[4] for r in rows}) == 1
    rows, _ = attention_vs_rank(100.0 / np.arange(1, 41), np.arange(1, 41), 10)
    assert all(b[4] < a[4] for a, b in zip(rows, rows[1:]))
    rows, note = attention_vs_rank([1.0, math.inf, 2.0], [3, 1, 2], 10)
    assert len(rows) == 3 and "3 segments" in note
    assert rows[0][5] == 1
    assert len(rows[0]) == len(ATTENTION_HEADER)


def test_emit_report(tmp_path):
    d = tmp_path / "r"
    tables = {"empty": (["a", "b"], []), "ranks": (RANK_HEADER, rank_vs_completeness([1, 2], [0.3, 0.9], 5))}
    plots = {"line": lambda p: svg_line_plot(p, [0, 1, 2], [3, 1, math.inf], "t", "x", "y", band=([2, 0, 1], [4, 2, 3])),
             "hist": lambda p: svg_histogram(p, [0.1, 0.2, 7.0, math.inf], 5, "h & <x>")}
    emit_report(d, tables, {"seed": 3, "x": np.float64(0.5), "inf": math.inf}, plots)
    assert (d / "empty.csv").read_text() == "a,b\n"
    assert sorted(os.listdir(d)) == ["empty.csv", "hist.svg", "line.svg", "manifest.json", "ranks.csv"]
    for p in ("line.svg", "hist.svg"):
        check_svg(d / p)
    first = {p: (d / p).read_bytes() for p in os.listdir(d)}
    emit_report(d, tables, {"seed": 3, "x": np.float64(0.5), "inf": math.inf}, plots)
    assert first == {p: (d / p).read_bytes() for p in os.listdir(d)}


def test_emit_report_unwritable(tmp_path):
    f = tmp_path / "file"
    f.write_text("x")
    with pytest.raises(OSError):
        emit_report(f / "sub", {}, {})


def test_check_svg_rejects_other_elements(tmp_path):
    p = tmp_path / "a.svg"
    p.write_text('<svg xmlns="http://www.w3.org/2000/svg"><circle r="1"/></svg>')
    with pytest.raises(ValueError):
        check_svg(p)
    p.write_text("<svg><rect")
    with pytest.raises(Exception):
        check_svg(p)
