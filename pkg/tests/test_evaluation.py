import math

import numpy as np
import pytest

from memtrack import evaluation
from memtrack.evaluation import (MemoryLog, THRESHOLD_GRID, compress_columns,
                                 count_people, export_memory_log, gap_f1,
                                 load_memory_log, overwrite_kl,
                                 render_heatmap, sweep_threshold_count,
                                 sweep_threshold_f1, write_metrics_csv)


def make_log(doc_id, o, c=None, u=None, e=None):
    o = np.asarray(o, dtype=np.float64)
    T, N = o.shape
    return MemoryLog(
        doc_id=doc_id,
        tokens=[f"t{i}" for i in range(T)],
        entity_prob=np.linspace(0, 1, T) if e is None else np.asarray(e),
        overwrite=o,
        coref=np.zeros((T, N)) if c is None else np.asarray(c),
        usage=np.zeros((T, N)) if u is None else np.asarray(u),
    )


# ---------------------------------------------------------------------------
# F1


def test_gap_f1_hand_tallied_confusion():
    # 3 instances -> 6 decisions: 4 TP, 1 FP, 1 FN at threshold 0.5
    scores = [0.9, 0.8, 0.7, 0.6, 0.9, 0.1]
    labels = [True, True, True, True, False, True]
    p, r, f1 = gap_f1(scores, labels, 0.5)
    assert (p, r, f1) == (pytest.approx(0.8), pytest.approx(0.8),
                          pytest.approx(0.8))


def test_gap_f1_validates_lengths():
    with pytest.raises(ValueError):
        gap_f1([0.5], [True, False], 0.5)


def test_sweep_f1_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 30))
        scores = rng.uniform(size=n).round(2).tolist()
        labels = (rng.uniform(size=n) < 0.5).tolist()
        sweep = sweep_threshold_f1(scores, labels)
        values = [gap_f1(scores, labels, th)[2] for th in THRESHOLD_GRID]
        best = max(values)
        assert sweep.best_value == pytest.approx(best)
        # smallest threshold attaining the optimum wins ties
        first = min(i for i, v in enumerate(values) if v == best)
        assert sweep.best_threshold == THRESHOLD_GRID[first]
        assert sweep.values == pytest.approx(values)


# ---------------------------------------------------------------------------
# People counting


def test_count_people_recount_oracle():
    rng = np.random.default_rng(1)
    o = rng.uniform(size=(12, 4))
    log = make_log("d", o)
    for alpha in (0.05, 0.3, 0.71):
        want = sum(1 for v in o.flatten() if v >= alpha)
        assert count_people(log, alpha) == want


def test_sweep_threshold_count_grid_oracle():
    rng = np.random.default_rng(2)
    logs = [make_log(f"d{i}", rng.uniform(size=(10, 3))) for i in range(5)]
    gold = {f"d{i}": int(rng.integers(1, 5)) for i in range(5)}
    sweep = sweep_threshold_count(logs, gold)
    errors = []
    for alpha in THRESHOLD_GRID:
        errors.append(sum(abs(count_people(log, alpha) - gold[log.doc_id])
                          for log in logs))
    assert sweep.values == errors
    best = min(errors)
    assert sweep.best_value == best
    assert sweep.best_threshold == THRESHOLD_GRID[errors.index(best)]


# ---------------------------------------------------------------------------
# Overwrite KL


def test_kl_uniform_is_zero():
    o = np.full((20, 4), 0.25)
    assert overwrite_kl([make_log("d", o)]) < 1e-12


def test_kl_one_hot_two_cells_is_ln2():
    o = np.zeros((10, 2))
    o[:, 0] = 1.0
    assert abs(overwrite_kl([make_log("d", o)]) - math.log(2)) < 1e-9


def test_kl_formula_oracle():
    rng = np.random.default_rng(3)
    logs = [make_log(f"d{i}", rng.uniform(size=(8, 5))) for i in range(4)]
    got = overwrite_kl(logs)
    per_doc = np.stack([log.overwrite.sum(axis=0) for log in logs])
    p = per_doc.mean(axis=0)
    p = p / p.sum()
    want = float(np.sum(p * np.log(p * len(p))))
    assert got == pytest.approx(want, rel=1e-12)


def test_kl_no_mass_is_none_and_empty_raises():
    assert overwrite_kl([make_log("d", np.zeros((5, 3)))]) is None
    with pytest.raises(ValueError):
        overwrite_kl([])


# ---------------------------------------------------------------------------
# Log serialization


def test_memory_log_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    o = rng.uniform(size=(7, 3)).astype(np.float32).astype(np.float64)
    log = make_log("doc-42", o, c=rng.uniform(size=(7, 3)).astype(np.float32),
                   u=rng.uniform(size=(7, 3)).astype(np.float32),
                   e=rng.uniform(size=7).astype(np.float32))
    path = tmp_path / "log.jsonl"
    export_memory_log(log, path)
    back = load_memory_log(path)
    assert back.doc_id == "doc-42"
    assert back.tokens == log.tokens
    # float32 rounding is applied on export; round-tripping is exact after it
    assert np.array_equal(back.overwrite.astype(np.float32),
                          log.overwrite.astype(np.float32))
    export_memory_log(back, tmp_path / "log2.jsonl")
    assert (tmp_path / "log.jsonl").read_bytes() == \
        (tmp_path / "log2.jsonl").read_bytes()


def test_memory_log_shape_validation():
    with pytest.raises(ValueError):
        MemoryLog("d", ["a", "b"], np.zeros(3), np.zeros((2, 2)),
                  np.zeros((2, 2)), np.zeros((2, 2)))


def test_load_memory_log_row_count_mismatch(tmp_path):
    log = make_log("d", np.zeros((3, 2)))
    path = tmp_path / "log.jsonl"
    export_memory_log(log, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError):
        load_memory_log(path)


# ---------------------------------------------------------------------------
# Heatmap


def test_compress_columns_collapses_quiet_runs():
    e = np.concatenate([[0.5], np.full(12, 0.01), [0.9, 0.01, 0.01]])
    cols = compress_columns(e, min_run=10, threshold=0.05)
    assert cols == [("token", 0, 0), ("ellipsis", 1, 12), ("token", 13, 13),
                    ("token", 14, 14), ("token", 15, 15)]


def test_compress_columns_keeps_short_runs():
    e = np.array([0.01] * 9 + [0.5])
    cols = compress_columns(e, min_run=10, threshold=0.05)
    assert all(kind == "token" for kind, _, _ in cols)
    assert len(cols) == 10


def test_heatmap_idealized_script_one_dark_overwrite_per_entity(tmp_path):
    # Fig.-1-style script: OW at each entity's first mention, CR at repeats.
    T, N = 8, 3
    o = np.zeros((T, N))
    c = np.zeros((T, N))
    o[0, 0] = 1.0   # entity 0 enters
    o[2, 1] = 1.0   # entity 1 enters
    c[4, 0] = 1.0   # entity 0 repeat
    c[6, 1] = 1.0   # entity 1 repeat
    e = (o.sum(axis=1) + c.sum(axis=1)).clip(0, 1)
    log = make_log("d", o, c=c, u=np.zeros((T, N)), e=e)
    path = tmp_path / "d.svg"
    render_heatmap(log, path)
    svg = path.read_text()
    # dark cells render as rgb(0,0,255); exactly one dark OW per entity plus
    # one dark CR per scripted repeat
    assert svg.count('fill="rgb(0,0,255)"') == 4
    # deterministic rendering
    render_heatmap(log, tmp_path / "d2.svg")
    assert (tmp_path / "d2.svg").read_bytes() == path.read_bytes()


def test_heatmap_ellipsis_rendering(tmp_path):
    T = 25
    e = np.zeros(T)
    e[0] = 1.0
    o = np.zeros((T, 2))
    o[0, 0] = 1.0
    log = make_log("d", o, e=e)
    path = tmp_path / "d.svg"
    render_heatmap(log, path)
    svg = path.read_text()
    assert ">...</text>" in svg
    # 1 kept token -> 2 rows x 2 cells = 4 rects plus the background rect
    assert svg.count("<rect") == 5


def test_write_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv([[1, 0.5], [2, 0.25]], ["epoch", "loss"], path)
    assert path.read_text() == "epoch,loss\n1,0.5\n2,0.25\n"
