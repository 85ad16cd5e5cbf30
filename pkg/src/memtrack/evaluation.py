"""Evaluation and interpretability suite: span-pair F1 with threshold sweep,
unique-people counting, overwrite-concentration KL diagnostic, and memory-log
export / SVG heatmap rendering."""

import html
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

THRESHOLD_GRID = [round(0.01 * i, 2) for i in range(1, 101)]


@dataclass
class ThresholdSweep:
    thresholds: list
    values: list
    best_threshold: float
    best_value: float


@dataclass
class MemoryLog:
    doc_id: str
    tokens: list
    entity_prob: np.ndarray  # (T,)
    overwrite: np.ndarray    # (T, N)
    coref: np.ndarray        # (T, N)
    usage: np.ndarray        # (T, N)

    def __post_init__(self):
        T = len(self.tokens)
        if not (self.entity_prob.shape == (T,)
                and self.overwrite.shape == self.coref.shape == self.usage.shape
                and self.overwrite.shape[0] == T):
            raise ValueError(f"memory log {self.doc_id!r}: inconsistent shapes")

    @property
    def num_cells(self):
        return self.overwrite.shape[1]


def log_from_trace(trace, doc):
    return MemoryLog(
        doc_id=doc.doc_id,
        tokens=list(doc.tokens),
        entity_prob=trace.entity_prob.detach().numpy().astype(np.float64),
        overwrite=trace.overwrite.detach().numpy().astype(np.float64),
        coref=trace.coref.detach().numpy().astype(np.float64),
        usage=trace.usage.detach().numpy().astype(np.float64),
    )


# ---------------------------------------------------------------------------
# GAP-style F1


def gap_f1(scores, labels, threshold):
    """Micro-averaged precision/recall/F1 of thresholded link predictions.

    scores/labels are parallel sequences over all (name, pronoun) decisions
    (two per instance); prediction is positive when score >= threshold.
    """
    if len(scores) != len(labels):
        raise ValueError("scores and labels must be parallel")
    tp = fp = fn = 0
    for score, label in zip(scores, labels):
        pred = score >= threshold
        if pred and label:
            tp += 1
        elif pred and not label:
            fp += 1
        elif not pred and label:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return precision, recall, f1


def sweep_threshold_f1(scores, labels):
    """Evaluate F1 on the full threshold grid; ties go to the smallest."""
    values = [gap_f1(scores, labels, th)[2] for th in THRESHOLD_GRID]
    best_idx = max(range(len(values)), key=lambda i: (values[i], -i))
    return ThresholdSweep(thresholds=list(THRESHOLD_GRID), values=values,
                          best_threshold=THRESHOLD_GRID[best_idx],
                          best_value=values[best_idx])


# ---------------------------------------------------------------------------
# Unique-people counting


def count_people(log, alpha):
    """Number of discretized overwrite events: entries with o >= alpha."""
    return int(np.sum(log.overwrite >= alpha))


def sweep_threshold_count(logs, gold_counts):
    """Best alpha minimizes total |predicted - gold| over the corpus; ties go
    to the smallest threshold."""
    errors = []
    for alpha in THRESHOLD_GRID:
        total = sum(abs(count_people(log, alpha) - gold_counts[log.doc_id])
                    for log in logs)
        errors.append(total)
    best_idx = min(range(len(errors)), key=lambda i: (errors[i], i))
    return ThresholdSweep(thresholds=list(THRESHOLD_GRID), values=errors,
                          best_threshold=THRESHOLD_GRID[best_idx],
                          best_value=errors[best_idx])


# ---------------------------------------------------------------------------
# Overwrite concentration diagnostic


def overwrite_kl(logs):
    """KL divergence (nats) of the corpus-average per-cell overwrite
    distribution from uniform.  Per document, overwrite mass is summed over
    tokens; document vectors are averaged, then normalized.  Returns None when
    no overwrite mass exists anywhere (KL undefined)."""
    if not logs:
        raise ValueError("need at least one memory log")
    per_doc = np.stack([log.overwrite.sum(axis=0) for log in logs])
    mean = per_doc.mean(axis=0)
    mass = mean.sum()
    if mass == 0.0:
        return None
    p = mean / mass
    n = len(p)
    nonzero = p > 0.0
    return float(np.sum(p[nonzero] * np.log(p[nonzero] * n)))


# ---------------------------------------------------------------------------
# Memory-log serialization (JSON lines)


def export_memory_log(log, path):
    """One header line with doc metadata, then one line per token."""
    lines = [json.dumps({"doc_id": log.doc_id, "N": log.num_cells,
                         "T": len(log.tokens)}, sort_keys=True)]
    for t, token in enumerate(log.tokens):
        lines.append(json.dumps({
            "token": token,
            "e": float(np.float32(log.entity_prob[t])),
            "o": [float(np.float32(v)) for v in log.overwrite[t]],
            "c": [float(np.float32(v)) for v in log.coref[t]],
            "u": [float(np.float32(v)) for v in log.usage[t]],
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_memory_log(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    rows = [json.loads(line) for line in lines[1:]]
    if len(rows) != header["T"]:
        raise ValueError(f"{path}: header T={header['T']} but {len(rows)} rows")
    return MemoryLog(
        doc_id=header["doc_id"],
        tokens=[r["token"] for r in rows],
        entity_prob=np.array([r["e"] for r in rows], dtype=np.float64),
        overwrite=np.array([r["o"] for r in rows], dtype=np.float64),
        coref=np.array([r["c"] for r in rows], dtype=np.float64),
        usage=np.array([r["u"] for r in rows], dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# SVG heatmap


CELL_W = 26
CELL_H = 22
LABEL_W = 72
TOKEN_H = 70
ELLIPSIS_W = 30


def compress_columns(entity_prob, min_run=10, threshold=0.05):
    """Group token positions into kept columns and ellipsis runs: a run of
    >= min_run consecutive tokens all with e < threshold collapses."""
    T = len(entity_prob)
    quiet = [entity_prob[t] < threshold for t in range(T)]
    columns = []
    t = 0
    while t < T:
        if quiet[t]:
            run_end = t
            while run_end < T and quiet[run_end]:
                run_end += 1
            if run_end - t >= min_run:
                columns.append(("ellipsis", t, run_end - 1))
                t = run_end
                continue
        columns.append(("token", t, t))
        t += 1
    return columns


def render_heatmap(log, path, min_run=10, threshold=0.05):
    """Two rows per memory cell (OW and CR), tokens along the X axis, darker
    color for higher value; quiet stretches collapse into an ellipsis."""
    columns = compress_columns(log.entity_prob, min_run, threshold)
    N = log.num_cells
    width = LABEL_W + sum(
        ELLIPSIS_W if kind == "ellipsis" else CELL_W for kind, _, _ in columns)
    height = 2 * N * CELL_H + TOKEN_H

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="monospace" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i in range(N):
        for row, label in ((0, "OW"), (1, "CR")):
            y = (2 * i + row) * CELL_H
            parts.append(
                f'<text x="4" y="{y + CELL_H - 7}">cell {i} {label}</text>')
    x = LABEL_W
    for kind, first, last in columns:
        if kind == "ellipsis":
            y = 2 * N * CELL_H + 14
            parts.append(f'<text x="{x + 4}" y="{y}">...</text>')
            x += ELLIPSIS_W
            continue
        t = first
        for i in range(N):
            for row, value in ((0, log.overwrite[t, i]), (1, log.coref[t, i])):
                shade = int(round(255 * (1.0 - min(max(float(value), 0.0), 1.0))))
                y = (2 * i + row) * CELL_H
                parts.append(
                    f'<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" '
                    f'fill="rgb({shade},{shade},255)" stroke="#ddd"/>')
        ty = 2 * N * CELL_H + 10
        token = html.escape(log.tokens[t][:8])
        parts.append(
            f'<text x="{x + CELL_W / 2:.1f}" y="{ty}" '
            f'transform="rotate(60 {x + CELL_W / 2:.1f} {ty})">{token}</text>')
        x += CELL_W
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def write_metrics_csv(rows, header, path):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
