"""Pairwise coreference-link probability from trace matrices.

For tokens t1 < t2 the link probability marginalizes over memory cells:
    P(t1, t2) = sum_i (o[t1,i] + c[t1,i]) * prod_{j=t1+1..t2} (1 - o[j,i]) * c[t2,i]
Direct evaluation is O(T) per pair; the incremental scheme shares per-cell
survival prefix products so a batch of queries costs O(T*N + Q*N) total.
Survival products are kept in linear space (all factors in [0, 1]; documents
here are short). A log-space variant would be the fallback for very long
documents.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class TraceMatrix:
    overwrite: np.ndarray  # (T, N)
    coref: np.ndarray      # (T, N)

    def __post_init__(self):
        self.overwrite = np.asarray(self.overwrite, dtype=np.float64)
        self.coref = np.asarray(self.coref, dtype=np.float64)
        if self.overwrite.shape != self.coref.shape or self.overwrite.ndim != 2:
            raise ValueError("overwrite/coref must be matching (T, N) matrices")
        for name, m in (("overwrite", self.overwrite), ("coref", self.coref)):
            if m.min() < 0.0 or m.max() > 1.0:
                raise ValueError(f"{name} entries outside [0, 1]")

    @property
    def num_tokens(self):
        return self.overwrite.shape[0]

    @property
    def num_cells(self):
        return self.overwrite.shape[1]

    @classmethod
    def from_trace(cls, trace):
        return cls(overwrite=trace.overwrite.detach().cpu().numpy(),
                   coref=trace.coref.detach().cpu().numpy())


def _check_pair(tm, t1, t2):
    if not 0 <= t1 < t2 < tm.num_tokens:
        raise ValueError(f"need 0 <= t1 < t2 < T, got ({t1}, {t2})")


def link_probability(tm, t1, t2):
    """Direct evaluation of the link probability for one token pair."""
    _check_pair(tm, t1, t2)
    total = 0.0
    for i in range(tm.num_cells):
        survival = 1.0
        for j in range(t1 + 1, t2 + 1):
            survival *= 1.0 - tm.overwrite[j, i]
        total += (tm.overwrite[t1, i] + tm.coref[t1, i]) * survival * tm.coref[t2, i]
    return float(total)


def link_probability_all_pairs_incremental(tm, pairs):
    """Evaluate many (t1, t2) queries via shared survival prefix products.

    Each cell's prefix product over (1 - o) is stored as (product of nonzero
    factors, count of zero factors), so exact-zero overwrite survival is
    handled without division by zero.
    """
    T, N = tm.overwrite.shape
    survivors = 1.0 - tm.overwrite
    nonzero = np.where(survivors == 0.0, 1.0, survivors)
    # prefix[t] covers factors for j in 1..t (row 0 never enters a product)
    prefix = np.ones((T, N))
    zeros = np.zeros((T, N), dtype=np.int64)
    prefix[1:] = np.cumprod(nonzero[1:], axis=0)
    zeros[1:] = np.cumsum(survivors[1:] == 0.0, axis=0)

    out = np.empty(len(pairs))
    for q, (t1, t2) in enumerate(pairs):
        _check_pair(tm, t1, t2)
        dead = zeros[t2] > zeros[t1]
        survival = np.where(dead, 0.0, prefix[t2] / prefix[t1])
        source = tm.overwrite[t1] + tm.coref[t1]
        out[q] = float(np.dot(source * survival, tm.coref[t2]))
    return out


def span_link_probability(tm, span_x, span_y):
    """Span-level link probability: max over all ordered cross-span token
    pairs, each oriented earlier-token-first; identical-token pairs skipped."""
    if tuple(span_x) == tuple(span_y):
        raise ValueError("span link probability needs two distinct spans")
    best = 0.0
    found = False
    for wx in range(span_x[0], span_x[1] + 1):
        for wy in range(span_y[0], span_y[1] + 1):
            if wx == wy:
                continue
            t1, t2 = (wx, wy) if wx < wy else (wy, wx)
            best = max(best, link_probability(tm, t1, t2))
            found = True
    if not found:
        raise ValueError("spans share all tokens; no valid ordered pair")
    return best
