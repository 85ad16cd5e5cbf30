import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from memtrack import link, objective
from memtrack.corpus import CorefInstance, Document

from conftest import random_trace_matrix


def make_instance(T, span_a, span_b, span_p, label_a, label_b):
    tokens = [f"t{i}" for i in range(T)]
    offsets = []
    start = 0
    for tok in tokens:
        offsets.append((start, start + len(tok)))
        start += len(tok) + 1
    doc = Document("doc-0", tokens, offsets,
                   np.zeros((T, 3), dtype=np.float32))
    return CorefInstance(doc=doc, span_a=span_a, span_b=span_b, span_p=span_p,
                         label_a=label_a, label_b=label_b)


def test_pair_count_combinatorial_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        # three disjoint spans with random widths inside a T=30 doc
        widths = rng.integers(1, 4, size=3)
        starts = np.cumsum(np.concatenate([[0], widths[:-1] + 2])) + 1
        spans = [(int(s), int(s + w - 1)) for s, w in zip(starts, widths)]
        inst = make_instance(30, spans[0], spans[1], spans[2], True, False)
        pairs = objective.expand_labels(inst)
        a, b, p = widths
        want = (a - 1) + (b - 1) + (p - 1) + a * p + b * p + a * b
        assert len(pairs) == want


def test_expand_labels_kinds_weights_orientation():
    inst = make_instance(10, (4, 5), (7, 7), (1, 1), False, True)
    pairs = objective.expand_labels(inst)
    for pair in pairs:
        assert pair.first < pair.second
    by_kind = {}
    for pair in pairs:
        by_kind.setdefault(pair.kind, []).append(pair)
    # self link inside A only (B, P are single tokens)
    assert [(q.first, q.second, q.label, q.weight)
            for q in by_kind[objective.SELF_LINK]] == [(4, 5, 1, 1.0)]
    # A is the negative name (label False), B the positive; A-B also negative
    pos = {(q.first, q.second) for q in by_kind[objective.POSITIVE]}
    neg = {(q.first, q.second) for q in by_kind[objective.NEGATIVE]}
    assert pos == {(1, 7)}
    assert neg == {(1, 4), (1, 5), (4, 7), (5, 7)}
    assert all(q.weight == 5.0 for q in by_kind[objective.POSITIVE])
    assert all(q.weight == 50.0 for q in by_kind[objective.NEGATIVE])


def test_custom_weights_override():
    inst = make_instance(8, (1, 1), (3, 3), (5, 5), True, False)
    pairs = objective.expand_labels(inst, weights={objective.NEGATIVE: 7.0})
    negs = [q for q in pairs if q.kind == objective.NEGATIVE]
    assert negs and all(q.weight == 7.0 for q in negs)


def test_pair_link_probability_matches_numpy_path():
    rng = np.random.default_rng(1)
    o, c = random_trace_matrix(rng, 9, 3)
    tm = link.TraceMatrix(o, c)
    ot = torch.tensor(o)
    ct = torch.tensor(c)
    for t1, t2 in [(0, 1), (2, 5), (0, 8), (6, 7)]:
        got = float(objective.pair_link_probability(ot, ct, t1, t2))
        assert got == pytest.approx(link.link_probability(tm, t1, t2),
                                    abs=1e-12)


def test_coref_loss_three_pair_hand_case():
    # independent scalar recomputation with weights 1 / 5 / 50
    rng = np.random.default_rng(2)
    o, c = random_trace_matrix(rng, 8, 2)
    ot, ct = torch.tensor(o), torch.tensor(c)
    pairs = [
        objective.LabeledPair(0, 1, 1, objective.SELF_LINK, 1.0),
        objective.LabeledPair(2, 5, 1, objective.POSITIVE, 5.0),
        objective.LabeledPair(3, 6, 0, objective.NEGATIVE, 50.0),
    ]
    got = float(objective.coref_loss(pairs, ot, ct))
    tm = link.TraceMatrix(o, c)
    eps = objective.PROB_EPS

    def clamp(p):
        return min(max(p, eps), 1.0 - eps)

    want = (-1.0 * math.log(clamp(link.link_probability(tm, 0, 1)))
            - 5.0 * math.log(clamp(link.link_probability(tm, 2, 5)))
            - 50.0 * math.log(1.0 - clamp(link.link_probability(tm, 3, 6))))
    assert got == pytest.approx(want, rel=1e-10)


def test_coref_loss_clamps_extreme_probabilities():
    ot = torch.zeros(4, 2, dtype=torch.float64)
    ct = torch.zeros(4, 2, dtype=torch.float64)
    pairs = [objective.LabeledPair(0, 2, 1, objective.POSITIVE, 5.0)]
    val = float(objective.coref_loss(pairs, ot, ct))
    assert math.isfinite(val)
    assert val == pytest.approx(-5.0 * math.log(objective.PROB_EPS), rel=1e-9)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_entity_loss_masked_mean_oracle(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(6, 20))
    e = rng.uniform(size=T)
    starts = sorted(rng.choice(T, size=3, replace=False))
    spans = [(int(s), min(int(s) + int(rng.integers(0, 2)), T - 1))
             for s in starts]
    got = float(objective.entity_loss(torch.tensor(e), spans))
    mask = np.ones(T)
    for first, last in spans:
        mask[first:last + 1] = 0.0
    if mask.sum() == 0:
        assert got == 0.0
    else:
        assert got == pytest.approx(float((e * mask).sum() / mask.sum()),
                                    rel=1e-9)


def test_entity_loss_fully_masked_is_zero():
    e = torch.tensor([0.3, 0.9, 0.1])
    assert float(objective.entity_loss(e, [(0, 2)])) == 0.0


def test_entity_loss_constant_oracle():
    e = torch.full((10,), 0.3)
    assert float(objective.entity_loss(e, [(0, 0), (4, 5), (9, 9)])) == \
        pytest.approx(0.3, rel=1e-6)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_coref_loss_set_matches_reference(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(10, 26))
    starts = sorted(rng.choice(np.arange(0, T - 1, 2), size=3, replace=False))
    spans = [(int(s), int(s) + int(rng.integers(0, 2))) for s in starts]
    inst = make_instance(T, spans[0], spans[1], spans[2],
                         bool(rng.integers(2)), bool(rng.integers(2)))
    o, c = random_trace_matrix(rng, T, 4)
    ot, ct = torch.tensor(o), torch.tensor(c)
    pairs = objective.expand_labels(inst)
    ps = objective.pair_set(inst)
    assert float(objective.coref_loss_set(ps, ot, ct)) == pytest.approx(
        float(objective.coref_loss(pairs, ot, ct)), rel=1e-9)


def test_total_loss_composition():
    rng = np.random.default_rng(3)
    o, c = random_trace_matrix(rng, 10, 2)
    inst = make_instance(10, (1, 1), (4, 4), (8, 8), True, False)

    class FakeTrace:
        overwrite = torch.tensor(o)
        coref = torch.tensor(c)
        entity_prob = torch.tensor(rng.uniform(size=10))

    tr = FakeTrace()
    br = objective.total_loss(inst, tr, lam=0.25)
    assert float(br.total) == pytest.approx(
        float(br.coref) + 0.25 * float(br.entity), rel=1e-9)
    pairs = objective.expand_labels(inst)
    assert float(br.coref) == pytest.approx(
        float(objective.coref_loss(pairs, tr.overwrite, tr.coref)), rel=1e-12)
