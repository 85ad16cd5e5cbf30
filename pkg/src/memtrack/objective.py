"""Training loss: weighted binary cross-entropy over ground-truth and implied
coreference links, plus a masked entity-mention regularizer.

Implied supervision per instance:
    - self-links: inside each annotated span, every non-head token links to
      the head (first) token with label 1;
    - the two (name, pronoun) pairs carry the instance's labels;
    - the (name A, name B) pair is a negative by dataset construction.
All pairs are token-level and oriented earlier-token-first.
"""

from dataclasses import dataclass

import torch

PROB_EPS = 1.0e-7

SELF_LINK = "self_link"
POSITIVE = "positive"
NEGATIVE = "negative"

DEFAULT_WEIGHTS = {SELF_LINK: 1.0, POSITIVE: 5.0, NEGATIVE: 50.0}
DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class LabeledPair:
    first: int
    second: int
    label: int
    kind: str
    weight: float


@dataclass
class LossBreakdown:
    coref: torch.Tensor
    entity: torch.Tensor
    total: torch.Tensor
    lam: float


def _span_tokens(span):
    return range(span[0], span[1] + 1)


def _oriented(a, b):
    return (a, b) if a < b else (b, a)


def expand_labels(instance, weights=None):
    """Expand an instance's span-pair annotations into token-level pairs."""
    w = dict(DEFAULT_WEIGHTS)
    if weights:
        w.update(weights)
    pairs = []
    for span in instance.spans:
        head = span[0]
        for tok in _span_tokens(span):
            if tok != head:
                pairs.append(LabeledPair(head, tok, 1, SELF_LINK, w[SELF_LINK]))
    for name_span, label in ((instance.span_a, instance.label_a),
                             (instance.span_b, instance.label_b)):
        kind = POSITIVE if label else NEGATIVE
        for tok in _span_tokens(name_span):
            for ptok in _span_tokens(instance.span_p):
                if tok != ptok:
                    a, b = _oriented(tok, ptok)
                    pairs.append(LabeledPair(a, b, int(label), kind, w[kind]))
    for atok in _span_tokens(instance.span_a):
        for btok in _span_tokens(instance.span_b):
            a, b = _oriented(atok, btok)
            pairs.append(LabeledPair(a, b, 0, NEGATIVE, w[NEGATIVE]))
    return pairs


def pair_link_probability(overwrite, coref, t1, t2):
    """Differentiable link probability from (T, N) trace tensors."""
    survival = torch.prod(1.0 - overwrite[t1 + 1:t2 + 1], dim=0)
    return torch.sum((overwrite[t1] + coref[t1]) * survival * coref[t2])


@dataclass
class PairSet:
    """expand_labels precomputed as tensors for the vectorized loss.  The
    mask row for pair (t1, t2) is 1 on the survival window (t1, t2]."""
    firsts: torch.Tensor
    seconds: torch.Tensor
    labels: torch.Tensor
    weights: torch.Tensor
    mask: torch.Tensor


def pair_set(instance, weights=None):
    pairs = expand_labels(instance, weights)
    T = instance.doc.num_tokens
    firsts = torch.tensor([p.first for p in pairs], dtype=torch.long)
    seconds = torch.tensor([p.second for p in pairs], dtype=torch.long)
    mask = torch.zeros(len(pairs), T)
    for row, p in enumerate(pairs):
        mask[row, p.first + 1:p.second + 1] = 1.0
    return PairSet(firsts=firsts, seconds=seconds,
                   labels=torch.tensor([float(p.label) for p in pairs]),
                   weights=torch.tensor([p.weight for p in pairs]),
                   mask=mask)


def coref_loss_set(ps, overwrite, coref):
    """Same quantity as coref_loss, all pairs at once."""
    if ps.firsts.numel() == 0:
        return overwrite.new_zeros(())
    mask = ps.mask.unsqueeze(-1)
    survival = ((1.0 - overwrite).unsqueeze(0) * mask + (1.0 - mask)).prod(dim=1)
    p = ((overwrite[ps.firsts] + coref[ps.firsts]) * survival
         * coref[ps.seconds]).sum(dim=-1)
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    bce = -(ps.labels * torch.log(p) + (1.0 - ps.labels) * torch.log(1.0 - p))
    return (ps.weights * bce).sum()


def coref_loss(pairs, overwrite, coref):
    """Weighted binary cross-entropy over labeled token pairs."""
    total = overwrite.new_zeros(())
    for pair in pairs:
        p = pair_link_probability(overwrite, coref, pair.first, pair.second)
        p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
        if pair.label:
            total = total - pair.weight * torch.log(p)
        else:
            total = total - pair.weight * torch.log(1.0 - p)
    return total


def entity_loss(entity_probs, spans):
    """Mean entity probability outside the annotated spans (0 if fully masked)."""
    mask = torch.ones_like(entity_probs)
    for first, last in spans:
        mask[first:last + 1] = 0.0
    denom = mask.sum()
    if float(denom) == 0.0:
        return entity_probs.new_zeros(())
    return torch.sum(entity_probs * mask) / denom


def total_loss(instance, trace, lam=DEFAULT_LAMBDA, weights=None, pairs=None):
    """pairs: optional precomputed pair_set(instance, weights), so the pair
    expansion is not rebuilt every epoch."""
    ps = pairs if pairs is not None else pair_set(instance, weights)
    closs = coref_loss_set(ps, trace.overwrite, trace.coref)
    eloss = entity_loss(trace.entity_prob, instance.spans)
    return LossBreakdown(coref=closs, entity=eloss,
                         total=closs + lam * eloss, lam=lam)
