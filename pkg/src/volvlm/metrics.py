"""Text-generation and diagnosis metrics.

All text metrics tokenize by lowercasing and splitting on whitespace and
score one candidate against one reference. Corpus scores are the arithmetic
mean of per-sample scores.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

POSITIVE, NEGATIVE, UNKNOWN = "positive", "negative", "unknown"

TEXT_METRICS = ("bleu1", "rouge1", "meteor_exact", "token_f1")

# beyond this many partial alignments per position the chunk search keeps the best ones only
_CHUNK_STATE_BUDGET = 4000


def tokenize(text: str):
    return text.lower().split()


def _clipped_overlap(c, r) -> int:
    rc = Counter(r)
    return sum(min(n, rc[w]) for w, n in Counter(c).items())


def bleu1(candidate: str, reference: str) -> float:
    c, r = tokenize(candidate), tokenize(reference)
    if not c:
        return 0.0
    p1 = _clipped_overlap(c, r) / len(c)
    bp = 1.0 if len(c) > len(r) else math.exp(1.0 - len(r) / len(c))
    return p1 * bp


def _unigram_f(c, r) -> float:
    if not c or not r:
        return 0.0
    m = _clipped_overlap(c, r)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    return 2 * p * rec / (p + rec)


def rouge1(candidate: str, reference: str) -> float:
    return _unigram_f(tokenize(candidate), tokenize(reference))


def token_f1(candidate: str, reference: str) -> float:
    """Bag-of-tokens F1. Purely lexical; not a semantic similarity score."""
    return _unigram_f(tokenize(candidate), tokenize(reference))


def min_chunks(c, r):
    """(matches, chunks) for an exact-match alignment with the most matches and,
    among those, the fewest chunks.

    A chunk is a run of matched words contiguous and in the same order in
    both sequences. Dynamic program over candidate positions with state
    (reference position of the previous candidate word, used reference set);
    exact unless a position exceeds the state budget.
    """
    rc, cc = Counter(r), Counter(c)
    quota = {w: min(cc[w], rc[w]) for w in cc}
    m = sum(quota.values())
    if m == 0:
        return 0, 0
    ref_pos, ref_mask = {}, Counter()
    for j, w in enumerate(r):
        ref_pos.setdefault(w, []).append(j)
        ref_mask[w] |= 1 << j
    seen = Counter()
    states = {(-1, 0): 0}
    for i, w in enumerate(c):
        seen[w] += 1
        nxt = {}
        q = quota.get(w, 0)
        skips_allowed = cc[w] - q
        for (prev, used), cost in states.items():
            matched = (used & ref_mask[w]).bit_count()
            skipped = seen[w] - 1 - matched
            if skipped < skips_allowed:
                key = (-1, used)
                if nxt.get(key, 1 << 30) > cost:
                    nxt[key] = cost
            if matched < q:
                for j in ref_pos[w]:
                    if used >> j & 1:
                        continue
                    step = 0 if (prev >= 0 and j == prev + 1) else 1
                    key = (j, used | (1 << j))
                    if nxt.get(key, 1 << 30) > cost + step:
                        nxt[key] = cost + step
        if len(nxt) > _CHUNK_STATE_BUDGET:
            nxt = dict(sorted(nxt.items(), key=lambda kv: (kv[1], kv[0]))[:_CHUNK_STATE_BUDGET])
        states = nxt
    return m, min(states.values())


def meteor_exact(candidate: str, reference: str, alpha=0.9, beta=3.0, gamma=0.5) -> float:
    """METEOR restricted to exact unigram matches (no stemming or synonyms).

    F_mean = P R / (alpha P + (1 - alpha) R), i.e. 10PR / (R + 9P) at the
    standard alpha; penalty = gamma (chunks / m)^beta.
    """
    c, r = tokenize(candidate), tokenize(reference)
    if not c or not r:
        return 0.0
    m, chunks = min_chunks(c, r)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    f_mean = p * rec / (alpha * p + (1 - alpha) * rec)
    penalty = gamma * (chunks / m) ** beta
    return f_mean * (1.0 - penalty)


_TEXT_FUNCS = {"bleu1": bleu1, "rouge1": rouge1, "meteor_exact": meteor_exact, "token_f1": token_f1}


@dataclass
class MetricReport:
    n: int
    means: dict
    per_sample: list = field(repr=False)

    def scaled(self):
        """Corpus means x100, the scale used in result tables."""
        return {k: 100.0 * v for k, v in self.means.items()}


def text_metrics(candidates, references) -> MetricReport:
    if len(candidates) != len(references):
        raise ValueError(f"length mismatch: {len(candidates)} candidates vs {len(references)} references")
    per = [{name: f(c, r) for name, f in _TEXT_FUNCS.items()} for c, r in zip(candidates, references)]
    n = len(per)
    means = {name: (sum(p[name] for p in per) / n if n else 0.0) for name in TEXT_METRICS}
    return MetricReport(n, means, per)


# --------------------------------------------------------------------------
# diagnosis
# --------------------------------------------------------------------------


def parse_diagnosis_answer(answer: str) -> str:
    toks = tokenize(answer)
    if not toks:
        return UNKNOWN
    head = toks[0].strip(".,;:!?")
    if head == "yes":
        return POSITIVE
    if head == "no":
        return NEGATIVE
    return UNKNOWN


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def _as_pred(p):
    if isinstance(p, str):
        return p if p in (POSITIVE, NEGATIVE, UNKNOWN) else parse_diagnosis_answer(p)
    if p is None:
        return UNKNOWN
    return POSITIVE if p else NEGATIVE


def confusion(predictions, labels) -> ConfusionCounts:
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels")
    tp = fp = tn = fn = 0
    for p, y in zip(predictions, labels):
        p = _as_pred(p)
        if y:
            if p == POSITIVE:
                tp += 1
            else:
                fn += 1  # negative or unknown
        else:
            if p == NEGATIVE:
                tn += 1
            else:
                fp += 1
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(a, b):
    return a / b if b else 0.0


def classification_metrics(predictions, labels):
    """Pooled binary (BACC, precision, recall, F1); unknown predictions count as wrong.

    ``predictions`` entries may be booleans, 'positive'/'negative'/'unknown',
    or free-text answers (parsed by their leading token).
    """
    cc = confusion(predictions, labels)
    precision = _ratio(cc.tp, cc.tp + cc.fp)
    recall = _ratio(cc.tp, cc.tp + cc.fn)
    specificity = _ratio(cc.tn, cc.tn + cc.fp)
    f1 = _ratio(2 * precision * recall, precision + recall)
    bacc = (recall + specificity) / 2
    return bacc, precision, recall, f1
