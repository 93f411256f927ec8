"""Corpus-level BLEU over integer token sequences."""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_stats(hypotheses, references, max_n: int = 4):
    """Clipped n-gram matches, n-gram totals, hypothesis length and closest reference length."""
    if len(hypotheses) != len(references):
        raise ValueError("need one reference set per hypothesis")
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for hyp, refs in zip(hypotheses, references):
        if refs and not isinstance(refs[0], (list, tuple)):
            refs = [refs]
        hyp = list(hyp)
        refs = [list(x) for x in refs]
        c += len(hyp)
        # closest reference length, shorter on ties
        r += min((abs(len(x) - len(hyp)), len(x)) for x in refs)[1]
        for n in range(1, max_n + 1):
            h = ngrams(hyp, n)
            best: Counter = Counter()
            for x in refs:
                best |= ngrams(x, n)
            matches[n - 1] += sum(min(cnt, best[g]) for g, cnt in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return matches, totals, c, r


def corpus_bleu(hypotheses, references, max_n: int = 4) -> float:
    """BLEU in percent; ``references[i]`` is one sequence or a list of sequences."""
    if not hypotheses:
        raise ValueError("empty corpus")
    matches, totals, c, r = corpus_stats(hypotheses, references, max_n)
    if c == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = min(0.0, 1.0 - r / c)
    return 100.0 * math.exp(bp + log_p)


def sentence_bleu(hypothesis, references, max_n: int = 4) -> float:
    """Add-one smoothed (n >= 2) sentence BLEU, for debugging output only."""
    matches, totals, c, r = corpus_stats([hypothesis], [references], max_n)
    if c == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    log_p += sum(math.log((m + 1) / (t + 1)) for m, t in zip(matches[1:], totals[1:]))
    bp = min(0.0, 1.0 - r / c)
    return 100.0 * math.exp(bp + log_p / max_n)
