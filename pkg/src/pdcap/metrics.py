"""Caption metrics over token lists: BLEU-1..4 (no brevity penalty), ROUGE-L, CIDEr-D."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from pdcap import kernels
from pdcap.errors import ContractError

CIDER_SIGMA = 6.0
ROUGE_BETA2 = 1.2


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class NGramStats:
    """Per-sentence n-gram counts for n = 1..max_n."""

    counts: list

    @classmethod
    def of(cls, tokens, max_n=4):
        return cls([ngrams(tokens, n) for n in range(1, max_n + 1)])


def _clipped(candidate, references, n):
    cand = ngrams(candidate, n)
    max_ref = Counter()
    for ref in references:
        for g, c in ngrams(ref, n).items():
            if c > max_ref[g]:
                max_ref[g] = c
    matched = sum(min(c, max_ref[g]) for g, c in cand.items())
    return matched, max(len(candidate) - n + 1, 0)


def _geo_bleu(matched, totals):
    scores = []
    log_sum = 0.0
    for n in range(len(matched)):
        if matched[n] == 0 or totals[n] == 0:
            # zero precision at any order zeroes this and every longer order
            scores.extend([0.0] * (len(matched) - n))
            break
        log_sum += math.log(matched[n] / totals[n])
        scores.append(math.exp(log_sum / (n + 1)))
    return scores


def bleu(candidate, references, max_n=4):
    """[B@1, ..., B@max_n]: geometric means of clipped precisions, no brevity penalty."""
    if not candidate:
        return [0.0] * max_n
    stats = [_clipped(candidate, references, n) for n in range(1, max_n + 1)]
    return _geo_bleu([m for m, _ in stats], [t for _, t in stats])


def _lcs(a, b):
    ids = {}
    ia = [ids.setdefault(t, len(ids)) for t in a]
    ib = [ids.setdefault(t, len(ids)) for t in b]
    return kernels.lcs_length(ia, ib)


def rouge_l(candidate, references, beta2=ROUGE_BETA2):
    """Best LCS F-measure over references, ``F = (1+b2) P R / (R + b2 P)``."""
    best = 0.0
    if not candidate:
        return best
    for ref in references:
        if not ref:
            continue
        lcs = _lcs(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        best = max(best, (1 + beta2) * p * r / (r + beta2 * p))
    return best


class CiderD:
    """CIDEr-D scorer with document frequencies from a reference corpus.

    ``corpus_refs`` is one list of tokenised references per image.
    """

    def __init__(self, corpus_refs, n=4, sigma=CIDER_SIGMA):
        corpus_refs = list(corpus_refs)
        if not corpus_refs:
            raise ContractError("CIDEr-D needs a non-empty reference corpus for document frequencies")
        self.n = n
        self.sigma = sigma
        self.df = Counter()
        for refs in corpus_refs:
            seen = set()
            for ref in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(ref, k))
            self.df.update(seen)
        self.log_docs = math.log(float(len(corpus_refs)))

    def _vec(self, tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * (self.log_docs - math.log(max(1.0, self.df[g])))
                 for g, tf in ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def _sim(self, cv, cn, rv, rn, delta):
        total = 0.0
        for k in range(self.n):
            val = 0.0
            for g, x in cv[k].items():
                y = rv[k].get(g)
                if y is not None:
                    val += min(x, y) * y
            if cn[k] != 0 and rn[k] != 0:
                val /= cn[k] * rn[k]
            total += val * math.exp(-(delta * delta) / (2 * self.sigma ** 2))
        return total / self.n

    def score(self, candidate, references):
        if not references:
            raise ContractError("CIDEr-D needs at least one reference")
        cv, cn = self._vec(candidate)
        s = 0.0
        for ref in references:
            rv, rn = self._vec(ref)
            s += self._sim(cv, cn, rv, rn, len(candidate) - len(ref))
        return 10.0 * s / len(references)


def cider_d(candidate, references, corpus_refs):
    return CiderD(corpus_refs).score(candidate, references)


@dataclass
class EvalReport:
    bleu: list
    rouge_l: float
    cider_d: float
    n: int

    def to_json(self):
        return {"bleu": list(self.bleu), "rouge_l": self.rouge_l, "cider_d": self.cider_d, "n": self.n}


def corpus_eval(pairs, max_n=4) -> EvalReport:
    """Corpus BLEU from pooled clipped counts; ROUGE-L and CIDEr-D as sentence means.

    ``pairs`` is a sequence of (candidate tokens, list of reference token lists).
    Sums run over pairs sorted by content so the report is order-independent.
    """
    pairs = sorted(((list(c), sorted(list(r) for r in refs)) for c, refs in pairs))
    if not pairs:
        raise ContractError("cannot evaluate an empty corpus")
    matched, totals = [0] * max_n, [0] * max_n
    for cand, refs in pairs:
        for n in range(1, max_n + 1):
            m, t = _clipped(cand, refs, n)
            matched[n - 1] += m
            totals[n - 1] += t
    scorer = CiderD([refs for _, refs in pairs])
    rouge = math.fsum(rouge_l(c, refs) for c, refs in pairs) / len(pairs)
    cider = math.fsum(scorer.score(c, refs) for c, refs in pairs) / len(pairs)
    return EvalReport(_geo_bleu(matched, totals), rouge, cider, len(pairs))
