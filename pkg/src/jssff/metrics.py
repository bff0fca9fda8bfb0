"""Tokenizer and caption metrics: BLEU-1..4, METEOR-lite, ROUGE-L, CIDEr-D.

Candidates are token lists; references are, per candidate, a list of token
lists.  Natural logarithms throughout.

METEOR-lite aligns exact unigram matches only (no stemming, synonyms or
paraphrase tables), so its values are not comparable with official METEOR
numbers.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import astuple, dataclass, fields

from .errors import ParameterError

SMOOTH_EPS = 0.1

_TOKEN_RE = re.compile(r"[^\W_]+(?:-[^\W_]+)*")


def tokenize(raw: str) -> list[str]:
    """Lowercase, keep alphanumeric runs joined by intra-word hyphens."""
    return _TOKEN_RE.findall(raw.lower())


@dataclass(frozen=True)
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float

    def values(self) -> tuple:
        return astuple(self)


REPORT_FIELDS = tuple(f.name for f in fields(EvalReport))
REPORT_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr")


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _max_ref_counts(refs, n) -> Counter:
    out = Counter()
    for r in refs:
        for g, c in _ngrams(r, n).items():
            if c > out[g]:
                out[g] = c
    return out


def _closest_ref_len(c_len, refs) -> int:
    return min((abs(len(r) - c_len), len(r)) for r in refs)[1]


def _check_corpus(cands, refs):
    if not cands:
        raise ParameterError("empty corpus")
    if len(cands) != len(refs):
        raise ParameterError(f"{len(cands)} candidates but {len(refs)} reference sets")
    for k, rs in enumerate(refs):
        if not rs:
            raise ParameterError(f"reference set {k} is empty")


def _brevity(c_len, r_len) -> float:
    if c_len == 0:
        return 0.0
    return 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)


def bleu_corpus(cands, refs, max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n with clipped counts and a corpus brevity penalty."""
    _check_corpus(cands, refs)
    clipped = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, rs in zip(cands, refs):
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), rs)
        for n in range(1, max_n + 1):
            cnt = _ngrams(cand, n)
            ref_max = _max_ref_counts(rs, n)
            clipped[n - 1] += sum(min(c, ref_max[g]) for g, c in cnt.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    bp = _brevity(c_len, r_len)
    scores = []
    log_sum = 0.0
    dead = False
    for n in range(max_n):
        if dead or clipped[n] == 0:
            dead = True
            scores.append(0.0)
            continue
        log_sum += math.log(clipped[n] / total[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def bleu_sentence_smoothed(cand, refs, n: int = 2, eps: float = SMOOTH_EPS) -> float:
    """Sentence BLEU-n; zero match counts are replaced by ``eps``.

    Orders above the candidate length are dropped, so a one-word candidate
    equal to its reference scores 1.  An empty candidate scores 0.
    """
    if not refs:
        raise ParameterError("sentence BLEU needs at least one reference")
    if not cand:
        return 0.0
    order = min(n, len(cand))
    log_sum = 0.0
    for m in range(1, order + 1):
        cnt = _ngrams(cand, m)
        ref_max = _max_ref_counts(refs, m)
        hit = sum(min(c, ref_max[g]) for g, c in cnt.items())
        log_sum += math.log((hit if hit > 0 else eps) / (len(cand) - m + 1))
    bp = _brevity(len(cand), _closest_ref_len(len(cand), refs))
    return bp * math.exp(log_sum / order)


def lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand, refs, beta: float = 1.2) -> float:
    best = 0.0
    b2 = beta * beta
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        rec = lcs / len(r)
        best = max(best, (1 + b2) * p * rec / (rec + b2 * p))
    return best


def rouge_l(cands, refs, beta: float = 1.2) -> float:
    _check_corpus(cands, refs)
    return sum(rouge_l_sentence(c, rs, beta) for c, rs in zip(cands, refs)) / len(cands)


class _CiderD:
    def __init__(self, refs, n, sigma):
        self.n = n
        self.sigma = sigma
        self.df = Counter()
        for rs in refs:
            seen = set()
            for r in rs:
                for k in range(1, n + 1):
                    seen.update(_ngrams(r, k))
            self.df.update(seen)
        self.log_n = math.log(len(refs))

    def vec(self, tokens):
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: c * (self.log_n - math.log(max(1.0, self.df[g])))
                 for g, c in _ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def score(self, cand, rs) -> float:
        vc, nc = self.vec(cand)
        total = 0.0
        for r in rs:
            vr, nr = self.vec(r)
            delta = len(cand) - len(r)
            pen = math.exp(-(delta * delta) / (2.0 * self.sigma ** 2))
            for k in range(self.n):
                val = sum(min(x, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, x in vc[k].items())
                if nc[k] != 0.0 and nr[k] != 0.0:
                    val /= nc[k] * nr[k]
                total += val * pen
        return 10.0 * total / (self.n * len(rs))


def cider_d(cands, refs, n: int = 4, sigma: float = 6.0) -> float:
    """CIDEr-D with idf taken from the reference sets (one document per image).

    A single-image corpus gives idf = 0 everywhere and therefore scores 0.
    """
    _check_corpus(cands, refs)
    scorer = _CiderD(refs, n, sigma)
    return sum(scorer.score(c, rs) for c, rs in zip(cands, refs)) / len(cands)


def cider_sentence(cand, refs, corpus_refs, n: int = 4, sigma: float = 6.0) -> float:
    """CIDEr-D of one candidate with idf from ``corpus_refs`` (a list of reference sets)."""
    return _CiderD(corpus_refs, n, sigma).score(cand, refs)


def _align(cand, ref):
    used = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(cand):
        for j, r in enumerate(ref):
            if not used[j] and r == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_sentence(cand, refs) -> float:
    best = 0.0
    for ref in refs:
        pairs = _align(cand, ref)
        m = len(pairs)
        if m == 0:
            continue
        chunks = 1
        for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
            if i1 != i0 + 1 or j1 != j0 + 1:
                chunks += 1
        p = m / len(cand)
        r = m / len(ref)
        fmean = p * r / (0.9 * p + 0.1 * r)
        best = max(best, fmean * (1.0 - 0.5 * (chunks / m) ** 3))
    return best


def meteor_lite(cands, refs) -> float:
    _check_corpus(cands, refs)
    return sum(meteor_sentence(c, rs) for c, rs in zip(cands, refs)) / len(cands)


def evaluate_all(cands, refs) -> EvalReport:
    b = bleu_corpus(cands, refs, 4)
    return EvalReport(b[0], b[1], b[2], b[3], meteor_lite(cands, refs),
                      rouge_l(cands, refs), cider_d(cands, refs))
