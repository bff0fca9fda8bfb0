"""Caption decoding: greedy, length-normalised beam search, and comparison-based
beam search (CBBS) that re-ranks beam candidates against the captions of the
nearest archive images.

Decoders only need a model object exposing ``start_id``, ``end_id``,
``vocab_size``, ``initial_state(ctx, k)`` and ``step(ctx, prev_tokens, state)``
returning ``(probs (K, V), state)``.  Decoder state is any nesting of
lists/tuples of arrays whose leading axis indexes hypotheses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import persist
from .errors import ParameterError, PersistenceError, ShapeError
from .metrics import bleu_sentence_smoothed, cider_sentence

ARCHIVE_MAGIC = b"JSSA1"
CONSENSUS_METRICS = ("bleu2", "cider")


@dataclass
class Hypothesis:
    tokens: tuple  # generated ids, including a final <end> when present
    log_prob: float
    finished: bool = False
    state: object = field(default=None, repr=False, compare=False)

    def score(self, alpha: float) -> float:
        n = max(len(self.tokens), 1)
        return self.log_prob / (n ** alpha) if alpha else self.log_prob

    def words(self, end_id: int) -> list[int]:
        """Token ids with the terminating ``<end>`` removed."""
        return list(self.tokens[:-1]) if self.tokens and self.tokens[-1] == end_id else list(self.tokens)


def _take(state, idx):
    if isinstance(state, np.ndarray):
        return state[idx]
    return type(state)(_take(s, idx) for s in state)


def _stack(states):
    first = states[0]
    if isinstance(first, np.ndarray):
        return np.concatenate(states, axis=0)
    return type(first)(_stack([s[k] for s in states]) for k in range(len(first)))


def _logprobs(model, ctx, prev, state):
    probs, new_state = model.step(ctx, np.asarray(prev, dtype=np.int64), state)
    with np.errstate(divide="ignore"):
        return np.log(probs), new_state


def greedy_decode(model, ctx, max_len: int) -> Hypothesis:
    """Argmax decoding from ``<start>``; ties go to the lowest token id."""
    if max_len < 1:
        raise ParameterError("max_len must be >= 1")
    state = model.initial_state(ctx, 1)
    prev = model.start_id
    tokens = []
    lp = 0.0
    while len(tokens) < max_len:
        logp, state = _logprobs(model, ctx, [prev], state)
        prev = int(np.argmax(logp[0]))
        lp += float(logp[0, prev])
        tokens.append(prev)
        if prev == model.end_id:
            break
    return Hypothesis(tuple(tokens), lp, True)


def beam_search(model, ctx, beam_width: int, max_len: int, alpha: float = 0.0) -> list[Hypothesis]:
    """Beam search over the full vocabulary.

    Finished hypotheses stay in the pool and compete with live expansions;
    the pool keeps the best ``beam_width`` by ``log_prob / len**alpha``,
    ties going to the lexicographically smaller token sequence.  Returns the
    finished hypotheses, best first.
    """
    if beam_width < 1:
        raise ParameterError("beam width must be >= 1")
    if max_len < 1:
        raise ParameterError("max_len must be >= 1")
    end = model.end_id
    pool = [Hypothesis((), 0.0, False, model.initial_state(ctx, 1))]

    def key(h):
        return (-h.score(alpha), h.tokens)

    for _ in range(max_len):
        live = [h for h in pool if not h.finished]
        if not live:
            break
        prev = [h.tokens[-1] if h.tokens else model.start_id for h in live]
        logp, state = _logprobs(model, ctx, prev, _stack([h.state for h in live]))
        cands = [h for h in pool if h.finished]
        for k, h in enumerate(live):
            row = logp[k]
            row_state = None
            for v in range(row.shape[0]):
                if row[v] == -math.inf:
                    continue
                toks = h.tokens + (v,)
                done = v == end or len(toks) >= max_len
                if not done and row_state is None:
                    row_state = _take(state, slice(k, k + 1))
                cands.append(Hypothesis(toks, h.log_prob + float(row[v]), done, None if done else row_state))
        cands.sort(key=key)
        pool = cands[:beam_width]
    return sorted((h for h in pool if h.finished), key=key)


# --------------------------------------------------------------------------
# archive and KNN


@dataclass
class ArchiveEntry:
    index: int
    feature: np.ndarray
    captions: list  # token-id lists (no <start>/<end>)
    source_id: str


@dataclass
class Archive:
    features: np.ndarray  # (n, d)
    captions: list  # per entry: list of token-id lists
    source_ids: list

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n = len(self.source_ids)
        if self.features.ndim != 2 or len(self.features) != n or len(self.captions) != n:
            raise ShapeError("archive features, captions and ids must align")
        for k, caps in enumerate(self.captions):
            if not caps:
                raise ShapeError(f"archive entry {k} has no captions")

    def __len__(self):
        return len(self.source_ids)

    def entry(self, k: int) -> ArchiveEntry:
        return ArchiveEntry(k, self.features[k], self.captions[k], self.source_ids[k])


def build_archive(model, items) -> Archive:
    """One entry per training image: its context vector plus its gold captions.

    ``items`` yields ``(source_id, ctx, caption_token_lists)`` where ``ctx``
    is an ``ImageContext`` (anything with a ``feature`` attribute).
    """
    feats, caps, ids = [], [], []
    for source_id, ctx, captions in items:
        feats.append(np.asarray(ctx.feature, dtype=np.float64).reshape(-1))
        caps.append([list(map(int, c)) for c in captions])
        ids.append(str(source_id))
    if not feats:
        raise ParameterError("cannot build an archive from an empty dataset")
    return Archive(np.stack(feats), caps, ids)


def cosine_similarities(archive: Archive, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != archive.features.shape[1]:
        raise ShapeError(f"query dim {q.shape[0]} != archive dim {archive.features.shape[1]}")
    norms = np.linalg.norm(archive.features, axis=1) * np.linalg.norm(q)
    dots = archive.features @ q
    out = np.zeros(len(archive))
    nz = norms > 0
    out[nz] = dots[nz] / norms[nz]
    return out


def knn_retrieve(archive: Archive, query, k: int) -> list[ArchiveEntry]:
    """Top-k entries by cosine similarity; ties keep ascending entry order."""
    if k < 0 or k > len(archive):
        raise ParameterError(f"k={k} outside [0, {len(archive)}]")
    sims = cosine_similarities(archive, query)
    order = np.argsort(-sims, kind="stable")[:k]
    return [archive.entry(int(i)) for i in order]


def archive_bytes(archive: Archive) -> bytes:
    meta = {"source_ids": archive.source_ids, "captions": archive.captions}
    return persist.pack(ARCHIVE_MAGIC, [meta], {"features": archive.features})


def save_archive(archive: Archive, path):
    persist.atomic_write(path, archive_bytes(archive))


def load_archive(path, vocab_size: int | None = None) -> Archive:
    blocks, tensors = persist.read_file(path, ARCHIVE_MAGIC)
    if len(blocks) != 1 or set(tensors) != {"features"}:
        raise PersistenceError("archive must hold one metadata block and a 'features' tensor")
    meta = blocks[0]
    try:
        archive = Archive(tensors["features"], meta["captions"], meta["source_ids"])
    except (KeyError, TypeError, ShapeError) as exc:
        raise PersistenceError(f"invalid archive metadata: {exc}") from exc
    if vocab_size is not None:
        for caps in archive.captions:
            for c in caps:
                if any(t < 0 or t >= vocab_size for t in c):
                    raise PersistenceError(f"archive caption token outside vocabulary of size {vocab_size}")
    return archive


# --------------------------------------------------------------------------
# CBBS


@dataclass
class CbbsConfig:
    beam_width: int = 5
    k: int = 5
    alpha: float = 0.7
    metric: str = "bleu2"

    def __post_init__(self):
        if self.beam_width < 1:
            raise ParameterError("beam_width must be >= 1")
        if self.k < 0:
            raise ParameterError("k must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha must lie in [0, 1]")
        if self.metric not in CONSENSUS_METRICS:
            raise ParameterError(f"metric must be one of {CONSENSUS_METRICS}")


def consensus_score(candidate, references, metric: str = "bleu2", corpus_refs=None) -> float:
    """Mean sentence score of ``candidate`` against each reference.

    ``bleu2`` is smoothed sentence BLEU-2.  ``cider`` scores against the
    whole reference list with idf from ``corpus_refs`` (a list of reference
    sets; defaults to one set per reference).
    """
    if not references:
        raise ParameterError("consensus needs at least one reference")
    if metric == "bleu2":
        return sum(bleu_sentence_smoothed(candidate, [r], 2) for r in references) / len(references)
    if metric == "cider":
        corpus = corpus_refs if corpus_refs is not None else [[r] for r in references]
        return cider_sentence(candidate, references, corpus)
    raise ParameterError(f"unknown consensus metric {metric!r}")


def cbbs_decode(model, ctx, archive: Archive | None, cfg: CbbsConfig, max_len: int) -> Hypothesis:
    """Beam candidates re-ranked by consensus with the k nearest archive captions.

    With ``k == 0`` or an empty archive the top beam hypothesis is returned.
    Ties in consensus go to the higher beam score, then the smaller sequence.
    """
    cands = beam_search(model, ctx, cfg.beam_width, max_len, cfg.alpha)
    if cfg.k == 0 or archive is None or len(archive) == 0 or not cands:
        return cands[0]
    neighbours = knn_retrieve(archive, ctx.feature, min(cfg.k, len(archive)))
    refs = [c for e in neighbours for c in e.captions]
    corpus = [e.captions for e in neighbours]
    end = model.end_id
    scored = [(consensus_score(h.words(end), refs, cfg.metric, corpus), h) for h in cands]
    scored.sort(key=lambda sh: (-sh[0], -sh[1].score(cfg.alpha), sh[1].tokens))
    return scored[0][1]
