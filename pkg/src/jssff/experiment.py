"""End-to-end pipeline pieces shared by the CLI commands."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .captioner import (
    CaptionModel,
    Example,
    ImageContext,
    ModelConfig,
    _encode_views,
    build_model,
    config_label,
    make_examples,
    train,
)
from .corpus import Dataset, Vocab, build_vocab, split_views
from .errors import DataError, JssffError, ParameterError
from .metrics import EvalReport, evaluate_all, tokenize
from .search import Archive, CbbsConfig, beam_search, build_archive, cbbs_decode, greedy_decode

log = logging.getLogger(__name__)

STRATEGIES = ("greedy", "beam", "cbbs")


@dataclass
class DecodeSettings:
    strategy: str = "cbbs"
    beam_width: int = 5
    k: int = 5
    alpha: float = 0.7
    metric: str = "bleu2"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    @property
    def cbbs(self) -> CbbsConfig:
        return CbbsConfig(self.beam_width, self.k, self.alpha, self.metric)


def load_examples(model: CaptionModel, ds: Dataset) -> list[Example]:
    return make_examples(model, [(ds.load_image(it), it.captions) for it in ds.items])


def batched_contexts(model: CaptionModel, examples: list[Example], batch_size: int = 64) -> list[ImageContext]:
    out = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        views = [np.stack([ex.views[v] for ex in chunk]) for v in range(len(chunk[0].views))]
        contexts = _encode_views(model, views)
        out.extend(ImageContext([c[k] for c in contexts]) for k in range(len(chunk)))
    return out


def gold_token_ids(vocab: Vocab, captions) -> list[list[int]]:
    return [vocab.encode(tokenize(c)) for c in captions]


def archive_from_split(model: CaptionModel, ds: Dataset, examples: list[Example]) -> Archive:
    ctxs = batched_contexts(model, examples)
    return build_archive(model, ((it.filename, ctx, gold_token_ids(model.vocab, it.captions))
                                 for it, ctx in zip(ds.items, ctxs)))


def decode_tokens(model: CaptionModel, ctx: ImageContext, settings: DecodeSettings,
                  archive: Archive | None = None) -> list[int]:
    max_len = model.config.max_caption_len - 1
    if settings.strategy == "greedy":
        hyp = greedy_decode(model, ctx, max_len)
    elif settings.strategy == "beam":
        hyp = beam_search(model, ctx, settings.beam_width, max_len, settings.alpha)[0]
    else:
        if archive is None and settings.k > 0:
            raise ParameterError("cbbs decoding needs an archive (or k=0)")
        hyp = cbbs_decode(model, ctx, archive, settings.cbbs, max_len)
    return hyp.words(model.end_id)


def detokenize(model: CaptionModel, ids) -> str:
    return " ".join(model.vocab.decode(ids))


@dataclass
class SplitEvaluation:
    report: EvalReport
    predictions: list = field(default_factory=list)  # dicts: filename, caption, references

    def predictions_jsonl(self) -> str:
        return "".join(json.dumps(p, sort_keys=True) + "\n" for p in self.predictions)


def evaluate_examples(model: CaptionModel, ds: Dataset, examples: list[Example],
                      settings: DecodeSettings, archive: Archive | None = None) -> SplitEvaluation:
    if not ds.items:
        raise DataError("cannot evaluate an empty split")
    cands, refs, preds = [], [], []
    for it, ctx in zip(ds.items, batched_contexts(model, examples)):
        words = model.vocab.decode(decode_tokens(model, ctx, settings, archive))
        gold = [tokenize(c) for c in it.captions]
        cands.append(words)
        refs.append(gold)
        preds.append({"filename": it.filename, "caption": " ".join(words),
                      "references": list(it.captions)})
    return SplitEvaluation(evaluate_all(cands, refs), preds)


def evaluate_gold(ds: Dataset) -> EvalReport:
    """Score each image's first gold caption against its own references."""
    if not ds.items:
        raise DataError("cannot evaluate an empty split")
    cands = [tokenize(it.captions[0]) for it in ds.items]
    refs = [[tokenize(c) for c in it.captions] for it in ds.items]
    return evaluate_all(cands, refs)


@dataclass
class CellResult:
    variant: str
    edge: str
    label: str
    report: EvalReport | None = None
    error: str | None = None
    model: CaptionModel | None = None
    evaluation: SplitEvaluation | None = None
    training: object = None
    archive: Archive | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.report is not None


def run_cell(ds: Dataset, cfg: ModelConfig, settings: DecodeSettings, split: str = "test",
             vocab: Vocab | None = None, min_count: int = 2, progress=None) -> CellResult:
    """Train one configuration on the train split and evaluate it on ``split``."""
    if split not in ("train", "val", "test"):
        raise ParameterError(f"unknown split {split!r}")
    train_ds, val_ds, test_ds = split_views(ds)
    eval_ds = {"train": train_ds, "val": val_ds, "test": test_ds}[split]
    if not eval_ds.items:
        raise DataError(f"the {split} split is empty")
    vocab = vocab or build_vocab(ds, min_count)
    model = build_model(cfg, vocab)
    train_ex = load_examples(model, train_ds)
    trlog = train(model, train_ex, progress=progress)
    archive = archive_from_split(model, train_ds, train_ex) if settings.strategy == "cbbs" else None
    ev = evaluate_examples(model, eval_ds, load_examples(model, eval_ds), settings, archive)
    return CellResult(cfg.variant, cfg.edge_detector, cfg.label, ev.report, model=model,
                      evaluation=ev, training=trlog, archive=archive)


def matrix_cells(edges, fusions, baseline: bool = True) -> list[tuple[str, str]]:
    """(variant, edge) pairs for every edge x fusion cell, plus the Original/Single baseline.

    ``edges`` may contain ``"original"`` (or ``"none"``) for the RGB-only view.
    """
    cells = []
    for e in edges:
        edge = "none" if e in ("original", "none") else e
        for f in fusions:
            if (f, edge) not in cells:
                cells.append((f, edge))
    if baseline and ("single", "none") not in cells:
        cells.insert(0, ("single", "none"))
    return cells


def run_matrix(ds: Dataset, base: ModelConfig, cells, settings: DecodeSettings, split: str = "test",
               min_count: int = 2, on_cell=None, progress=None) -> list[CellResult]:
    """Run every cell with the shared seed and vocabulary; failures become error rows.

    ``on_cell(result)`` is called after each cell so callers can flush partial reports.
    """
    vocab = build_vocab(ds, min_count)
    results = []
    for variant, edge in cells:
        try:
            cfg = replace(base, variant=variant, edge_detector=edge)
            res = run_cell(ds, cfg, settings, split, vocab, progress=progress)
        except JssffError as exc:
            log.warning("cell %s/%s failed: %s", variant, edge, exc)
            res = CellResult(variant, edge, config_label(variant, edge), error=str(exc))
        results.append(res)
        if on_cell is not None:
            on_cell(res)
    return results
