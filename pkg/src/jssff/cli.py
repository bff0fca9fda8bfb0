"""Command-line harness: synthetic data, training, decoding, evaluation, comparisons.

Every command exits 0 on success, 2 on usage errors and 1 on any other
failure.  Binary artifacts and reports are written to a temporary sibling
and renamed into place.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import plotting, report
from .captioner import (
    VARIANTS,
    ModelConfig,
    build_model,
    config_json,
    encode_image,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .corpus import SPLITS, build_vocab, gen_synthetic, load_dataset_json, split_views
from .errors import ConfigError, DataError, JssffError
from .experiment import (
    STRATEGIES,
    CellResult,
    DecodeSettings,
    archive_from_split,
    decode_tokens,
    detokenize,
    evaluate_examples,
    evaluate_gold,
    load_examples,
    matrix_cells,
    run_matrix,
)
from .imagecore import read_image
from .persist import atomic_write
from .search import load_archive, save_archive

log = logging.getLogger("jssff")

EDGE_NAMES = ("none", "original", "canny", "sobel", "laplacian")

PRESETS = {
    "compare-edges": {"edges": ["canny", "sobel", "laplacian"], "fusions": ["early"], "baseline": True},
    "compare-fusion": {"edges": ["laplacian"], "fusions": ["single", "early", "late"], "baseline": True},
    "ablate": {"edges": ["laplacian"], "fusions": ["single", "early", "late"], "baseline": False},
}

DECODE_KEYS = {"strategy", "beam_width", "k", "alpha", "metric"}
CONFIG_KEYS = {"data", "synthetic", "model", "decode", "edges", "fusions", "split", "min_count", "baseline"}


class UsageError(Exception):
    """Bad command-line usage (exit status 2)."""


# --------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Read the JSON experiment config; unknown top-level keys are rejected."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    if "decode" in doc and set(doc["decode"]) - DECODE_KEYS:
        raise ConfigError(f"{path}: unknown decode keys {sorted(set(doc['decode']) - DECODE_KEYS)}")
    return doc


def _split_list(values):
    out = []
    for v in values or []:
        out += [x.strip() for x in v.split(",") if x.strip()]
    return out


def _model_config(conf: dict, args, **overrides) -> ModelConfig:
    d = dict(conf.get("model", {}))
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    d.update(overrides)
    return ModelConfig.from_dict(d)


def _decode_settings(conf: dict, args) -> DecodeSettings:
    d = dict(conf.get("decode", {}))
    if getattr(args, "strategy", None):
        d["strategy"] = args.strategy
    if getattr(args, "beam", None) is not None:
        d["beam_width"] = args.beam
    if getattr(args, "knn", None) is not None:
        d["k"] = args.knn
    return DecodeSettings(**d)


def _dataset(conf: dict, args, out: Path | None = None):
    path = getattr(args, "data", None) or conf.get("data")
    n_synth = getattr(args, "synthetic", None)
    synth = conf.get("synthetic")
    if path:
        if not Path(path).is_file():
            raise FileNotFoundError(f"dataset not found: {path}")
        return load_dataset_json(path)
    if n_synth or synth:
        synth = dict(synth or {})
        if n_synth:
            synth["n"] = n_synth
        if getattr(args, "synthetic_seed", None) is not None:
            synth["seed"] = args.synthetic_seed
        if out is None:
            raise UsageError("a synthetic corpus needs --out")
        return gen_synthetic(int(synth.get("n", 500)), int(synth.get("seed", 7)), out / "corpus")
    raise UsageError("no dataset: pass --data (or --synthetic N, or set 'data' in --config)")


def _write_text(path: Path, text: str):
    atomic_write(path, text.encode("utf-8"))


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _progress(label):
    start = time.monotonic()

    def cb(rec):
        log.info("[%s] epoch %d loss %.4f acc %.4f (%.0fs)", label, rec.epoch, rec.loss,
                 rec.token_accuracy, time.monotonic() - start)
    return cb


# --------------------------------------------------------------------------
# commands


def cmd_gen_synth(args) -> int:
    if args.n < 10:
        raise UsageError(f"--n must be at least 10, got {args.n}")
    out = Path(args.out)
    ds = gen_synthetic(args.n, args.seed, out)
    tr, va, te = split_views(ds)
    print(f"train {len(tr)}  val {len(va)}  test {len(te)}")
    print(f"sha256 {_tree_digest(out)}")
    return 0


def cmd_train(args) -> int:
    conf = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overrides = {}
    if args.edge:
        overrides["edge_detector"] = "none" if args.edge == "original" else args.edge
    if args.fusion:
        overrides["variant"] = args.fusion
    cfg = _model_config(conf, args, **overrides)
    ds = _dataset(conf, args, out)
    vocab = build_vocab(ds, int(conf.get("min_count", 2)))
    model = build_model(cfg, vocab)
    train_ds = split_views(ds)[0]
    trlog = train(model, load_examples(model, train_ds), progress=_progress(cfg.label))
    save_checkpoint(model, out / "model.jssf")
    _write_text(out / "training_log.csv", trlog.to_csv())
    _write_text(out / "config.json", config_json(cfg) + "\n")
    plotting.training_curve(trlog, out / "training_curve.png", cfg.label)
    last = trlog.epochs[-1] if trlog.epochs else None
    print(f"trained {cfg.label}: initial loss {trlog.initial_loss:.4f}"
          + (f", final loss {last.loss:.4f}, token accuracy {last.token_accuracy:.4f}" if last else ""))
    print(f"checkpoint {out / 'model.jssf'}")
    return 0


def cmd_build_archive(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset_json(args.data)
    part = dict(zip(SPLITS, split_views(ds)))[args.split]
    if not part.items:
        raise DataError(f"the {args.split} split is empty")
    archive = archive_from_split(model, part, load_examples(model, part))
    save_archive(archive, args.out)
    print(f"archive with {len(archive)} entries, feature dim {archive.features.shape[1]} -> {args.out}")
    return 0


def _archive_for(args, model, settings, ds=None):
    if settings.strategy != "cbbs" or settings.k == 0:
        return None
    if args.archive:
        return load_archive(args.archive, model.vocab_size)
    if ds is not None:
        train_ds = split_views(ds)[0]
        return archive_from_split(model, train_ds, load_examples(model, train_ds))
    raise UsageError("cbbs decoding needs --archive (or --knn 0)")


def cmd_caption(args) -> int:
    model = load_checkpoint(args.checkpoint)
    settings = _decode_settings({}, args)
    archive = _archive_for(args, model, settings)
    ctx = encode_image(model, read_image(args.image))
    print(detokenize(model, decode_tokens(model, ctx, settings, archive)))
    return 0


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset_json(args.data)
    part = dict(zip(SPLITS, split_views(ds)))[args.split]
    if not part.items:
        raise DataError(f"the {args.split} split is empty")
    if args.gold:
        rep = evaluate_gold(part)
        row = report.ReportRow("Gold captions", "gold", "none", rep, strategy="gold")
        preds = None
    else:
        model = load_checkpoint(args.checkpoint) if args.checkpoint else None
        if model is None:
            raise UsageError("evaluate needs --checkpoint (or --gold)")
        settings = _decode_settings({}, args)
        archive = _archive_for(args, model, settings, ds)
        ev = evaluate_examples(model, part, load_examples(model, part), settings, archive)
        cfg = model.config
        row = report.ReportRow(cfg.label, cfg.variant, cfg.edge_detector, ev.report, strategy=settings.strategy)
        preds = ev.predictions_jsonl()
    rows = [row]
    _write_text(out / "report.csv", report.to_csv(rows))
    _write_text(out / "report.md", report.to_markdown(rows, f"Evaluation on the {args.split} split"))
    if preds is not None:
        _write_text(out / "predictions.jsonl", preds)
    print(report.to_markdown(rows), end="")
    return 0


def _slug(res) -> str:
    return f"{res.variant}-{res.edge}"


def _cell_row(res: CellResult, strategy: str) -> report.ReportRow:
    return report.ReportRow(res.label, res.variant, res.edge, res.report, res.error, strategy)


def _flush_compare(out: Path, rows, title: str, notes):
    _write_text(out / "report.csv", report.to_csv(rows))
    _write_text(out / "report.md", report.to_markdown(rows, title, notes))


def _save_cell(out: Path, res: CellResult):
    cell_dir = out / "cells" / _slug(res)
    cell_dir.mkdir(parents=True, exist_ok=True)
    if not res.ok:
        _write_text(cell_dir / "error.txt", res.error + "\n")
        return
    save_checkpoint(res.model, cell_dir / "model.jssf")
    if res.archive is not None:
        save_archive(res.archive, cell_dir / "archive.jssa")
    _write_text(cell_dir / "training_log.csv", res.training.to_csv())
    _write_text(cell_dir / "predictions.jsonl", res.evaluation.predictions_jsonl())
    plotting.training_curve(res.training, cell_dir / "training_curve.png", res.label)


def _ablation_examples(results, n=8) -> str:
    ok = [r for r in results if r.ok]
    if not ok:
        return "No successful configurations.\n"
    lines = ["# Caption examples", ""]
    first = ok[0].evaluation.predictions
    for k in range(min(n, len(first))):
        lines.append(f"## {first[k]['filename']}")
        lines.append("")
        lines.append(f"- reference: {first[k]['references'][0]}")
        for r in ok:
            lines.append(f"- {r.label}: {r.evaluation.predictions[k]['caption']}")
        lines.append("")
    return "\n".join(lines)


def cmd_compare(args, preset: str | None = None) -> int:
    conf = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preset_opts = dict(PRESETS.get(preset, {}))
    edges = _split_list(args.edge) or conf.get("edges") or preset_opts.get("edges") or ["laplacian"]
    fusions = _split_list(args.fusion) or conf.get("fusions") or preset_opts.get("fusions") or list(VARIANTS)
    for e in edges:
        if e not in EDGE_NAMES:
            raise UsageError(f"unknown edge {e!r}; choose from {EDGE_NAMES}")
    for f in fusions:
        if f not in VARIANTS:
            raise UsageError(f"unknown fusion {f!r}; choose from {VARIANTS}")
    baseline = conf.get("baseline", preset_opts.get("baseline", True)) and not args.no_baseline
    split = args.split or conf.get("split", "test")
    base = _model_config(conf, args)
    settings = _decode_settings(conf, args)
    ds = _dataset(conf, args, out)
    cells = matrix_cells(edges, fusions, baseline)
    title = f"{preset or 'compare'}: {len(cells)} configurations, {split} split, {settings.strategy} decoding"
    rows, results = [], []

    def on_cell(res):
        results.append(res)
        rows.append(_cell_row(res, settings.strategy))
        _save_cell(out, res)
        _flush_compare(out, rows, title, [report.REFERENCE_NOTE])
        status = "ok" if res.ok else f"FAILED ({res.error})"
        print(f"{res.label}: {status}" + (f"  BLEU-4 {res.report.bleu4:.4f}" if res.ok else ""), flush=True)

    run_matrix(ds, base, cells, settings, split, int(conf.get("min_count", 2)), on_cell=on_cell,
               progress=None if not log.isEnabledFor(logging.INFO) else _progress("train"))
    notes = [report.REFERENCE_NOTE]
    ordering = report.fusion_ordering_note(rows)
    if ordering:
        notes.insert(0, ordering)
    _flush_compare(out, rows, title, notes)
    plotting.compare_chart(rows, out / "report.png", title)
    if preset == "ablate":
        _write_text(out / "examples.md", _ablation_examples(results))
    _write_text(out / "config.json", json.dumps({
        "cells": cells, "split": split, "model": asdict(base), "decode": asdict(settings),
    }, indent=2, sort_keys=True) + "\n")
    print(report.to_markdown(rows, notes=notes), end="")
    failed = [r.label for r in rows if not r.ok]
    if failed:
        print(f"error: {len(failed)} configuration(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _add_decode_flags(p, default_strategy="cbbs"):
    p.add_argument("--strategy", choices=STRATEGIES, default=None,
                   help=f"decoding strategy (default {default_strategy})")
    p.add_argument("--beam", type=int, help="beam width B")
    p.add_argument("--knn", type=int, help="number of archive neighbours k for cbbs")


def _add_matrix_flags(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--data", help="dataset JSON")
    p.add_argument("--synthetic", type=int, metavar="N", help="generate an N-image synthetic corpus under --out")
    p.add_argument("--synthetic-seed", type=int, help="seed for --synthetic (default 7)")
    p.add_argument("--seed", type=int, help="model seed shared by every cell")
    p.add_argument("--epochs", type=int, help="training epochs per cell")
    p.add_argument("--edge", action="append", help="edge detector(s), comma separated; 'original' = RGB only")
    p.add_argument("--fusion", action="append", help="fusion type(s), comma separated")
    p.add_argument("--split", choices=SPLITS, help="evaluation split (default test)")
    p.add_argument("--no-baseline", action="store_true", help="omit the Original / Single baseline row")
    p.add_argument("--out", required=True, help="output directory")
    _add_decode_flags(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jssff", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="render a synthetic scene corpus")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--data", help="dataset JSON")
    p.add_argument("--synthetic", type=int, metavar="N")
    p.add_argument("--synthetic-seed", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--edge", choices=EDGE_NAMES)
    p.add_argument("--fusion", choices=VARIANTS)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-archive", help="precompute the cbbs retrieval archive")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--out", required=True, help="archive file (.jssa)")
    p.set_defaults(func=cmd_build_archive)

    p = sub.add_parser("caption", help="caption one NetPBM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--archive")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="decode a split and score it")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--archive")
    p.add_argument("--gold", action="store_true", help="score the first gold caption instead of a model")
    p.add_argument("--out", required=True, help="output directory")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="train and evaluate an edge x fusion matrix")
    _add_matrix_flags(p)
    p.set_defaults(func=cmd_compare)

    for name, help_text in [("compare-edges", "edge detectors under early fusion"),
                            ("compare-fusion", "single vs early vs late fusion"),
                            ("ablate", "laplacian single/early/late with caption examples")]:
        p = sub.add_parser(name, help=help_text)
        _add_matrix_flags(p)
        p.set_defaults(func=lambda a, _n=name: cmd_compare(a, preset=_n))
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (JssffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
