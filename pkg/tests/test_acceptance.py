"""Acceptance criteria, one test each.

Every test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (run with
``-s`` to see them) and fails if its check or its time budget is missed.
"""

import contextlib
import csv
import json
import math
import random
import time

import numpy as np
import pytest

from jssff.captioner import (
    ModelConfig,
    build_model,
    checkpoint_bytes,
    encode_image,
    evaluate_teacher_forced,
    load_checkpoint,
    make_examples,
    train,
)
from jssff.cli import main
from jssff.corpus import build_vocab, gen_synthetic
from jssff.encoder import ConvEncoderParams, concat, encoder_backward, encoder_forward, positionwise_concat
from jssff.imagecore import DETECTORS, Image, Kernel, convolve2d, detect_edges, laplacian_edges, sobel_edges
from jssff.metrics import bleu_corpus, cider_d, meteor_lite, rouge_l
from jssff.nncore import (
    EmbeddingParams,
    LinearParams,
    LstmParams,
    cross_entropy,
    cross_entropy_backward,
    embedding_backward,
    embedding_lookup,
    gelu,
    gelu_backward,
    grad_check,
    linear_backward,
    linear_forward,
    lstm_backward,
    lstm_step,
    softmax,
)
from jssff.search import (
    Archive,
    CbbsConfig,
    archive_bytes,
    beam_search,
    build_archive,
    cbbs_decode,
    greedy_decode,
    load_archive,
    save_archive,
)

from . import oracles
from .helpers import HistoryModel, model_loss_fn, toy_batch, toy_images, toy_model
from .test_search import CTX, exhaustive_best

METRIC_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr")


@contextlib.contextmanager
def criterion(n, name, budget_s):
    """Time the block, print one PASS/FAIL line, fail on error or overrun."""
    start = time.perf_counter()
    error = None
    try:
        yield
    except Exception as exc:  # noqa: BLE001 - reported then re-raised
        error = exc
    elapsed = time.perf_counter() - start
    if error is None and elapsed >= budget_s:
        error = AssertionError(f"took {elapsed:.1f}s, budget {budget_s}s")
    status = "PASS" if error is None else "FAIL"
    detail = "" if error is None else f"  ({type(error).__name__}: {str(error).splitlines()[0] if str(error) else ''})"
    print(f"\nACCEPTANCE {n} {status}: {name} [{elapsed:.2f}s / {budget_s}s]{detail}", flush=True)
    if error is not None:
        raise error


# ---------------------------------------------------------------- 1

def _interleave(P, Q):
    out = [None] * (2 * len(P))
    for i in range(len(P)):
        out[2 * i], out[2 * i + 1] = P[i], Q[i]
    return out


def test_1_fusion_operator_exactness():
    with criterion(1, "fusion operators on 1000 random pairs", 1.0):
        r = np.random.default_rng(2024)
        for _ in range(1000):
            n = int(r.integers(1, 64))
            P, Q = r.normal(size=n), r.normal(size=n)
            assert positionwise_concat(P, Q).tolist() == _interleave(P.tolist(), Q.tolist())
            assert concat(P, Q).tolist() == P.tolist() + Q.tolist()


# ---------------------------------------------------------------- 2

LAPLACE = Kernel(np.array([[0.0, 1, 0], [1, -4, 1], [0, 1, 0]]))


def test_2_edge_detector_oracles():
    with criterion(2, "edge detector oracles", 5.0):
        for det in DETECTORS:
            assert not detect_edges(Image(np.full((9, 11, 1), 0.37)), det).data.any()
        yy, xx = np.mgrid[0:10, 0:12]
        ramp = Image((0.2 + 0.03 * yy - 0.02 * xx)[..., None])
        raw = np.abs(convolve2d(ramp, LAPLACE).plane)
        assert np.all(raw[1:-1, 1:-1] < 1e-6)
        step = Image(np.array([[0.0, 0, 1]] * 3)[..., None])
        assert convolve2d(step, Kernel(np.array([[-1.0, 0, 1], [-2, 0, 2], [-1, 0, 1]]))).plane[1, 1] == 4.0
        em = sobel_edges(step).data
        assert em[1, 1] == 1.0 and em.max() == 1.0
        r = np.random.default_rng(77)
        for _ in range(50):
            img = r.random((int(r.integers(3, 16)), int(r.integers(3, 16))))
            for fn in (sobel_edges, laplacian_edges):
                base = fn(Image(img[..., None])).data
                assert np.allclose(fn(Image(img[:, ::-1, None])).data, base[:, ::-1], atol=1e-12)
                assert np.allclose(fn(Image(img[::-1, :, None])).data, base[::-1, :], atol=1e-12)


# ---------------------------------------------------------------- 3

def _layer_checks():
    r = np.random.default_rng(31)
    out = {}

    lin = LinearParams.init(r, 4, 3)
    x, w = r.normal(size=(2, 4)), r.normal(size=(2, 3))

    def f_lin(params):
        y = linear_forward(lin, params["x"])
        dx, dW, db = linear_backward(lin, params["x"], w)
        return float((w * y).sum()), {"weight": dW, "bias": db, "x": dx}

    out["linear"] = grad_check(f_lin, {"weight": lin.weight, "bias": lin.bias, "x": x})

    emb = EmbeddingParams.init(r, 6, 4)
    ids, we = [1, 3, 3, 5], r.normal(size=(4, 4))

    def f_emb(table):
        return float((we * embedding_lookup(emb, ids)).sum()), embedding_backward(emb, ids, we)

    out["embedding"] = grad_check(f_emb, emb.table)

    lstm = LstmParams.init(r, 3, 4)
    lx, h0, c0 = r.normal(size=3), r.normal(size=4), r.normal(size=4)
    wh, wc = r.normal(size=4), r.normal(size=4)

    def f_lstm(params):
        h, c, cache = lstm_step(lstm, params["x"], params["h"], params["c"])
        return float(wh @ h + wc @ c), lstm_backward(lstm, cache, wh, wc)

    out["lstm"] = grad_check(f_lstm, {"W": lstm.W, "U": lstm.U, "b": lstm.b, "x": lx, "h": h0, "c": c0})

    z = r.normal(size=7)
    out["softmax+cross-entropy"] = grad_check(
        lambda v: (cross_entropy(softmax(v), 2), cross_entropy_backward(softmax(v), 2)), z)

    g = r.normal(scale=2.0, size=16)
    out["gelu"] = grad_check(lambda v: (float(gelu(v).sum()), gelu_backward(v, np.ones_like(v))), g)

    enc = ConvEncoderParams.init(r, feature_dim=4, input_size=8)
    xi, wf = r.random((2, 8, 8, 3)), r.normal(size=(2, 4))

    def f_enc(_):
        feat, cache = encoder_forward(enc, xi)
        return float((wf * feat).sum()), encoder_backward(enc, cache, wf)

    out["conv encoder"] = grad_check(f_enc, enc.named_params(), max_coords=200, rng=np.random.default_rng(1))

    m = toy_model("early", "laplacian")
    assert m.config.input_size == 8 and m.vocab_size == 12
    out["full early-fusion model"] = grad_check(model_loss_fn(m, toy_batch(m)), m.named_params(),
                                                max_coords=200, rng=np.random.default_rng(2))
    return out


def test_3_gradient_correctness():
    with criterion(3, "finite-difference gradient checks", 60.0):
        errs = _layer_checks()
        for name, err in errs.items():
            print(f"  grad check {name}: max rel err {err:.2e}")
        assert max(errs.values()) < 1e-4, errs


# ---------------------------------------------------------------- 4

def _random_corpus(rng, n_items, words="abcde", max_len=6, max_refs=3):
    cands, refs = [], []
    for _ in range(n_items):
        cands.append([rng.choice(words) for _ in range(rng.randint(1, max_len))])
        refs.append([[rng.choice(words) for _ in range(rng.randint(1, max_len))]
                     for _ in range(rng.randint(1, max_refs))])
    return cands, refs


def test_4_metric_oracles():
    with criterion(4, "metric oracles and hand fixtures", 10.0):
        for seed in range(50):
            rng = random.Random(9000 + seed)
            cands, refs = _random_corpus(rng, rng.randint(1, 6))
            for got, want in zip(bleu_corpus(cands, refs), oracles.bleu(cands, refs)):
                assert abs(got - want) <= 1e-9
            assert abs(rouge_l(cands, refs) - oracles.rouge_l(cands, refs)) <= 1e-9
            assert abs(cider_d(cands, refs) - oracles.cider_d(cands, refs)) <= 1e-9
            assert abs(meteor_lite(cands, refs) - oracles.meteor(cands, refs)) <= 1e-9
        assert abs(bleu_corpus([["the", "cat"]], [[["the", "cat", "sat"]]])[0] - 0.6065) <= 1e-4
        assert abs(bleu_corpus([["the", "the", "the"]], [[["the", "cat"]]])[0] - 1 / 3) <= 1e-4
        assert abs(rouge_l([["the", "cat", "sat"]], [[["the", "cat", "sat", "on", "mat"]]]) - 0.7176) <= 1e-4
        assert abs(meteor_lite([["a"]], [[["a"]]]) - 0.5) <= 1e-4


# ---------------------------------------------------------------- 5

def test_5_search_correctness():
    with criterion(5, "beam/greedy/exhaustive/cbbs equivalences", 30.0):
        images = toy_images(100, seed=5)
        for seed in range(100):
            m = build_model(toy_model().config, toy_model().vocab, rng_seed=seed)
            ctx = encode_image(m, images[seed])
            g = greedy_decode(m, ctx, 6)
            b = beam_search(m, ctx, 1, 6)[0]
            assert b.tokens == g.tokens and b.log_prob == g.log_prob
        for seed in range(30):
            hm = HistoryModel(3, 5000 + seed)
            for alpha in (0.0, 0.7):
                seq, _ = exhaustive_best(hm, 3, alpha)
                assert beam_search(hm, CTX, 27, 3, alpha)[0].tokens == seq
        m = toy_model()
        arc = build_archive(m, [(f"img{k}", encode_image(m, im), [[4, 5], [6 + k % 3]])
                                for k, im in enumerate(toy_images(6, seed=8))])
        for img in toy_images(20, seed=9):
            ctx = encode_image(m, img)
            top = beam_search(m, ctx, 4, 6, 0.7)[0]
            assert cbbs_decode(m, ctx, arc, CbbsConfig(4, 0, 0.7), 6) == top


# ---------------------------------------------------------------- 6

def test_6_memorization(tmp_path):
    with criterion(6, "early+laplacian memorizes 16 synthetic images", 300.0):
        ds = gen_synthetic(16, 11, tmp_path / "mem")
        cfg = ModelConfig(variant="early", edge_detector="laplacian", epochs=2000, seed=0)
        model = build_model(cfg, build_vocab(ds, min_count=1))
        examples = make_examples(model, [(ds.load_image(it), [it.captions[0]]) for it in ds.items])
        assert len(examples) == 16
        initial_loss, _ = evaluate_teacher_forced(model, examples)
        state = {}

        def stop(rec):
            if rec.epoch % 10:
                return False
            state["loss"], state["acc"] = evaluate_teacher_forced(model, examples)
            return state["acc"] >= 0.99 and state["loss"] < 0.05 * initial_loss

        log = train(model, examples, max_steps=2000, stop=stop)
        loss, acc = evaluate_teacher_forced(model, examples)
        steps = log.epochs[-1].steps
        print(f"  steps {steps}, initial loss {initial_loss:.4f}, final loss {loss:.5f}, token accuracy {acc:.4f}")
        assert steps <= 2000
        assert acc >= 0.99
        assert loss < 0.05 * initial_loss


# ---------------------------------------------------------------- 7

@pytest.mark.slow
def test_7_end_to_end_compare(tmp_path):
    with criterion(7, "compare on a 500-image synthetic corpus", 1800.0):
        out = tmp_path / "cmp"
        code = main(["compare", "--synthetic", "500", "--synthetic-seed", "7", "--edge", "laplacian",
                     "--fusion", "single,early,late", "--out", str(out)])
        rows = list(csv.DictReader((out / "report.csv").open(encoding="utf-8")))
        for r in rows:
            print("  " + r["label"] + ": " + ", ".join(f"{c} {float(r[c]):.4f}" for c in METRIC_COLUMNS))
        md = (out / "report.md").read_text(encoding="utf-8")
        print("  " + next(ln for ln in md.splitlines() if "Fusion ordering" in ln).lstrip("- "))
        assert code == 0
        assert {(r["variant"], r["edge"]) for r in rows} >= {("single", "laplacian"), ("early", "laplacian"),
                                                             ("late", "laplacian")}
        for r in rows:
            assert r["status"] == "ok"
            vals = [float(r[c]) for c in METRIC_COLUMNS]
            assert all(math.isfinite(v) for v in vals)
            assert all(0.0 <= v <= 1.0 for v in vals[:6]) and 0.0 <= vals[6] <= 10.0
        early = next(r for r in rows if r["variant"] == "early")
        assert float(early["BLEU-4"]) >= 0.5
        assert (out / "report.png").is_file()


# ---------------------------------------------------------------- 8

DET_CONFIG = {
    "synthetic": {"n": 40, "seed": 3},
    "model": {"epochs": 2},
    "decode": {"beam_width": 3, "k": 3},
}


def _artifacts(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_8_determinism_and_persistence(tmp_path):
    with criterion(8, "byte-identical reruns and lossless round-trips", 300.0):
        (tmp_path / "det.json").write_text(json.dumps(DET_CONFIG))
        runs = []
        for name in ("a", "b"):
            code = main(["compare", "--config", str(tmp_path / "det.json"), "--edge", "laplacian",
                         "--fusion", "early,late", "--no-baseline", "--out", str(tmp_path / name)])
            assert code == 0
            runs.append(_artifacts(tmp_path / name))
        a, b = runs
        assert a.keys() == b.keys()
        for key in ("report.csv", "report.md", "report.png", "cells/early-laplacian/model.jssf",
                    "cells/late-laplacian/archive.jssa"):
            assert key in a
        differing = [k for k in a if a[k] != b[k]]
        assert not differing, differing

        for cell in ("early-laplacian", "late-laplacian"):
            ck = tmp_path / "a" / "cells" / cell / "model.jssf"
            model = load_checkpoint(ck)
            assert checkpoint_bytes(model) == ck.read_bytes()
            ar = tmp_path / "a" / "cells" / cell / "archive.jssa"
            arc = load_archive(ar, model.vocab_size)
            assert archive_bytes(arc) == ar.read_bytes()
            save_archive(arc, tmp_path / f"{cell}.jssa")
            assert (tmp_path / f"{cell}.jssa").read_bytes() == ar.read_bytes()
        arc = Archive(np.random.default_rng(0).normal(size=(3, 5)), [[[4, 5]], [[6]], [[7, 8], [4]]], ["a", "b", "c"])
        save_archive(arc, tmp_path / "x.jssa")
        back = load_archive(tmp_path / "x.jssa")
        assert back.features.tobytes() == arc.features.tobytes() and back.captions == arc.captions
