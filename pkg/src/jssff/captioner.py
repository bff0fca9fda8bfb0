"""Caption models: single-stream, early fusion and late fusion.

Topology per decoding branch::

    image views -> E1 (, E2) -> [position-wise concat] -> L1 -> ctx
    prev token -> X -> LSTM D -> h
    [ctx, h] -> L2

The shared head L3 maps the L2 output (late fusion: the concatenation of
both branches' L2 outputs) to vocabulary logits.  The image context joins
the decoder output at every step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import persist
from .corpus import Vocab
from .encoder import (
    ConvEncoderParams,
    encoder_backward,
    encoder_forward,
    positionwise_concat,
    split_positionwise,
)
from .errors import ConfigError, ContractViolation, DataError, PersistenceError, ShapeError
from .imagecore import DETECTORS, Image, edge_aware_image, resize_bilinear
from .metrics import tokenize
from .nncore import (
    AdamState,
    EmbeddingParams,
    LinearParams,
    LstmCache,
    LstmParams,
    adam_step,
    embedding_backward,
    linear_backward,
    linear_forward,
    log_softmax,
    lstm_gates_backward,
    lstm_gates_forward,
    softmax,
)

log = logging.getLogger(__name__)

VARIANTS = ("single", "early", "late")
EDGE_CHOICES = ("none",) + DETECTORS
CHECKPOINT_MAGIC = b"JSSF1"


@dataclass
class ModelConfig:
    variant: str = "early"
    edge_detector: str = "laplacian"
    embed_dim: int = 256
    hidden_dim: int = 256
    l1_out: int = 256
    l2_out: int = 256
    feature_dim: int = 128
    input_size: int = 64
    max_caption_len: int = 20
    seed: int = 0
    # training
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 16
    max_steps: int = 0  # 0 = no cap
    captions_per_image: int = 1  # per epoch; 0 = all, otherwise rotated through

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.edge_detector not in EDGE_CHOICES:
            raise ConfigError(f"edge_detector must be one of {EDGE_CHOICES}, got {self.edge_detector!r}")
        if self.variant != "single" and self.edge_detector == "none":
            raise ConfigError(f"{self.variant} fusion needs an edge detector")
        for name in ("embed_dim", "hidden_dim", "l1_out", "l2_out", "feature_dim",
                     "input_size", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.captions_per_image < 0:
            raise ConfigError("captions_per_image must be >= 0")
        if self.max_caption_len < 3:
            raise ConfigError("max_caption_len must leave room for <start>, a word and <end>")
        if self.lr < 0 or self.max_steps < 0:
            raise ConfigError("lr and max_steps must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def views(self) -> list[str]:
        """Image views fed to the encoders, in encoder order."""
        if self.variant == "single":
            return ["original" if self.edge_detector == "none" else "edge"]
        return ["original", "edge"]

    @property
    def label(self) -> str:
        return config_label(self.variant, self.edge_detector)


def config_label(variant: str, edge_detector: str) -> str:
    """Row label in the style ``Original⊗Laplacian / Early``."""
    edge = "Original" if edge_detector == "none" else edge_detector.capitalize()
    if variant == "single":
        return f"{edge} / Single"
    return f"Original⊗{edge} / {variant.capitalize()}"


@dataclass
class Branch:
    """One encoder-decoder path ending in L2."""

    encoders: list  # ConvEncoderParams, one per view
    view_ids: list  # indices into the model's view list
    l1: LinearParams
    embed: EmbeddingParams
    lstm: LstmParams
    l2: LinearParams
    prefix: str = ""
    encoder_names: list = field(default_factory=list)


@dataclass
class ImageContext:
    contexts: list  # one L1 output per branch

    @property
    def feature(self) -> np.ndarray:
        """Vector used for archive retrieval."""
        return np.concatenate(self.contexts, axis=-1) if len(self.contexts) > 1 else self.contexts[0]


class CaptionModel:
    def __init__(self, config: ModelConfig, vocab: Vocab, branches: list, l3: LinearParams):
        self.config = config
        self.vocab = vocab
        self.branches = branches
        self.l3 = l3

    start_id = Vocab.start
    end_id = Vocab.end

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def named_params(self) -> dict:
        out = {}
        for br in self.branches:
            for name, enc in zip(br.encoder_names, br.encoders):
                out.update(enc.named_params(f"{br.prefix}{name}."))
            p = br.prefix
            out[f"{p}L1.weight"] = br.l1.weight
            out[f"{p}L1.bias"] = br.l1.bias
            out[f"{p}X.table"] = br.embed.table
            out[f"{p}D.W"] = br.lstm.W
            out[f"{p}D.U"] = br.lstm.U
            out[f"{p}D.b"] = br.lstm.b
            out[f"{p}L2.weight"] = br.l2.weight
            out[f"{p}L2.bias"] = br.l2.bias
        out["L3.weight"] = self.l3.weight
        out["L3.bias"] = self.l3.bias
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    # convenience wrappers around the module-level functions
    def encode(self, img: Image) -> ImageContext:
        return encode_image(self, img)

    def initial_state(self, ctx: ImageContext, k: int = 1):
        return initial_state(self, k)

    def step(self, ctx: ImageContext, prev_tokens, state):
        return step(self, ctx, prev_tokens, state)


def build_model(cfg: ModelConfig, vocab: Vocab, rng_seed: int | None = None) -> CaptionModel:
    """Initialise all parameters from one seeded generator, in a fixed order."""
    cfg.validate()
    if len(vocab) < 4 or vocab.itos[:4] != ["<pad>", "<start>", "<end>", "<unk>"]:
        raise ConfigError("vocab must contain the four special tokens at indices 0..3")
    rng = np.random.default_rng(cfg.seed if rng_seed is None else rng_seed)
    V = len(vocab)

    def branch(view_ids, prefix, enc_names):
        encs = [ConvEncoderParams.init(rng, cfg.feature_dim, cfg.input_size) for _ in view_ids]
        l1 = LinearParams.init(rng, cfg.feature_dim * len(view_ids), cfg.l1_out)
        embed = EmbeddingParams.init(rng, V, cfg.embed_dim)
        lstm = LstmParams.init(rng, cfg.embed_dim, cfg.hidden_dim)
        l2 = LinearParams.init(rng, cfg.l1_out + cfg.hidden_dim, cfg.l2_out)
        return Branch(encs, list(view_ids), l1, embed, lstm, l2, prefix, enc_names)

    if cfg.variant == "single":
        branches = [branch([0], "", ["E1"])]
    elif cfg.variant == "early":
        branches = [branch([0, 1], "", ["E1", "E2"])]
    else:
        branches = [branch([0], "s1.", ["E1"]), branch([1], "s2.", ["E2"])]
    l3 = LinearParams.init(rng, cfg.l2_out * len(branches), V)
    return CaptionModel(cfg, vocab, branches, l3)


# --------------------------------------------------------------------------
# image preparation


def prepare_views(cfg: ModelConfig, img: Image) -> list[np.ndarray]:
    """Resize to the encoder input and build the views listed by ``cfg.views()``."""
    data = img.data
    if img.channels == 1:
        data = np.repeat(data, 3, axis=2)
    base = resize_bilinear(Image(data), cfg.input_size, cfg.input_size)
    out = []
    for view in cfg.views():
        if view == "original":
            out.append(base.data)
        else:
            out.append(edge_aware_image(base, cfg.edge_detector).data)
    return out


def _encode_views(model: CaptionModel, views: list[np.ndarray], keep_cache=False):
    """Batched encoder pass; ``views[v]`` has shape (N, size, size, 3)."""
    contexts, caches = [], []
    for br in model.branches:
        feats, enc_caches = [], []
        for enc, v in zip(br.encoders, br.view_ids):
            f, c = encoder_forward(enc, views[v])
            feats.append(f)
            enc_caches.append(c)
        fused = feats[0] if len(feats) == 1 else positionwise_concat(feats[0], feats[1])
        contexts.append(linear_forward(br.l1, fused))
        caches.append((fused, enc_caches))
    return (contexts, caches) if keep_cache else contexts


def encode_views(model: CaptionModel, views: list[np.ndarray]) -> ImageContext:
    """Context for one image given its prepared views (each (size, size, 3))."""
    contexts = _encode_views(model, [v[None] for v in views])
    return ImageContext([c[0] for c in contexts])


def encode_image(model: CaptionModel, original: Image) -> ImageContext:
    return encode_views(model, prepare_views(model.config, original))


# --------------------------------------------------------------------------
# decoding step


def initial_state(model: CaptionModel, k: int = 1):
    H = model.config.hidden_dim
    return [(np.zeros((k, H)), np.zeros((k, H))) for _ in model.branches]


def step_logits(model: CaptionModel, ctx: ImageContext, prev_tokens, state):
    prev = np.atleast_1d(np.asarray(prev_tokens))
    if not np.issubdtype(prev.dtype, np.integer) or prev.min() < 0 or prev.max() >= model.vocab_size:
        raise IndexError(f"previous token out of range [0, {model.vocab_size})")
    outs, new_state = [], []
    for br, c_br, (h, c) in zip(model.branches, ctx.contexts, state):
        if h.shape != (len(prev), model.config.hidden_dim):
            raise ShapeError(f"decoder state shape {h.shape} does not match {len(prev)} tokens")
        x = br.embed.table[prev]
        z = x @ br.lstm.W.T + h @ br.lstm.U.T + br.lstm.b
        h2, c2, _ = lstm_gates_forward(br.lstm, z, c)
        ctx_b = np.broadcast_to(c_br, (len(prev), c_br.shape[-1]))
        outs.append(linear_forward(br.l2, np.concatenate([ctx_b, h2], axis=-1)))
        new_state.append((h2, c2))
    logits = linear_forward(model.l3, np.concatenate(outs, axis=-1))
    return logits, new_state


def step(model: CaptionModel, ctx: ImageContext, prev_tokens, state):
    """Next-token distribution(s) and the updated decoder state.

    ``prev_tokens`` may be a scalar or a length-K array; the state carries
    one row per token.  Returns ``(probs (K, V), state)``.
    """
    logits, new_state = step_logits(model, ctx, prev_tokens, state)
    return softmax(logits), new_state


def step_logprobs(model: CaptionModel, ctx: ImageContext, prev_tokens, state):
    logits, new_state = step_logits(model, ctx, prev_tokens, state)
    return log_softmax(logits), new_state


# --------------------------------------------------------------------------
# teacher-forced loss and gradients


def encode_caption(vocab: Vocab, caption, max_len: int) -> list[int]:
    """``<start> w1..wn <end>`` padded with ``<pad>`` to ``max_len``."""
    toks = tokenize(caption) if isinstance(caption, str) else list(caption)
    ids = [vocab.start] + vocab.encode(toks) + [vocab.end]
    if len(ids) > max_len:
        raise DataError(f"caption of {len(toks)} tokens exceeds max_caption_len={max_len}: {caption!r}")
    return ids + [vocab.pad] * (max_len - len(ids))


@dataclass
class Batch:
    views: list  # per view: (N_img, size, size, 3)
    img_index: np.ndarray  # (N_cap,) image row of each caption
    tokens: np.ndarray  # (N_cap, max_len)


def _branch_decoder_forward(br: Branch, ctx_img, img_index, inp):
    ctx_c = ctx_img[img_index]
    n, T = inp.shape
    H = br.lstm.hidden_dim
    emb = br.embed.table[inp]
    xz = emb @ br.lstm.W.T + br.lstm.b
    h = np.zeros((n, H))
    c = np.zeros((n, H))
    hs = np.empty((n, T, H))
    steps = []
    for t in range(T):
        z = xz[:, t] + h @ br.lstm.U.T
        h_new, c_new, (i, f, g, o, tc) = lstm_gates_forward(br.lstm, z, c)
        steps.append(LstmCache(None, h, c, i, f, g, o, tc, id(br.lstm)))
        h, c = h_new, c_new
        hs[:, t] = h
    u = np.concatenate([np.broadcast_to(ctx_c[:, None, :], (n, T, ctx_c.shape[1])), hs], axis=-1)
    y = linear_forward(br.l2, u)
    return y, (emb, steps, u)


def _branch_decoder_backward(br: Branch, cache, inp, dy, grads):
    emb, steps, u = cache
    p = br.prefix
    l1_out = br.l1.out_dim
    du, grads[f"{p}L2.weight"], grads[f"{p}L2.bias"] = linear_backward(br.l2, u, dy)
    dctx_c = du[..., :l1_out].sum(axis=1)
    dhs = du[..., l1_out:]
    n, T, H = dhs.shape
    dxz = np.empty((n, T, 4 * H))
    dU = np.zeros_like(br.lstm.U)
    dh_next = np.zeros((n, H))
    dc_next = np.zeros((n, H))
    for t in range(T - 1, -1, -1):
        cache_t = steps[t]
        dz, dc_next = lstm_gates_backward(cache_t, dhs[:, t] + dh_next, dc_next)
        dxz[:, t] = dz
        dU += dz.T @ cache_t.h
        dh_next = dz @ br.lstm.U
    dxz2 = dxz.reshape(-1, 4 * H)
    grads[f"{p}D.W"] = dxz2.T @ emb.reshape(-1, emb.shape[-1])
    grads[f"{p}D.U"] = dU
    grads[f"{p}D.b"] = dxz2.sum(axis=0)
    grads[f"{p}X.table"] = embedding_backward(br.embed, inp, dxz @ br.lstm.W)
    return dctx_c


def loss_and_grads(model: CaptionModel, batch: Batch, need_grads: bool = True):
    """Teacher-forced mean cross-entropy over non-pad targets.

    Returns ``(loss, grads, correct, n_tokens)``; ``grads`` is keyed like
    ``named_params`` (None when ``need_grads`` is False).
    """
    inp = batch.tokens[:, :-1]
    tgt = batch.tokens[:, 1:]
    mask = tgt != Vocab.pad
    n_tok = int(mask.sum())
    if n_tok == 0:
        raise DataError("batch has no target tokens")
    contexts, enc_caches = _encode_views(model, batch.views, keep_cache=True)
    ys, dec_caches = [], []
    for br, ctx in zip(model.branches, contexts):
        y, cache = _branch_decoder_forward(br, ctx, batch.img_index, inp)
        ys.append(y)
        dec_caches.append(cache)
    z = ys[0] if len(ys) == 1 else np.concatenate(ys, axis=-1)
    logits = linear_forward(model.l3, z)
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    loss = float(-(picked * mask).sum() / n_tok)
    correct = int(((logits.argmax(axis=-1) == tgt) & mask).sum())
    if not np.isfinite(loss):
        raise ContractViolation("non-finite training loss")
    if not need_grads:
        return loss, None, correct, n_tok

    grads = {}
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, tgt[..., None],
                      np.take_along_axis(dlogits, tgt[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= mask[..., None] / n_tok
    dz, grads["L3.weight"], grads["L3.bias"] = linear_backward(model.l3, z, dlogits)
    l2_out = model.config.l2_out
    n_img = batch.views[0].shape[0]
    for k, br in enumerate(model.branches):
        dy = dz[..., k * l2_out:(k + 1) * l2_out]
        dctx_c = _branch_decoder_backward(br, dec_caches[k], inp, dy, grads)
        dctx = np.zeros((n_img, br.l1.out_dim))
        np.add.at(dctx, batch.img_index, dctx_c)
        fused, encs = enc_caches[k]
        p = br.prefix
        dfused, grads[f"{p}L1.weight"], grads[f"{p}L1.bias"] = linear_backward(br.l1, fused, dctx)
        parts = [dfused] if len(br.encoders) == 1 else list(split_positionwise(dfused))
        for name, enc, c, dfeat in zip(br.encoder_names, br.encoders, encs, parts):
            grads.update(encoder_backward(enc, c, np.ascontiguousarray(dfeat), prefix=f"{p}{name}."))
    return loss, grads, correct, n_tok


# --------------------------------------------------------------------------
# training


@dataclass
class Example:
    views: list  # prepared views for one image
    captions: np.ndarray  # (n_captions, max_len) token ids


def make_examples(model: CaptionModel, pairs) -> list[Example]:
    """``pairs``: iterable of ``(Image, [caption, ...])``."""
    cfg = model.config
    out = []
    for img, caps in pairs:
        if not caps:
            raise DataError("every training image needs at least one caption")
        ids = np.array([encode_caption(model.vocab, c, cfg.max_caption_len) for c in caps], dtype=np.int64)
        out.append(Example(prepare_views(cfg, img), ids))
    return out


def _caption_rows(ex: Example, per_image: int, epoch: int) -> np.ndarray:
    n = len(ex.captions)
    if per_image <= 0 or per_image >= n:
        return ex.captions
    return ex.captions[[(epoch * per_image + j) % n for j in range(per_image)]]


def collate(examples: list[Example], per_image: int = 0, epoch: int = 0) -> Batch:
    n_views = len(examples[0].views)
    views = [np.stack([ex.views[v] for ex in examples]) for v in range(n_views)]
    caps = [_caption_rows(ex, per_image, epoch) for ex in examples]
    img_index = np.concatenate([np.full(len(c), k) for k, c in enumerate(caps)])
    return Batch(views, img_index, np.concatenate(caps))


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    loss: float
    token_accuracy: float


@dataclass
class TrainingLog:
    initial_loss: float = float("nan")
    initial_accuracy: float = float("nan")
    epochs: list = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,steps,loss,token_accuracy",
                f"0,0,{self.initial_loss!r},{self.initial_accuracy!r}"]
        rows += [f"{r.epoch},{r.steps},{r.loss!r},{r.token_accuracy!r}" for r in self.epochs]
        return "\n".join(rows) + "\n"


def evaluate_teacher_forced(model: CaptionModel, examples: list[Example], batch_size: int = 32):
    """Mean loss and token accuracy over ``examples`` without updating anything."""
    tot_loss = 0.0
    tot_correct = tot_tok = 0
    for s in range(0, len(examples), batch_size):
        loss, _, correct, n_tok = loss_and_grads(model, collate(examples[s:s + batch_size]), need_grads=False)
        tot_loss += loss * n_tok
        tot_correct += correct
        tot_tok += n_tok
    return tot_loss / tot_tok, tot_correct / tot_tok


def train(model: CaptionModel, examples, epochs: int | None = None, lr: float | None = None,
          batch_size: int | None = None, max_steps: int | None = None,
          captions_per_image: int | None = None, progress=None, stop=None) -> TrainingLog:
    """Teacher-forced Adam training; deterministic for a fixed seed and data order.

    ``examples`` is a list of ``Example`` or of ``(Image, captions)`` pairs.
    Arguments left as None fall back to the model config.  ``progress`` is an
    optional callable receiving each finished ``EpochRecord``; ``stop`` is
    called the same way and ends training early when it returns True.
    """
    cfg = model.config
    examples = list(examples)
    if not examples:
        raise DataError("training set is empty")
    if not isinstance(examples[0], Example):
        examples = make_examples(model, examples)
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    batch_size = cfg.batch_size if batch_size is None else batch_size
    max_steps = cfg.max_steps if max_steps is None else max_steps
    per_image = cfg.captions_per_image if captions_per_image is None else captions_per_image

    params = model.named_params()
    state = AdamState(lr=lr)
    rng = np.random.default_rng(cfg.seed + 1)
    trlog = TrainingLog()
    trlog.initial_loss, trlog.initial_accuracy = evaluate_teacher_forced(model, examples)
    steps = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(examples))
        tot_loss = 0.0
        tot_correct = tot_tok = 0
        for s in range(0, len(order), batch_size):
            batch = collate([examples[i] for i in order[s:s + batch_size]], per_image, epoch)
            loss, grads, correct, n_tok = loss_and_grads(model, batch)
            adam_step(params, grads, state)
            steps += 1
            tot_loss += loss * n_tok
            tot_correct += correct
            tot_tok += n_tok
            if max_steps and steps >= max_steps:
                break
        rec = EpochRecord(epoch, steps, tot_loss / tot_tok, tot_correct / tot_tok)
        trlog.epochs.append(rec)
        log.info("epoch %d step %d loss %.4f acc %.4f", epoch, steps, rec.loss, rec.token_accuracy)
        if progress is not None:
            progress(rec)
        if max_steps and steps >= max_steps:
            break
        if stop is not None and stop(rec):
            break
    return trlog


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(model: CaptionModel) -> bytes:
    return persist.pack(CHECKPOINT_MAGIC, [asdict(model.config), model.vocab.itos], model.named_params())


def save_checkpoint(model: CaptionModel, path):
    persist.atomic_write(path, checkpoint_bytes(model))


def load_checkpoint(path, vocab: Vocab | None = None) -> CaptionModel:
    """Load and validate a checkpoint.

    If ``vocab`` is given the stored vocabulary size must match it.
    """
    blocks, tensors = persist.read_file(path, CHECKPOINT_MAGIC)
    if len(blocks) != 2:
        raise PersistenceError(f"checkpoint must hold 2 header blocks, found {len(blocks)}")
    try:
        cfg = ModelConfig.from_dict(blocks[0])
        stored_vocab = Vocab(blocks[1])
    except (ConfigError, DataError, TypeError) as exc:
        raise PersistenceError(f"invalid checkpoint header: {exc}") from exc
    if vocab is not None and len(vocab) != len(stored_vocab):
        raise ShapeError(f"checkpoint vocabulary has {len(stored_vocab)} tokens, expected {len(vocab)}")
    model = build_model(cfg, stored_vocab)
    params = model.named_params()
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise ShapeError(f"checkpoint tensors do not match config: missing {missing}, unexpected {extra}")
    for name, arr in params.items():
        if tensors[name].shape != arr.shape:
            raise ShapeError(f"tensor {name}: stored shape {tensors[name].shape}, config expects {arr.shape}")
        arr[...] = tensors[name]
    return model


def config_json(cfg: ModelConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True)
