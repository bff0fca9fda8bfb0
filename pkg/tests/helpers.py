"""Small models and fixtures shared by several test modules."""

import numpy as np

from jssff.captioner import ModelConfig, build_model, collate, loss_and_grads, make_examples
from jssff.corpus import SPECIALS, Vocab
from jssff.imagecore import Image

TOY_WORDS = ["red", "roof", "near", "road", "blue", "lake", "tank", "grass"]


def toy_vocab():
    return Vocab(list(SPECIALS) + TOY_WORDS)  # 12 entries


def toy_config(variant="early", edge="laplacian", **kw):
    base = dict(variant=variant, edge_detector=edge, embed_dim=5, hidden_dim=4, l1_out=6,
                l2_out=5, feature_dim=3, input_size=8, max_caption_len=6, seed=3,
                epochs=1, batch_size=2, captions_per_image=0)
    base.update(kw)
    return ModelConfig(**base)


def toy_images(n, seed=0, size=8):
    rng = np.random.default_rng(seed)
    return [Image(rng.random((size, size, 3))) for _ in range(n)]


def toy_model(variant="early", edge="laplacian", **kw):
    return build_model(toy_config(variant, edge, **kw), toy_vocab())


def toy_batch(model, n_images=2, seed=0):
    caps = [["red roof near road", "blue lake"], ["tank on grass"]][:n_images]
    while len(caps) < n_images:
        caps.append(["road near lake"])
    ex = make_examples(model, zip(toy_images(n_images, seed), caps))
    return collate(ex)


def model_loss_fn(model, batch):
    def f(_params):
        loss, grads, _, _ = loss_and_grads(model, batch)
        return loss, grads
    return f


class MarkovModel:
    """Decoder stub whose next-token distribution depends only on the previous token."""

    start_id = 0
    end_id = 1

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float64)  # (V, V) rows: prev token

    @property
    def vocab_size(self):
        return self.table.shape[1]

    def initial_state(self, ctx, k=1):
        return np.zeros((k, 1))

    def step(self, ctx, prev, state):
        prev = np.atleast_1d(prev)
        return self.table[prev], state


class HistoryModel:
    """Decoder stub whose distribution is a random function of the full prefix."""

    start_id = 0
    end_id = 1

    def __init__(self, vocab_size, seed, temperature=1.0):
        self.V = vocab_size
        self.seed = seed
        self.temperature = temperature

    @property
    def vocab_size(self):
        return self.V

    def initial_state(self, ctx, k=1):
        return np.zeros((k, 0), dtype=np.int64)

    def _probs(self, prefix):
        r = np.random.default_rng([self.seed, len(prefix), *prefix])
        z = r.normal(size=self.V) / self.temperature
        e = np.exp(z - z.max())
        return e / e.sum()

    def step(self, ctx, prev, state):
        prev = np.atleast_1d(prev)
        hist = np.concatenate([state, prev[:, None]], axis=1)
        probs = np.stack([self._probs(tuple(int(t) for t in row[1:])) for row in hist])
        return probs, hist
