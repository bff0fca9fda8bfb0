"""Dataset ingestion (RSICD-style JSON), vocabulary, and synthetic scenes."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError, ParseError
from .imagecore import Image, dump_netpbm, read_image
from .metrics import tokenize
from .persist import atomic_write

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
SPECIALS = (PAD, START, END, UNK)


@dataclass(frozen=True)
class DatasetItem:
    filename: str
    split: str
    captions: tuple


@dataclass
class Dataset:
    items: list
    image_dir: Path = field(default_factory=Path)

    def image_path(self, item: DatasetItem) -> Path:
        return Path(self.image_dir) / item.filename

    def load_image(self, item: DatasetItem) -> Image:
        return read_image(self.image_path(item))

    def __len__(self):
        return len(self.items)

    def subset(self, items) -> "Dataset":
        return Dataset(list(items), self.image_dir)


def _default_image_dir(json_path: Path) -> Path:
    images = json_path.parent / "images"
    return images if images.is_dir() else json_path.parent


def load_dataset_json(path, image_dir=None) -> Dataset:
    """Read ``{"images": [{"filename", "split", "sentences": [{"raw"}]}]}``.

    Images are resolved against ``image_dir``, defaulting to an ``images/``
    directory next to the JSON file (or the JSON file's own directory).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise ParseError("$.images", "missing or not a list")
    items = []
    for k, entry in enumerate(doc["images"]):
        where = f"$.images[{k}]"
        if not isinstance(entry, dict):
            raise ParseError(where, "not an object")
        for key in ("filename", "split", "sentences"):
            if key not in entry:
                raise ParseError(f"{where}.{key}", f"missing field '{key}'")
        if entry["split"] not in SPLITS:
            raise ParseError(f"{where}.split", f"unknown split {entry['split']!r}")
        sents = entry["sentences"]
        if not isinstance(sents, list) or not sents:
            raise ParseError(f"{where}.sentences", "must be a non-empty list")
        caps = []
        for j, s in enumerate(sents):
            if not isinstance(s, dict) or not isinstance(s.get("raw"), str):
                raise ParseError(f"{where}.sentences[{j}].raw", "missing field 'raw'")
            caps.append(s["raw"])
        items.append(DatasetItem(str(entry["filename"]), entry["split"], tuple(caps)))
    return Dataset(items, Path(image_dir) if image_dir else _default_image_dir(path))


def dataset_to_json(ds: Dataset) -> str:
    doc = {"images": [
        {"filename": it.filename, "split": it.split,
         "sentences": [{"raw": c, "tokens": tokenize(c)} for c in it.captions]}
        for it in ds.items
    ]}
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_dataset_json(ds: Dataset, path):
    atomic_write(path, dataset_to_json(ds).encode("utf-8"))


def split_views(ds: Dataset):
    """Order-preserving (train, val, test) views of ``ds``."""
    views = tuple(ds.subset(it for it in ds.items if it.split == s) for s in SPLITS)
    if not views[2].items:
        log.warning("dataset has an empty test split")
    return views


class Vocab:
    """Token/index maps with ``<pad>=0, <start>=1, <end>=2, <unk>=3``."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise DataError(f"vocab must start with {SPECIALS}")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        if len(self.stoi) != len(tokens):
            raise DataError("duplicate tokens in vocab")

    pad = 0
    start = 1
    end = 2
    unk = 3

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def index(self, token: str) -> int:
        return self.stoi.get(token, self.unk)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens) -> list[int]:
        return [self.index(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        """Map ids to words, stopping at ``<end>`` and skipping other specials."""
        out = []
        for i in ids:
            if i == self.end:
                break
            if i in (self.pad, self.start):
                continue
            out.append(self.itos[i])
        return out


def build_vocab(ds: Dataset, min_count: int = 2) -> Vocab:
    train = [it for it in ds.items if it.split == "train"]
    if not train:
        raise DataError("cannot build a vocabulary from an empty train split")
    counts = Counter()
    for it in train:
        for cap in it.captions:
            counts.update(tokenize(cap))
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept)


# --------------------------------------------------------------------------
# synthetic scenes

BACKGROUNDS = {
    "grass": (0.30, 0.58, 0.24),
    "water": (0.14, 0.30, 0.62),
    "sand": (0.86, 0.78, 0.55),
    "gray": (0.50, 0.50, 0.50),
}
BACKGROUND_PHRASE = {"grass": "grass", "water": "water", "sand": "sand", "gray": "gray ground"}
OBJECT_CLASSES = ("building", "road", "tank", "runway")
OBJECT_COLORS = {
    "building": (0.80, 0.32, 0.26),
    "road": (0.18, 0.18, 0.20),
    "tank": (0.96, 0.96, 0.94),
    "runway": (0.72, 0.72, 0.76),
}
COUNT_WORDS = {1: "a", 2: "two", 3: "three"}
TEMPLATES = (
    "there {be} {objs} on the {bg}",
    "{objs} {be} located on the {bg}",
    "this {bg} area has {objs}",
    "we can see {objs} in the {bg}",
    "an aerial view of {objs} on the {bg}",
)
SCENE_SIZE = 64
MIN_SYNTHETIC = 10


def _object_phrase(classes) -> tuple[str, str]:
    counts = Counter(classes)
    groups = []
    for cls in OBJECT_CLASSES:
        n = counts.get(cls, 0)
        if n:
            groups.append(f"{COUNT_WORDS[n]} {cls}{'s' if n > 1 else ''}")
    phrase = groups[0]
    if len(groups) > 1:
        phrase += " near " + " and ".join(groups[1:])
    first = counts[next(c for c in OBJECT_CLASSES if counts.get(c))]
    return phrase, ("are" if first > 1 else "is")


def scene_captions(background: str, classes) -> list[str]:
    objs, be = _object_phrase(classes)
    bg = BACKGROUND_PHRASE[background]
    return [t.format(objs=objs, be=be, bg=bg) for t in TEMPLATES]


def _object_box(rng, cls, size):
    """Bounding box (y0, x0, y1, x1) and a shape description for one object."""
    if cls == "building":
        h, w = rng.integers(9, 17, size=2)
        y, x = rng.integers(2, size - h - 1), rng.integers(2, size - w - 1)
        return (y, x, y + h, x + w), ("rect",)
    if cls == "tank":
        r = int(rng.integers(4, 8))
        cy, cx = rng.integers(r + 2, size - r - 2, size=2)
        return (cy - r, cx - r, cy + r + 1, cx + r + 1), ("disc", cy, cx, r)
    if cls == "road":
        width = int(rng.integers(4, 7))
        pos = int(rng.integers(4, size - width - 4))
        if rng.random() < 0.5:
            return (pos, 0, pos + width, size), ("rect",)
        return (0, pos, size, pos + width), ("rect",)
    width = int(rng.integers(2, 4))
    length = int(rng.integers(36, 54))
    pos = int(rng.integers(4, size - width - 4))
    start = int(rng.integers(2, size - length - 1))
    if rng.random() < 0.5:
        return (pos, start, pos + width, start + length), ("rect",)
    return (start, pos, start + length, pos + width), ("rect",)


def _overlaps(a, b, margin=2):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def render_scene(rng, background, classes, size=SCENE_SIZE) -> np.ndarray:
    img = np.empty((size, size, 3))
    img[:] = BACKGROUNDS[background]
    boxes = []
    yy, xx = np.mgrid[0:size, 0:size]
    for cls in classes:
        for _ in range(60):
            box, shape = _object_box(rng, cls, size)
            if not any(_overlaps(box, b) for b in boxes):
                break
        boxes.append(box)
        y0, x0, y1, x1 = box
        if shape[0] == "disc":
            _, cy, cx, r = shape
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        img[mask] = OBJECT_COLORS[cls]
    img += rng.uniform(-0.02, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _split_counts(n):
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val


def gen_synthetic(n: int, seed: int, out_dir) -> Dataset:
    """Render ``n`` scenes to ``out_dir/images`` and write ``out_dir/dataset.json``.

    Output is a pure function of ``(n, seed)``.  Splits are assigned in file
    order as 80/10/10.
    """
    if n < MIN_SYNTHETIC:
        raise ParameterError(f"synthetic corpus needs at least {MIN_SYNTHETIC} images, got {n}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_train, n_val, _ = _split_counts(n)
    items = []
    names = list(BACKGROUNDS)
    for k in range(n):
        background = names[int(rng.integers(len(names)))]
        n_obj = int(rng.integers(1, 4))
        classes = [OBJECT_CLASSES[int(c)] for c in rng.integers(len(OBJECT_CLASSES), size=n_obj)]
        pixels = render_scene(rng, background, classes)
        fname = f"scene_{k:05d}.ppm"
        atomic_write(img_dir / fname, dump_netpbm(Image(pixels)))
        split = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
        items.append(DatasetItem(fname, split, tuple(scene_captions(background, classes))))
    ds = Dataset(items, img_dir)
    atomic_write(out_dir / "dataset.json", dataset_to_json(ds).encode("utf-8"))
    return ds

