"""Synthetic corpora with known structure.

* correlated Gaussian pairs with closed-form mutual information,
* captioned 16x16 shape images ("a dotted red square at 0 0"),
* paired sentences that differ only in the texture word, for concept editing.

Image payload layout (``export_corpus``): little-endian uint64 ``n`` followed by
``n * 3 * 16 * 16`` little-endian float64 pixels in (n, channel, row, col)
order. The JSON manifest next to it carries captions, labels and the generating ShapesCorpusSpec.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

PAD, UNK = "<pad>", "<unk>"
SHAPES = ("square", "disk", "cross")
COLORS = ("red", "green", "blue")
TEXTURES = ("striped", "dotted")
MAX_LEN = 16
IMAGE_SIZE = 16
CELL_STRIDE = 5
CELL_SIZE = 6

_WORDS = (
    "a", "at", "0", "1", "2",
    *TEXTURES, *COLORS, *SHAPES,
    "photo", "picture", "of", "shape",
)

RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.1, 0.9),
}


class VocabularyError(KeyError):
    pass


class Vocabulary:
    """Whitespace tokenizer over the closed caption grammar."""

    def __init__(self, words=_WORDS):
        self.itos = [PAD, UNK, *words]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    pad_id = 0
    unk_id = 1

    def __len__(self) -> int:
        return len(self.itos)

    def tokenize(self, text: str, max_len: int = MAX_LEN) -> "TokenSequence":
        words = text.split()
        if not words:
            raise ValueError("empty caption")
        if len(words) > max_len:
            raise ValueError(f"caption has {len(words)} tokens, limit is {max_len}")
        try:
            ids = [self.stoi[w] for w in words]
        except KeyError as err:
            raise VocabularyError(f"word {err.args[0]!r} is not in the vocabulary") from None
        return TokenSequence(ids)

    def detokenize(self, seq: "TokenSequence") -> str:
        return " ".join(self.itos[i] for i in seq.ids if i != self.pad_id)


VOCAB = Vocabulary()


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __init__(self, ids):
        object.__setattr__(self, "ids", tuple(int(i) for i in ids))
        if not 1 <= len(self.ids) <= MAX_LEN:
            raise ValueError(f"token sequence length must be in [1, {MAX_LEN}]")

    @property
    def length(self) -> int:
        return len(self.ids)


def pad_batch(seqs, max_len: int = MAX_LEN) -> np.ndarray:
    out = np.zeros((len(seqs), max_len), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids = s.ids if isinstance(s, TokenSequence) else tuple(s)
        if len(ids) > max_len:
            raise ValueError("sequence longer than max_len")
        out[i, : len(ids)] = ids
    return out


# --------------------------------------------------------------------------
# Gaussian pairs


@dataclass(frozen=True)
class GaussianPairSpec:
    d: int = 1
    rho: float = 0.5
    n: int = 10000
    seed: int = 0

    @property
    def analytic_mi(self) -> float:
        return gaussian_mi(self.d, self.rho)


def gaussian_mi(d: int, rho: float) -> float:
    """-(d/2) ln(1 - rho^2) nats."""
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    return -0.5 * d * math.log1p(-rho * rho)


@dataclass
class GaussianPairs:
    y: np.ndarray
    z: np.ndarray
    analytic_mi: float


def gen_gaussian_pairs(spec: GaussianPairSpec, stream: str = "data/gaussian") -> GaussianPairs:
    if not abs(spec.rho) < 1:
        raise ValueError("|rho| must be < 1")
    if spec.n <= 0 or spec.d <= 0:
        raise ValueError("n and d must be positive")
    rng = substream(spec.seed, stream)
    y = rng.standard_normal((spec.n, spec.d))
    eps = rng.standard_normal((spec.n, spec.d))
    z = spec.rho * y + math.sqrt(1.0 - spec.rho**2) * eps
    return GaussianPairs(y, z, spec.analytic_mi)


# --------------------------------------------------------------------------
# captioned shapes


@dataclass(frozen=True)
class ShapesCorpusSpec:
    n: int = 4096
    seed: int = 0
    noise: float = 0.02


def _shape_masks() -> dict[str, np.ndarray]:
    yy, xx = np.mgrid[0:5, 0:5]
    square = np.ones((5, 5), dtype=bool)
    disk = (yy - 2) ** 2 + (xx - 2) ** 2 <= 5
    cross = (yy == 2) | (xx == 2)
    return {"square": square, "disk": disk, "cross": cross}


SHAPE_MASKS = _shape_masks()


def cell_block(row: int, col: int) -> tuple[int, int, int, int]:
    """Pixel block (r0, c0, r1, c1), end-exclusive, for grid cell (row, col)."""
    r0, c0 = CELL_STRIDE * row, CELL_STRIDE * col
    return r0, c0, r0 + CELL_SIZE, c0 + CELL_SIZE


def render(shape: str, color: str, texture: str, row: int, col: int, dy: int = 0, dx: int = 0):
    """Noise-free image (3, 16, 16) and its boolean shape mask (16, 16).

    Background is mid-gray. Inside the 5x5 shape, "on" texture pixels take the
    full color and "off" pixels half of it: striped alternates rows, dotted is
    a checkerboard.
    """
    img = np.full((3, IMAGE_SIZE, IMAGE_SIZE), 0.5)
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    local = SHAPE_MASKS[shape]
    yy, xx = np.mgrid[0:5, 0:5]
    on = (yy % 2 == 0) if texture == "striped" else ((yy + xx) % 2 == 0)
    r0, c0, _, _ = cell_block(row, col)
    r0, c0 = r0 + dy, c0 + dx
    rgb = np.array(RGB[color])
    patch = np.where(on, 1.0, 0.5)[None] * rgb[:, None, None]
    region = img[:, r0 : r0 + 5, c0 : c0 + 5]
    img[:, r0 : r0 + 5, c0 : c0 + 5] = np.where(local[None], patch, region)
    mask[r0 : r0 + 5, c0 : c0 + 5] = local
    return img, mask


def caption_for(shape: str, color: str, texture: str, row: int, col: int) -> str:
    return f"a {texture} {color} {shape} at {row} {col}"


@dataclass
class ShapesCorpus:
    images: np.ndarray  # (n, 3, 16, 16) in [0, 1]
    tokens: np.ndarray  # (n, MAX_LEN) int, pad = 0
    captions: list[str]
    labels: dict[str, np.ndarray]  # shape/color/texture indices, row, col, dy, dx
    spec: ShapesCorpusSpec | None = None

    def __len__(self) -> int:
        return len(self.captions)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int):
        seq = TokenSequence(self.tokens[i][self.tokens[i] != VOCAB.pad_id])
        return self.images[i], seq, {k: int(v[i]) for k, v in self.labels.items()}

    def subset(self, idx) -> "ShapesCorpus":
        idx = np.asarray(idx, dtype=np.int64)
        return ShapesCorpus(
            self.images[idx],
            self.tokens[idx],
            [self.captions[i] for i in idx],
            {k: v[idx] for k, v in self.labels.items()},
            self.spec,
        )

    def masks(self) -> np.ndarray:
        out = np.zeros((len(self), IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        for i in range(len(self)):
            lab = {k: int(v[i]) for k, v in self.labels.items()}
            out[i] = render(
                SHAPES[lab["shape"]], COLORS[lab["color"]], TEXTURES[lab["texture"]],
                lab["row"], lab["col"], lab["dy"], lab["dx"],
            )[1]
        return out


def gen_captioned_shapes(spec: ShapesCorpusSpec, stream: str = "data/shapes") -> ShapesCorpus:
    if spec.n <= 0:
        raise ValueError("corpus size must be positive")
    rng = substream(spec.seed, stream)
    n = spec.n
    labels = {
        "shape": rng.integers(0, len(SHAPES), n),
        "color": rng.integers(0, len(COLORS), n),
        "texture": rng.integers(0, len(TEXTURES), n),
        "row": rng.integers(0, 3, n),
        "col": rng.integers(0, 3, n),
        "dy": rng.integers(0, 2, n),
        "dx": rng.integers(0, 2, n),
    }
    noise = rng.standard_normal((n, 3, IMAGE_SIZE, IMAGE_SIZE)) * spec.noise
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE))
    captions = []
    seqs = []
    for i in range(n):
        s, c, t = SHAPES[labels["shape"][i]], COLORS[labels["color"][i]], TEXTURES[labels["texture"][i]]
        r, q = int(labels["row"][i]), int(labels["col"][i])
        img, _ = render(s, c, t, r, q, int(labels["dy"][i]), int(labels["dx"][i]))
        images[i] = np.clip(img + noise[i], 0.0, 1.0)
        cap = caption_for(s, c, t, r, q)
        captions.append(cap)
        seqs.append(VOCAB.tokenize(cap))
    return ShapesCorpus(images, pad_batch(seqs), captions, labels, spec)


def heldout_split(n: int, seed: int, test_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 90/10 (by default) permutation split into (train, test) indices."""
    perm = substream(seed, "data/split").permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def unseen_combination_split(corpus: ShapesCorpus, color: str = "green", shape: str = "cross"):
    """Train/test indices where one color-shape combination never appears in training.

    A weak distribution-shift proxy: every word is seen, the pairing is not.
    """
    held = (corpus.labels["color"] == COLORS.index(color)) & (corpus.labels["shape"] == SHAPES.index(shape))
    return np.flatnonzero(~held), np.flatnonzero(held)


def export_corpus(corpus: ShapesCorpus, directory) -> Path:
    """Write ``images.bin`` and ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = np.uint64(len(corpus)).astype("<u8").tobytes() + corpus.images.astype("<f8").tobytes()
    (directory / "images.bin").write_bytes(payload)
    manifest = {
        "format": "cliplite-shapes/1",
        "n": len(corpus),
        "image_shape": [3, IMAGE_SIZE, IMAGE_SIZE],
        "payload": "images.bin",
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "spec": asdict(corpus.spec) if corpus.spec else None,
        "vocab": VOCAB.itos,
        "captions": corpus.captions,
        "labels": {k: v.tolist() for k, v in corpus.labels.items()},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_corpus(directory) -> ShapesCorpus:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    raw = (directory / manifest["payload"]).read_bytes()
    n = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    if n != manifest["n"] or len(raw) != 8 + n * 3 * IMAGE_SIZE * IMAGE_SIZE * 8:
        raise ValueError("image payload length disagrees with manifest")
    images = np.frombuffer(raw[8:], dtype="<f8").reshape(n, 3, IMAGE_SIZE, IMAGE_SIZE).astype(np.float64)
    captions = manifest["captions"]
    labels = {k: np.asarray(v, dtype=np.int64) for k, v in manifest["labels"].items()}
    spec = ShapesCorpusSpec(**manifest["spec"]) if manifest.get("spec") else None
    return ShapesCorpus(images, pad_batch([VOCAB.tokenize(c) for c in captions]), captions, labels, spec)


# --------------------------------------------------------------------------
# attribute pairs for concept editing


def _default_templates() -> list[str]:
    out = [f"a [word] {c} {s}" for c in COLORS for s in SHAPES]
    out += ["a [word] shape", "a photo of a [word] shape", "a picture of a [word] shape"]
    return out


@dataclass
class AttributePairCorpus:
    pairs: list[tuple[str, str]] = field(default_factory=lambda: [("striped", "dotted")])
    templates: list[str] = field(default_factory=_default_templates)


def contextualize(corpus: AttributePairCorpus, vocab: Vocabulary = VOCAB):
    """Fill every template with both words of every pair.

    Returns a list of (side_a, side_b) TokenSequence pairs, pairs-major.
    """
    if not corpus.templates:
        raise ValueError("no templates given")
    for t in corpus.templates:
        if t.split().count("[word]") != 1:
            raise ValueError(f"template {t!r} must contain exactly one [word] slot")
    out = []
    for wa, wb in corpus.pairs:
        for t in corpus.templates:
            out.append((vocab.tokenize(t.replace("[word]", wa)), vocab.tokenize(t.replace("[word]", wb))))
    return out
