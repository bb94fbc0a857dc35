"""Grad-CAM for the image-caption alignment score, plus box fitting and pointing."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .data import CELL_SIZE, IMAGE_SIZE, VOCAB, cell_block, pad_batch


@dataclass
class SaliencyMap:
    grid: np.ndarray  # (8, 8), >= 0
    raw: np.ndarray  # (8, 8) before the relu clip
    upsampled: np.ndarray  # (16, 16)
    phrase: str = ""
    image_id: int = -1
    zero_gradient: bool = False


def upsample(grid: np.ndarray, factor: int = 2, mode: str = "nearest") -> np.ndarray:
    if mode == "nearest":
        return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)
    if mode == "bilinear":
        from scipy.ndimage import zoom

        return np.maximum(zoom(grid, factor, order=1), 0.0)
    raise ValueError(f"unknown upsampling mode {mode!r}")


def grad_cam(model, image: np.ndarray, phrase, image_id: int = -1, upsample_mode: str = "nearest") -> SaliencyMap:
    """Saliency of the projected dot product <F_i(image), F_t(phrase)>.

    The gradient with respect to the last conv activations is averaged over
    space to weight the channels; the weighted channel sum is clipped at 0.
    """
    if isinstance(phrase, str):
        text, seq = phrase, VOCAB.tokenize(phrase)
    else:
        seq, text = phrase, VOCAB.detokenize(phrase)
    img = np.asarray(image, dtype=np.float64)[None]
    with Tape() as tape:
        z_img, act = model.embed_images(img)
        act.retain_grad()
        z_txt = model.embed_text(pad_batch([seq]))
        score = ad.reduce("sum", z_img * z_txt)
    tape.backward(score)
    for p in model.named_params("infonce_all_pairs").values():
        p.grad = None
    A = act.data[0]
    G = act.grad[0] if act.grad is not None else np.zeros_like(A)
    weights = G.mean(axis=(1, 2))
    raw = np.tensordot(weights, A, axes=1)
    grid = np.maximum(raw, 0.0)
    return SaliencyMap(grid, raw, upsample(grid, IMAGE_SIZE // grid.shape[0], upsample_mode), text, image_id, not G.any())


def box_from_saliency(smap, mass_fraction: float = 0.5) -> tuple[int, int, int, int]:
    """Greedy-shrink box (row0, col0, row1, col1), inclusive, holding >= mass_fraction.

    Starting from the full frame, repeatedly drop whichever border line
    (top, bottom, left, right; first in that order on ties) removes the least
    mass, as long as the remainder still holds the required mass. Lines
    through the saliency argmax are never dropped.
    """
    m = smap.upsampled if isinstance(smap, SaliencyMap) else np.asarray(smap, dtype=np.float64)
    if not 0 < mass_fraction <= 1:
        raise ValueError("mass_fraction must be in (0, 1]")
    total = m.sum()
    if total <= 0:
        raise ValueError("saliency map is all zero")
    need = mass_fraction * total * (1 - 1e-12)
    ar, ac = np.unravel_index(np.argmax(m), m.shape)
    r0, c0, r1, c1 = 0, 0, m.shape[0] - 1, m.shape[1] - 1
    mass = total
    while True:
        options = []
        if r0 < ar:
            options.append((m[r0, c0 : c1 + 1].sum(), 0))
        if r1 > ar:
            options.append((m[r1, c0 : c1 + 1].sum(), 1))
        if c0 < ac:
            options.append((m[r0 : r1 + 1, c0].sum(), 2))
        if c1 > ac:
            options.append((m[r0 : r1 + 1, c1].sum(), 3))
        options = [o for o in options if mass - o[0] >= need]
        if not options:
            return int(r0), int(c0), int(r1), int(c1)
        loss, side = min(options)
        mass -= loss
        if side == 0:
            r0 += 1
        elif side == 1:
            r1 -= 1
        elif side == 2:
            c0 += 1
        else:
            c1 -= 1


def chance_rate() -> float:
    """Probability that a uniformly placed argmax lands in one cell block."""
    return CELL_SIZE * CELL_SIZE / (IMAGE_SIZE * IMAGE_SIZE)


def pointing_hits(maps, rows, cols) -> np.ndarray:
    """Whether each 16x16 map's argmax (first on ties) falls inside its cell block."""
    hits = []
    for m, r, c in zip(maps, rows, cols):
        up = m.upsampled if isinstance(m, SaliencyMap) else np.asarray(m)
        y, x = np.unravel_index(np.argmax(up), up.shape)
        r0, c0, r1, c1 = cell_block(int(r), int(c))
        hits.append(r0 <= y < r1 and c0 <= x < c1)
    return np.array(hits, dtype=bool)


def pointing_accuracy(model, corpus) -> tuple[float, float]:
    """(accuracy, chance) using each image's own caption as the phrase."""
    if len(corpus) == 0:
        raise ValueError("empty test set")
    maps = [grad_cam(model, corpus.images[i], corpus.captions[i], i) for i in range(len(corpus))]
    hits = pointing_hits(maps, corpus.labels["row"], corpus.labels["col"])
    return float(hits.mean()), chance_rate()


def write_pgm(path, smap: SaliencyMap, maxval: int = 255) -> Path:
    """Plain (P2) graymap of the upsampled map, scaled to [0, maxval]."""
    m = smap.upsampled
    peak = m.max()
    levels = np.zeros_like(m, dtype=int) if peak <= 0 else np.rint(m / peak * maxval).astype(int)
    lines = ["P2", f"# phrase: {smap.phrase}", f"{m.shape[1]} {m.shape[0]}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in levels]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def grid_csv(smap: SaliencyMap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "value"])
    for (r, c), v in np.ndenumerate(smap.grid):
        w.writerow([r, c, repr(float(v))])
    return buf.getvalue()
