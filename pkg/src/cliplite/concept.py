"""Concept subspaces in the shared space and their hard removal.

Sentence pairs that differ only in one attribute word are embedded, each pair
is centred on its own mean, and the principal directions of the pooled
centred vectors span the concept subspace V. Editing subtracts the projection
onto V: h_hat = h - sum_j <h, v_j> v_j.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import pad_batch
from .discriminator import cosine_align


@dataclass
class RepresentationSets:
    side_a: np.ndarray  # (n, d)
    side_b: np.ndarray

    def __post_init__(self):
        if self.side_a.shape != self.side_b.shape:
            raise ValueError("both sides need the same number of representations")


@dataclass
class SubspaceBasis:
    vectors: np.ndarray  # (k, d), orthonormal rows
    explained: np.ndarray  # (k,) eigenvalue / total variance

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def empty(cls, d: int) -> "SubspaceBasis":
        return cls(np.zeros((0, d)), np.zeros(0))


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def embed_pairs(pairs, model, normalize: bool = True) -> RepresentationSets:
    """Encode + project both sides of each sentence pair."""
    a = model.embed_text(pad_batch([p[0] for p in pairs])).data
    b = model.embed_text(pad_batch([p[1] for p in pairs])).data
    if normalize:
        a, b = _unit(a), _unit(b)
    return RepresentationSets(a, b)


class ConvergenceError(RuntimeError):
    pass


def power_eigh(C: np.ndarray, k: int, tol: float = 1e-10, max_iter: int = 10000) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenpairs of a symmetric PSD matrix by power iteration with deflation.

    Converged when the residual ||C v - lambda v|| drops below tol * max(1, trace).
    Returns (eigenvalues (k,), eigenvectors (k, d)); each vector's sign is
    fixed so its largest-magnitude entry is positive.
    """
    C = np.array(C, dtype=np.float64)
    d = C.shape[0]
    scale = max(1.0, float(np.trace(C)))
    start = np.random.Generator(np.random.Philox(key=12345)).standard_normal((k, d))
    vals, vecs = [], []
    A = C.copy()
    for j in range(k):
        v = start[j]
        for prev in vecs:
            v = v - (v @ prev) * prev
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = A @ v
            for prev in vecs:
                w = w - (w @ prev) * prev
            lam = float(v @ w)
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            if np.linalg.norm(w - lam * v) < tol * scale:
                break
            v = w / norm
        else:
            raise ConvergenceError(f"eigenvector {j} did not converge in {max_iter} iterations")
        w = C @ v
        lam = float(v @ w)
        v = v * np.sign(v[np.argmax(np.abs(v))])
        vals.append(lam)
        vecs.append(v)
        A = A - lam * np.outer(v, v)
    return np.array(vals), np.array(vecs)


def pair_centred(sets: RepresentationSets) -> np.ndarray:
    mu = 0.5 * (sets.side_a + sets.side_b)
    return np.concatenate([sets.side_a - mu, sets.side_b - mu], axis=0)


def estimate_subspace(sets: RepresentationSets, k: int = 1, tol: float = 1e-10, max_iter: int = 10000) -> SubspaceBasis:
    n, d = sets.side_a.shape
    if n < 2:
        raise ValueError("need at least two sentence pairs")
    if not 0 <= k <= d:
        raise ValueError(f"k must be in [0, {d}]")
    X = pair_centred(sets)
    C = X.T @ X / X.shape[0]
    total = float(np.trace(C))
    if total <= 1e-24:
        raise ValueError("attribute pairs have zero spread: rank 0")
    if k == 0:
        return SubspaceBasis.empty(d)
    vals, vecs = power_eigh(C, k, tol, max_iter)
    if vals[-1] <= 1e-12 * total:
        rank = int((vals > 1e-12 * total).sum())
        raise ValueError(f"k={k} exceeds the numerical rank {rank} of the attribute spread")
    return SubspaceBasis(vecs, vals / total)


def remove_subspace(h, V: SubspaceBasis) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != V.dim:
        raise ValueError(f"representation width {h.shape[-1]} does not match subspace width {V.dim}")
    if V.k == 0:
        return h.copy()
    return h - (h @ V.vectors.T) @ V.vectors


# --------------------------------------------------------------------------
# before/after alignment report


@dataclass
class EqualizationRow:
    prompt: str
    prompt_side: str
    bucket: str
    before: float
    after: float
    after_renormalized: float

    @property
    def delta(self) -> float:
        return self.before - self.after


def _top_mean(scores: np.ndarray, top_n: int) -> np.ndarray:
    """Mean of each row's top_n entries."""
    part = -np.sort(-scores, axis=1)[:, :top_n]
    return part.mean(axis=1)


def equalization_report(image_buckets: dict, prompts: dict, V: SubspaceBasis, top_n: int = 10) -> list[EqualizationRow]:
    """Mean top-n alignment per (prompt, image bucket) before and after editing.

    ``image_buckets`` maps bucket name -> (n_i, d) image projections;
    ``prompts`` maps prompt side -> list of (text, (d,) embedding). Image
    projections are unit-normalized first. "after" uses the edited vectors as
    they are; "after_renormalized" rescales them back to unit length.
    """
    rows = []
    for bucket, H in image_buckets.items():
        if H.shape[0] < top_n:
            raise ValueError(f"bucket {bucket!r} has {H.shape[0]} images, fewer than top_n={top_n}")
    for side, plist in prompts.items():
        texts = [t for t, _ in plist]
        T = _unit(np.array([e for _, e in plist]))
        for bucket, H in image_buckets.items():
            Hn = _unit(np.asarray(H, dtype=np.float64))
            edited = remove_subspace(Hn, V)
            before = _top_mean(T @ Hn.T, top_n)
            after = _top_mean(T @ edited.T, top_n)
            after_rn = _top_mean(cosine_align(T, edited), top_n)
            for i, text in enumerate(texts):
                rows.append(EqualizationRow(text, side, bucket, float(before[i]), float(after[i]), float(after_rn[i])))
    return rows


def bucket_gaps(rows: list[EqualizationRow], field: str = "after") -> dict[str, float]:
    """|bucket_a - bucket_b| per prompt for the chosen column."""
    by_prompt: dict[str, list[float]] = {}
    for r in rows:
        by_prompt.setdefault(r.prompt, []).append(getattr(r, field))
    return {p: abs(v[0] - v[1]) for p, v in by_prompt.items() if len(v) == 2}


def equalization_csv(rows: list[EqualizationRow]) -> str:
    """One row per (prompt, image bucket): mean top-n alignment before and after the edit."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["prompt_side", "prompt", "bucket", "before", "after", "delta", "after_renormalized"])
    for r in rows:
        w.writerow([r.prompt_side, r.prompt, r.bucket, repr(r.before), repr(r.after), repr(r.delta), repr(r.after_renormalized)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# the texture experiment on a trained model

TEXTURE_PROMPTS = ("a {} shape", "a photo of a {} shape", "a picture of a {} shape", "a {} red square", "a {} blue disk", "a {} green cross")
ATTRIBUTE_FREE_PROMPTS = ("a red square", "a blue disk", "a green cross", "a photo of a shape")


@dataclass
class TextureEdit:
    basis: SubspaceBasis
    rows: list
    residual: float  # max |<h_hat, v_j>| over edited, unit-normalized image projections

    def gaps(self, field: str) -> dict[str, float]:
        return bucket_gaps(self.rows, field)

    def attribute_free_shift(self) -> float:
        return max(abs(r.delta) for r in self.rows if r.prompt_side == "attribute-free")


def texture_edit(model, corpus, k: int = 1, top_n: int = 10, normalize: bool = True) -> TextureEdit:
    """Estimate the striped/dotted subspace and remove it from ``corpus``'s image projections."""
    from .data import TEXTURES, VOCAB, AttributePairCorpus, contextualize

    V = estimate_subspace(embed_pairs(contextualize(AttributePairCorpus()), model, normalize), k)
    z = model.embed_images(corpus.images)[0].data
    tex = corpus.labels["texture"]
    buckets = {t: z[tex == i] for i, t in enumerate(TEXTURES)}

    def emb(s):
        return model.embed_text([VOCAB.tokenize(s)]).data[0]

    prompts = {t: [(p.format(t), emb(p.format(t))) for p in TEXTURE_PROMPTS] for t in TEXTURES}
    prompts["attribute-free"] = [(p, emb(p)) for p in ATTRIBUTE_FREE_PROMPTS]
    rows = equalization_report(buckets, prompts, V, top_n)
    residual = float(np.abs(remove_subspace(_unit(z), V) @ V.vectors.T).max()) if V.k else 0.0
    return TextureEdit(V, rows, residual)
