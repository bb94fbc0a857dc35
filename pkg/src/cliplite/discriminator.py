"""Projection heads and dot-product scoring (the critic T(y, z)).

Each modality gets its own head: main path linear -> relu -> linear plus a
linear shortcut, summed. The critic score of a pair is the raw dot product
of the two projections; cosine alignment is used for retrieval, zero-shot
prompting and concept editing.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ModelParams, init_tensor


def init_projection(seed: int, d_in: int = 32, d_proj: int = 32, prefix: str = "proj") -> ModelParams:
    return ModelParams(
        main1_w=init_tensor(seed, f"{prefix}/main1_w", (d_in, d_proj), "kaiming-uniform", fan_in=d_in),
        main1_b=init_tensor(seed, f"{prefix}/main1_b", (d_proj,), "zeros"),
        main2_w=init_tensor(seed, f"{prefix}/main2_w", (d_proj, d_proj), "xavier-uniform", fan_in=d_proj, fan_out=d_proj),
        main2_b=init_tensor(seed, f"{prefix}/main2_b", (d_proj,), "zeros"),
        short_w=init_tensor(seed, f"{prefix}/short_w", (d_in, d_proj), "xavier-uniform", fan_in=d_in, fan_out=d_proj),
        short_b=init_tensor(seed, f"{prefix}/short_b", (d_proj,), "zeros"),
    )


def project(p: ModelParams, rep: Tensor) -> Tensor:
    rep = ad.as_tensor(rep)
    d_in = p["short_w"].shape[0]
    if rep.data.ndim != 2 or rep.shape[1] != d_in:
        raise ad.ShapeError(f"projection expects (n, {d_in}) input, got {rep.shape}")
    main = ad.linear(ad.relu(ad.linear(rep, p["main1_w"], p["main1_b"])), p["main2_w"], p["main2_b"])
    return main + ad.linear(rep, p["short_w"], p["short_b"])


def score_pairs(z_img, z_txt, mode: str = "paired") -> Tensor:
    """Critic scores: ``paired`` -> (n,) row dots; ``all_pairs`` -> (n, m) matrix."""
    z_img, z_txt = ad.as_tensor(z_img), ad.as_tensor(z_txt)
    if z_img.shape[-1] != z_txt.shape[-1]:
        raise ad.ShapeError(f"projection widths differ: {z_img.shape} vs {z_txt.shape}")
    if mode == "paired":
        if z_img.shape[0] != z_txt.shape[0]:
            raise ad.ShapeError("paired scoring needs equally many images and captions")
        return ad.reduce("sum", z_img * z_txt, axes=1)
    if mode == "all_pairs":
        return ad.matmul(z_img, ad.transpose(z_txt))
    raise ValueError(f"unknown scoring mode {mode!r}")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("cosine alignment of a zero-norm vector")
    return x / norms


def cosine_align(z_img, z_txt) -> np.ndarray:
    """Cosine similarity matrix (n, m); plain vectors give a scalar."""
    a = z_img.data if isinstance(z_img, Tensor) else np.asarray(z_img, dtype=np.float64)
    b = z_txt.data if isinstance(z_txt, Tensor) else np.asarray(z_txt, dtype=np.float64)
    out = _unit_rows(a) @ _unit_rows(b).T
    if a.ndim == 1 and b.ndim == 1:
        return float(out[0, 0])
    return out
