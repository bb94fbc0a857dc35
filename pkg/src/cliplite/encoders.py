"""Tiny image and text encoders.

Image: standardize -> conv 3x3 (3->8, stride 1) -> relu -> conv 3x3 (8->16,
stride 2) -> relu -> global average pool -> linear (16->d_img). The 16x8x8
map after the second relu is returned alongside the representation because
Grad-CAM needs it.

Text: mean of the non-pad token embeddings -> linear -> relu -> linear. The
mean makes the encoder blind to word order.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import IMAGE_SIZE, VOCAB, TokenSequence, pad_batch
from .params import ModelParams, init_tensor

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def init_image_encoder(seed: int, d_img: int = 32, prefix: str = "image") -> ModelParams:
    return ModelParams(
        conv1_w=init_tensor(seed, f"{prefix}/conv1_w", (8, 3, 3, 3), "kaiming-uniform", fan_in=27),
        conv1_b=init_tensor(seed, f"{prefix}/conv1_b", (8,), "zeros"),
        conv2_w=init_tensor(seed, f"{prefix}/conv2_w", (16, 8, 3, 3), "kaiming-uniform", fan_in=72),
        conv2_b=init_tensor(seed, f"{prefix}/conv2_b", (16,), "zeros"),
        fc_w=init_tensor(seed, f"{prefix}/fc_w", (16, d_img), "xavier-uniform", fan_in=16, fan_out=d_img),
        fc_b=init_tensor(seed, f"{prefix}/fc_b", (d_img,), "zeros"),
    )


def init_text_encoder(
    seed: int, vocab_size: int = len(VOCAB), d_emb: int = 32, d_txt: int = 32, prefix: str = "text"
) -> ModelParams:
    return ModelParams(
        embedding=init_tensor(seed, f"{prefix}/embedding", (vocab_size, d_emb), "normal-0.02"),
        fc1_w=init_tensor(seed, f"{prefix}/fc1_w", (d_emb, d_txt), "kaiming-uniform", fan_in=d_emb),
        fc1_b=init_tensor(seed, f"{prefix}/fc1_b", (d_txt,), "zeros"),
        fc2_w=init_tensor(seed, f"{prefix}/fc2_w", (d_txt, d_txt), "xavier-uniform", fan_in=d_txt, fan_out=d_txt),
        fc2_b=init_tensor(seed, f"{prefix}/fc2_b", (d_txt,), "zeros"),
    )


def init_params(seed: int, kind: str, **kwargs) -> ModelParams:
    if kind == "image":
        return init_image_encoder(seed, **kwargs)
    if kind == "text":
        return init_text_encoder(seed, **kwargs)
    raise ValueError(f"unknown encoder kind {kind!r}")


def standardize(images: np.ndarray) -> np.ndarray:
    return (np.asarray(images, dtype=np.float64) - PIXEL_MEAN) / PIXEL_STD


def encode_image(params: ModelParams, images) -> tuple[Tensor, Tensor]:
    """Return (representation (n, d_img), last conv activations (n, 16, 8, 8)).

    ``images`` are raw pixels in [0, 1]; standardization happens here.
    """
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ad.ShapeError(f"expected images of shape (n, 3, 16, 16), got {arr.shape}")
    x = Tensor._from_op(standardize(arr))
    h = ad.relu(ad.conv2d(x, params["conv1_w"], stride=1, pad=1, bias=params["conv1_b"]))
    act = ad.relu(ad.conv2d(h, params["conv2_w"], stride=2, pad=1, bias=params["conv2_b"]))
    pooled = ad.reduce("global_avg_pool", act)
    rep = ad.linear(pooled, params["fc_w"], params["fc_b"])
    return rep, act


def _token_array(tokens) -> np.ndarray:
    if isinstance(tokens, np.ndarray):
        return tokens.astype(np.int64, copy=False)
    seqs = list(tokens)
    if seqs and isinstance(seqs[0], TokenSequence):
        return pad_batch(seqs)
    return np.asarray(seqs, dtype=np.int64)


def encode_text(params: ModelParams, tokens, pad_id: int = VOCAB.pad_id) -> Tensor:
    """Encode a batch of token sequences (padded array or TokenSequence list)."""
    ids = _token_array(tokens)
    if ids.ndim != 2:
        raise ad.ShapeError("token batch must be 2-D")
    vocab_size = params["embedding"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError("token id outside the vocabulary")
    keep = ids != pad_id
    lengths = keep.sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("caption consists only of pad tokens")
    rows, cols = np.nonzero(keep)
    flat = ids[rows, cols]
    pool = np.zeros((ids.shape[0], flat.size))
    pool[rows, np.arange(flat.size)] = 1.0 / lengths[rows]
    emb = ad.gather_rows(params["embedding"], flat)
    mean = ad.matmul(Tensor._from_op(pool), emb)
    h = ad.relu(ad.linear(mean, params["fc1_w"], params["fc1_b"]))
    return ad.linear(h, params["fc2_w"], params["fc2_b"])
