"""Image-caption training loop.

The single-negative objectives (``jsd_single_neg``, ``dv_single_neg``) pair
image i with caption ``neg_index[i]`` as its only negative, so a batch of n
carries n negatives. ``infonce_all_pairs`` scores the full n x n matrix and
uses every off-diagonal entry, n^2 - n negatives.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ShapesCorpus
from .discriminator import init_projection, project, score_pairs
from .encoders import encode_image, encode_text, init_image_encoder, init_text_encoder
from .estimators import ScoreSet, dv_bound, infonce_bound, jsd_bound
from .optim import LrSchedule, Optimizer, lr_at
from .params import ModelParams
from .rng import substream

OBJECTIVES = ("jsd_single_neg", "infonce_all_pairs", "dv_single_neg")
LOGIT_SCALE_RANGE = (math.log(1 / 100), math.log(100))


@dataclass
class TrainConfig:
    """Training settings. ``None`` optimizer fields resolve per objective.

    Single-negative objectives default to SGD (momentum 0.9, weight decay 1e-4)
    inside LookAhead(0.5, 5) at lr 0.05; InfoNCE defaults to AdamW at lr 1e-3,
    weight decay 0.2, betas (0.9, 0.98), eps 1e-6.
    """

    objective: str = "jsd_single_neg"
    batch_size: int = 64
    total_steps: int = 3000
    seed: int = 0
    optimizer: str | None = None
    base_lr: float | None = None
    warmup_steps: int = 100
    momentum: float = 0.9
    weight_decay: float | None = None
    betas: tuple[float, float] | None = None
    eps: float | None = None
    lookahead_alpha: float | None = None
    lookahead_k: int = 5
    temperature_init: float = 0.07
    d_img: int = 32
    d_txt: int = 32
    d_proj: int = 32
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 so every positive has a distinct negative")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.betas is not None:
            self.betas = tuple(self.betas)

    def resolved(self) -> "TrainConfig":
        single = self.objective != "infonce_all_pairs"
        defaults = dict(
            optimizer="sgd_momentum" if single else "adamw",
            base_lr=0.05 if single else 1e-3,
            weight_decay=1e-4 if single else 0.2,
            betas=(0.9, 0.999) if single else (0.9, 0.98),
            eps=1e-8 if single else 1e-6,
            lookahead_alpha=0.5 if single else 0.0,
        )
        return replace(self, **{k: (getattr(self, k) if getattr(self, k) is not None else v) for k, v in defaults.items()})


@dataclass
class Model:
    image: ModelParams
    text: ModelParams
    proj_image: ModelParams
    proj_text: ModelParams
    logit_scale: Tensor = field(default_factory=lambda: Tensor.param(math.log(1 / 0.07)))

    def named_params(self, objective: str = "jsd_single_neg") -> dict[str, Tensor]:
        out = {}
        for group in ("image", "text", "proj_image", "proj_text"):
            for k, v in getattr(self, group).items():
                out[f"{group}/{k}"] = v
        if objective == "infonce_all_pairs":
            out["logit_scale"] = self.logit_scale
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.named_params().items()}
        out["logit_scale"] = self.logit_scale.data.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        params["logit_scale"] = self.logit_scale
        for k, p in params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks parameter {k!r}")
            if arrays[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.shape}")
            p.data[...] = arrays[k]

    def embed_images(self, images) -> tuple[Tensor, Tensor]:
        rep, act = encode_image(self.image, images)
        return project(self.proj_image, rep), act

    def embed_text(self, tokens) -> Tensor:
        return project(self.proj_text, encode_text(self.text, tokens))


def init_model(seed: int, d_img: int = 32, d_txt: int = 32, d_proj: int = 32, temperature: float = 0.07) -> Model:
    return Model(
        image=init_image_encoder(seed, d_img),
        text=init_text_encoder(seed, d_txt=d_txt),
        proj_image=init_projection(seed, d_img, d_proj, prefix="proj_image"),
        proj_text=init_projection(seed, d_txt, d_proj, prefix="proj_text"),
        logit_scale=Tensor.param(math.log(1 / temperature)),
    )


# --------------------------------------------------------------------------
# batches


@dataclass
class PairBatch:
    indices: np.ndarray
    images: np.ndarray
    tokens: np.ndarray
    neg_index: np.ndarray

    def __post_init__(self):
        n = len(self.indices)
        if sorted(self.neg_index.tolist()) != list(range(n)) or (self.neg_index == np.arange(n)).any():
            raise ValueError("neg_index must be a derangement of 0..n-1")


def rotation_derangement(n: int) -> np.ndarray:
    """i -> i + 1 mod n; a derangement for every n >= 2."""
    if n < 2:
        raise ValueError("a derangement needs n >= 2")
    return (np.arange(n) + 1) % n


def batches_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def make_batches(corpus: ShapesCorpus, batch_size: int, epoch_seed: int) -> Iterator[PairBatch]:
    """One epoch: seeded shuffle, consecutive chunks, trailing short batch dropped."""
    n = len(corpus)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds corpus size {n}")
    perm = substream(epoch_seed, "train/shuffle").permutation(n)
    neg = rotation_derangement(batch_size)
    for b in range(batches_per_epoch(n, batch_size)):
        idx = perm[b * batch_size : (b + 1) * batch_size]
        yield PairBatch(idx, corpus.images[idx], corpus.tokens[idx], neg)


def epoch_seed(root_seed: int, epoch: int) -> int:
    return int(substream(root_seed, f"train/epoch/{epoch}").integers(0, 2**63 - 1))


def batch_at(corpus: ShapesCorpus, batch_size: int, root_seed: int, step: int) -> PairBatch:
    """The batch consumed at global ``step``; lets a resumed run pick up mid-epoch."""
    per = batches_per_epoch(len(corpus), batch_size)
    epoch, offset = divmod(step, per)
    n = len(corpus)
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds corpus size {n}")
    perm = substream(epoch_seed(root_seed, epoch), "train/shuffle").permutation(n)
    idx = perm[offset * batch_size : (offset + 1) * batch_size]
    return PairBatch(idx, corpus.images[idx], corpus.tokens[idx], rotation_derangement(batch_size))


# --------------------------------------------------------------------------
# steps


def negative_pair_count(objective: str, n: int) -> int:
    return n * n - n if objective == "infonce_all_pairs" else n


def objective_loss(model: Model, batch: PairBatch, objective: str) -> tuple[Tensor, int]:
    """Loss (negated bound) and the number of negative pairs it used."""
    z_img, _ = model.embed_images(batch.images)
    z_txt = model.embed_text(batch.tokens)
    n = z_img.shape[0]
    if objective == "infonce_all_pairs":
        S = score_pairs(ad.normalize_rows(z_img), ad.normalize_rows(z_txt), "all_pairs")
        temperature = ad.exp(ad.negate(model.logit_scale))
        bound = infonce_bound(S, temperature)
        n_neg = S.size - n
    else:
        pos = score_pairs(z_img, z_txt, "paired")
        neg = score_pairs(z_img, ad.gather_rows(z_txt, batch.neg_index), "paired")
        s = ScoreSet(pos, neg)
        bound = jsd_bound(s) if objective == "jsd_single_neg" else dv_bound(s)
        n_neg = neg.size
    assert n_neg == negative_pair_count(objective, n)
    return ad.negate(bound.value), n_neg


def train_step(model: Model, batch: PairBatch, config: TrainConfig, optimizer: Optimizer, lr: float, step: int = 0) -> float:
    optimizer.zero_grad()
    with Tape() as tape:
        try:
            loss, _ = objective_loss(model, batch, config.objective)
        except NonFiniteError as err:
            raise NonFiniteError(f"step {step}: {err}") from err
    value = loss.item()
    tape.backward(loss)
    optimizer.step(lr)
    if config.objective == "infonce_all_pairs":
        lo, hi = LOGIT_SCALE_RANGE
        model.logit_scale.data[...] = np.clip(model.logit_scale.data, lo, hi)
    return value


def make_optimizer(model: Model, config: TrainConfig) -> Optimizer:
    cfg = config.resolved()
    lookahead = (cfg.lookahead_alpha, cfg.lookahead_k) if cfg.lookahead_alpha else None
    return Optimizer(
        model.named_params(cfg.objective),
        kind=cfg.optimizer,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        betas=cfg.betas,
        eps=cfg.eps,
        lookahead=lookahead,
    )


# --------------------------------------------------------------------------
# full runs


@dataclass
class TrainResult:
    model: Model
    optimizer: Optimizer
    metrics: list[dict]
    step: int
    seconds: list[float] = field(default_factory=list)


def metrics_csv(rows: list[dict]) -> str:
    """step,loss,lr with shortest round-trip float formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "lr"])
    for r in rows:
        w.writerow([r["step"], repr(float(r["loss"])), repr(float(r["lr"]))])
    return buf.getvalue()


def timing_csv(rows: list[dict], seconds: list[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "seconds"])
    for r, s in zip(rows, seconds):
        w.writerow([r["step"], f"{s:.6f}"])
    return buf.getvalue()


def checkpoint_tensors(model: Model, optimizer: Optimizer | None) -> dict[str, np.ndarray]:
    out = {f"model/{k}": v for k, v in model.arrays().items()}
    if optimizer is not None:
        out.update({f"optim/{k}": v for k, v in optimizer.state_arrays().items()})
    return out


def save_training_checkpoint(path, result_or_model, optimizer, step: int, config: TrainConfig, config_hash: str = "", metrics=None):
    model = result_or_model.model if isinstance(result_or_model, TrainResult) else result_or_model
    meta = {
        "step": step,
        "train_config": _config_dict(config),
        "optimizer": optimizer.state_meta() if optimizer is not None else None,
        "metrics": metrics or [],
    }
    return save_checkpoint(path, checkpoint_tensors(model, optimizer), meta=meta, config_hash=config_hash)


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    if d.get("betas") is not None:
        d["betas"] = list(d["betas"])
    return d


def load_model(path) -> tuple[Model, dict]:
    tensors, header = load_checkpoint(path)
    cfg = TrainConfig(**header["meta"]["train_config"])
    model = init_model(cfg.seed, cfg.d_img, cfg.d_txt, cfg.d_proj, cfg.temperature_init)
    model.load_arrays({k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")})
    return model, header


def train(
    corpus: ShapesCorpus,
    config: TrainConfig,
    checkpoint_dir=None,
    resume_from=None,
    eval_hook: Callable[[int, Model], None] | None = None,
    config_hash: str = "",
    stop_at: int | None = None,
) -> TrainResult:
    """Run ``config.total_steps`` steps under the warmup + cosine schedule.

    ``resume_from`` continues from a checkpoint written by this function;
    ``stop_at`` halts early (used to produce mid-run checkpoints).
    """
    cfg = config.resolved()
    model = init_model(cfg.seed, cfg.d_img, cfg.d_txt, cfg.d_proj, cfg.temperature_init)
    optimizer = make_optimizer(model, cfg)
    start = 0
    metrics: list[dict] = []
    if resume_from is not None:
        tensors, header = load_checkpoint(resume_from)
        model.load_arrays({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
        optimizer.load_state({k[6:]: v for k, v in tensors.items() if k.startswith("optim/")}, header["meta"]["optimizer"])
        start = int(header["meta"]["step"])
        metrics = list(header["meta"].get("metrics", []))
    if cfg.batch_size > len(corpus):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds corpus size {len(corpus)}")
    schedule = LrSchedule(cfg.base_lr, min(cfg.warmup_steps, max(cfg.total_steps - 1, 0)), cfg.total_steps) if cfg.total_steps else None
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    seconds = []
    t0 = time.perf_counter()
    for step in range(start, end):
        batch = batch_at(corpus, cfg.batch_size, cfg.seed, step)
        lr = lr_at(schedule, step)
        loss = train_step(model, batch, cfg, optimizer, lr, step)
        metrics.append({"step": step, "loss": loss, "lr": lr})
        seconds.append(time.perf_counter() - t0)
        done = step + 1
        if eval_hook is not None and cfg.eval_every and done % cfg.eval_every == 0:
            eval_hook(done, model)
        if checkpoint_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_training_checkpoint(Path(checkpoint_dir) / f"step-{done:06d}.ckpt", model, optimizer, done, cfg, config_hash, metrics)
    final = max(end, start)
    if checkpoint_dir is not None:
        save_training_checkpoint(Path(checkpoint_dir) / "final.ckpt", model, optimizer, final, cfg, config_hash, metrics)
    return TrainResult(model, optimizer, metrics, final, seconds)
