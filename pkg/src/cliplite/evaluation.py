"""Retrieval, zero-shot prompting, linear probing and the MI benchmark."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import VOCAB, GaussianPairSpec, gen_gaussian_pairs
from .discriminator import cosine_align
from .estimators import LN2, ScoreSet, dv_bound, infonce_bound, jsd_bound
from .optim import Optimizer
from .params import ModelParams, init_tensor
from .rng import substream

ZERO_SHOT_TEMPLATES = ("a {}", "a picture of a {}", "a photo of a {}")


# --------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalReport:
    direction: str
    recalls: dict[int, float]
    n_queries: int

    def rows(self) -> list[tuple]:
        return [(self.direction, k, v, self.n_queries) for k, v in sorted(self.recalls.items())]


def true_match_ranks(align: np.ndarray) -> np.ndarray:
    """0-based rank of gallery item i for query i.

    Items scoring strictly higher rank ahead; equal scores rank ahead only
    when their gallery index is lower.
    """
    align = np.asarray(align, dtype=np.float64)
    q = align.shape[0]
    true = align[np.arange(q), np.arange(q)][:, None]
    higher = (align > true).sum(axis=1)
    cols = np.arange(align.shape[1])[None, :]
    ties_before = ((align == true) & (cols < np.arange(q)[:, None])).sum(axis=1)
    return higher + ties_before


def recall_at_k(align, ks=(1, 5, 10), direction: str = "image->text") -> RetrievalReport:
    align = np.asarray(align, dtype=np.float64)
    if align.ndim != 2 or align.shape[0] > align.shape[1]:
        raise ValueError("alignment matrix must be (queries, gallery) with queries <= gallery")
    for k in ks:
        if k > align.shape[1]:
            raise ValueError(f"k={k} exceeds gallery size {align.shape[1]}")
    ranks = true_match_ranks(align)
    return RetrievalReport(direction, {int(k): float((ranks < k).mean()) for k in ks}, align.shape[0])


def retrieval_reports(model, images, tokens, ks=(1, 5, 10)) -> list[RetrievalReport]:
    z_img, _ = model.embed_images(images)
    z_txt = model.embed_text(tokens)
    A = cosine_align(z_img, z_txt)
    return [recall_at_k(A, ks, "image->text"), recall_at_k(A.T, ks, "text->image")]


def mean_r1(reports: list[RetrievalReport]) -> float:
    return float(np.mean([r.recalls[1] for r in reports]))


def retrieval_csv(reports: list[RetrievalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["direction", "k", "recall", "n_queries"])
    for r in reports:
        for direction, k, v, n in r.rows():
            w.writerow([direction, k, repr(v), n])
    return buf.getvalue()


# --------------------------------------------------------------------------
# zero-shot


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def class_prompt_embeddings(model, class_names, template: str) -> np.ndarray:
    seqs = [VOCAB.tokenize(template.format(name)) for name in class_names]
    return model.embed_text(seqs).data


def zero_shot_classify(image_embeddings, class_names, template: str, model) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class index and softmax(cosine) probabilities per image.

    ``image_embeddings`` live in the shared projection space.
    """
    prompts = class_prompt_embeddings(model, class_names, template)
    probs = softmax(cosine_align(image_embeddings, prompts), axis=1)
    return probs.argmax(axis=1), probs


# --------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeConfig:
    lr: float = 0.5
    max_iter: int = 3000
    tol: float = 1e-6
    l2: float = 1e-4


def linear_probe(train_x, train_y, test_x, test_y, config: ProbeConfig = ProbeConfig()) -> float:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized with training statistics. Returns top-1
    accuracy on the test split.
    """
    train_x, test_x = np.asarray(train_x, float), np.asarray(test_x, float)
    train_y, test_y = np.asarray(train_y, int), np.asarray(test_y, int)
    classes = np.unique(train_y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes")
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    X = (train_x - mu) / sd
    Xt = (test_x - mu) / sd
    n, d = X.shape
    c = int(max(train_y.max(), test_y.max())) + 1
    Y = np.eye(c)[train_y]
    W = np.zeros((d, c))
    b = np.zeros(c)
    for _ in range(config.max_iter):
        P = softmax(X @ W + b)
        G = P - Y
        gW = X.T @ G / n + config.l2 * W
        gb = G.mean(axis=0)
        W -= config.lr * gW
        b -= config.lr * gb
        if max(np.abs(gW).max(), np.abs(gb).max()) < config.tol:
            break
    pred = (Xt @ W + b).argmax(axis=1)
    return float((pred == test_y).mean())


# --------------------------------------------------------------------------
# MI benchmark on Gaussian pairs


def init_critic(seed: int, d: int, hidden: int = 64) -> ModelParams:
    """Concatenated critic T(y, z) = w2 . relu(W1 [y; z] + b1) + b2."""
    return ModelParams(
        w1=init_tensor(seed, "critic/w1", (2 * d, hidden), "kaiming-uniform", fan_in=2 * d),
        b1=init_tensor(seed, "critic/b1", (hidden,), "zeros"),
        w2=init_tensor(seed, "critic/w2", (hidden, 1), "xavier-uniform", fan_in=hidden, fan_out=1),
        b2=init_tensor(seed, "critic/b2", (1,), "zeros"),
    )


def critic(p: ModelParams, pairs: np.ndarray) -> Tensor:
    h = ad.relu(ad.linear(Tensor._from_op(pairs), p["w1"], p["b1"]))
    return ad.reshape(ad.linear(h, p["w2"], p["b2"]), (pairs.shape[0],))


def all_pair_inputs(y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Rows [y_i; z_j] in row-major (i, j) order."""
    n, m = y.shape[0], z.shape[0]
    return np.concatenate([np.repeat(y, m, axis=0), np.tile(z, (n, 1))], axis=1)


def critic_matrix(p: ModelParams, y: np.ndarray, z: np.ndarray) -> Tensor:
    return ad.reshape(critic(p, all_pair_inputs(y, z)), (y.shape[0], z.shape[0]))


def _critic_bound(kind: str, p: ModelParams, y: np.ndarray, z: np.ndarray):
    n = y.shape[0]
    if kind == "infonce":
        return infonce_bound(critic_matrix(p, y, z))
    if kind == "jsd":
        neg_z = z[(np.arange(n) + 1) % n]
        pos = critic(p, np.concatenate([y, z], axis=1))
        neg = critic(p, np.concatenate([y, neg_z], axis=1))
        return jsd_bound(ScoreSet(pos, neg))
    if kind == "dv":
        M = critic_matrix(p, y, z)
        off = ~np.eye(n, dtype=bool)
        pos = ad.reduce("sum", M * np.eye(n), axes=1)
        neg = ad.gather_rows(ad.reshape(M, (n * n, 1)), np.flatnonzero(off.reshape(-1)))
        return dv_bound(ScoreSet(pos, neg))
    raise ValueError(f"unknown estimator {kind!r}")


@dataclass
class CriticBudget:
    steps: int = 1500
    lr: float = 2e-3
    hidden: int = 64
    n_train: int = 20000
    n_eval: int = 8192
    eval_block: int = 256


def train_critic(kind: str, d: int, rho: float, batch_size: int, seed: int, budget: CriticBudget = CriticBudget()) -> ModelParams:
    data = gen_gaussian_pairs(GaussianPairSpec(d, rho, budget.n_train, seed), stream="mi/train")
    p = init_critic(seed, d, budget.hidden)
    opt = Optimizer(dict(p), kind="adamw", weight_decay=0.0)
    rng = substream(seed, "mi/minibatch")
    last = math.nan
    for _ in range(budget.steps):
        idx = rng.choice(budget.n_train, batch_size, replace=False)
        opt.zero_grad()
        with Tape() as tape:
            loss = ad.negate(_critic_bound(kind, p, data.y[idx], data.z[idx]).value)
        last = loss.item()
        tape.backward(loss)
        opt.step(budget.lr)
    if not math.isfinite(last):
        raise RuntimeError("critic training ended without a finite loss")
    return p


def heldout_estimate(kind: str, p: ModelParams, d: int, rho: float, batch_size: int, seed: int, budget: CriticBudget = CriticBudget()) -> float:
    """Estimate on fresh samples: nats for dv/infonce, JSD scale for jsd.

    InfoNCE is averaged over blocks of ``batch_size`` so its log-K ceiling is
    the training one; DV pools every off-diagonal pair inside each eval block.
    """
    data = gen_gaussian_pairs(GaussianPairSpec(d, rho, budget.n_eval, seed), stream="mi/eval")
    y, z = data.y, data.z
    if kind == "infonce":
        vals = [float(infonce_bound(critic_matrix(p, y[i : i + batch_size], z[i : i + batch_size])))
                for i in range(0, len(y) - batch_size + 1, batch_size)]
        return float(np.mean(vals))
    if kind == "jsd":
        n = len(y)
        pos = critic(p, np.concatenate([y, z], axis=1))
        neg = critic(p, np.concatenate([y, z[(np.arange(n) + 1) % n]], axis=1))
        return float(jsd_bound(ScoreSet(pos, neg))) + 2 * LN2
    B = budget.eval_block
    pos_all, neg_lse, neg_count = [], [], 0
    for i in range(0, len(y) - B + 1, B):
        M = critic_matrix(p, y[i : i + B], z[i : i + B]).data
        off = M[~np.eye(B, dtype=bool)]
        pos_all.append(np.diag(M))
        m = off.max()
        neg_lse.append(m + math.log(np.exp(off - m).sum()))
        neg_count += off.size
    lse = np.logaddexp.reduce(np.array(neg_lse))
    return float(np.concatenate(pos_all).mean() - lse + math.log(neg_count))


@dataclass
class MiBenchRow:
    estimator: str
    batch_size: int
    rho: float
    d: int
    estimates: list[float]
    truth: float
    unit: str

    @property
    def mean(self) -> float:
        return float(np.mean(self.estimates))

    @property
    def std(self) -> float:
        return float(np.std(self.estimates))

    @property
    def bias(self) -> float:
        return self.mean - self.truth


@dataclass
class MiBenchReport:
    rows: list[MiBenchRow] = field(default_factory=list)

    def cell(self, estimator: str, batch_size: int, rho: float, d: int | None = None) -> MiBenchRow:
        for r in self.rows:
            if (r.estimator, r.batch_size, r.rho) == (estimator, batch_size, rho) and (d is None or r.d == d):
                return r
        raise KeyError((estimator, batch_size, rho, d))

    def jsd_monotone(self) -> bool:
        """jsd means are non-decreasing in rho for every (batch, d)."""
        ok = True
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r.estimator, r.batch_size, r.d), []).append(r)
        for (est, _, _), rows in groups.items():
            means = [r.mean for r in sorted(rows, key=lambda r: abs(r.rho))]
            if est == "jsd":
                ok &= all(b >= a for a, b in zip(means, means[1:]))
        return ok

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "batch_size", "rho", "d", "seed_index", "estimate", "truth", "unit"])
        for r in self.rows:
            for i, e in enumerate(r.estimates):
                w.writerow([r.estimator, r.batch_size, repr(r.rho), r.d, i, repr(e), repr(r.truth), r.unit])
        return buf.getvalue()


def mi_benchmark(estimators, batch_sizes, rhos, seeds, d: int = 1, budget: CriticBudget = CriticBudget()) -> MiBenchReport:
    from .data import gaussian_mi

    report = MiBenchReport()
    for est in estimators:
        for bs in batch_sizes:
            for rho in rhos:
                vals = []
                for seed in seeds:
                    p = train_critic(est, d, rho, bs, seed, budget)
                    vals.append(heldout_estimate(est, p, d, rho, bs, seed, budget))
                unit = "jsd-scale" if est == "jsd" else "nats"
                report.rows.append(MiBenchRow(est, bs, float(rho), d, vals, gaussian_mi(d, rho), unit))
    return report
