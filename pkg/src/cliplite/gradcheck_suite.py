"""Finite-difference checks for every primitive and for whole training losses.

Each case builds a scalar loss from freshly drawn parameters; ``run_suite``
reports the worst per-tensor relative error of each case. The composition
cases run the real encoders, projection heads and objectives at reduced
widths so the central-difference sweep stays fast.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, check_gradients
from .data import ShapesCorpusSpec, gen_captioned_shapes
from .rng import substream
from .training import batch_at, init_model, objective_loss


def _p(rng, *shape, low=-1.5, high=1.5):
    return Tensor.param(rng.uniform(low, high, shape))


def _away_from_zero(rng, *shape):
    """Values with |x| >= 0.2 so relu's kink is never within eps."""
    x = rng.uniform(0.2, 1.5, shape)
    return Tensor.param(x * rng.choice([-1.0, 1.0], shape))


def _elementwise(op):
    def build(rng):
        a = _away_from_zero(rng, 3, 4)
        b = _p(rng, 3, 4, low=0.5, high=2.0) if op in ("mul", "add", "sub") else None
        if op == "log":
            a = _p(rng, 3, 4, low=0.3, high=3.0)
        if op == "scale":
            return (lambda: ad.reduce("sum", ad.softplus(ad.scale(a, -1.7)))), {"a": a}
        if b is not None:
            return (lambda: ad.reduce("sum", ad.softplus(ad.elementwise(op, a, b)))), {"a": a, "b": b}
        return (lambda: ad.reduce("sum", ad.softplus(ad.elementwise(op, a)))), {"a": a}

    return build


def _matmul(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4, 2)
    return (lambda: ad.reduce("sum", ad.softplus(ad.matmul(a, b)))), {"a": a, "b": b}


def _linear(rng):
    x, W, b = _p(rng, 3, 4), _p(rng, 4, 2), _p(rng, 2)
    return (lambda: ad.reduce("sum", ad.softplus(ad.linear(x, W, b)))), {"x": x, "W": W, "b": b}


def _transpose(rng):
    a, w = _p(rng, 3, 4), rng.uniform(-1, 1, (4, 3))
    return (lambda: ad.reduce("sum", ad.softplus(ad.transpose(a) * w))), {"a": a}


def _reshape(rng):
    a, w = _p(rng, 3, 4), rng.uniform(-1, 1, (2, 6))
    return (lambda: ad.reduce("sum", ad.softplus(ad.reshape(a, (2, 6)) * w))), {"a": a}


def _gather(rng):
    t = _p(rng, 5, 3)
    idx = np.array([4, 0, 0, 2])
    w = rng.uniform(-1, 1, (4, 3))
    return (lambda: ad.reduce("sum", ad.softplus(ad.gather_rows(t, idx) * w))), {"table": t}


def _normalize(rng):
    a, w = _p(rng, 3, 4), rng.uniform(-1, 1, (3, 4))
    return (lambda: ad.reduce("sum", ad.normalize_rows(a) * w)), {"a": a}


def _conv(stride, pad):
    def build(rng):
        x, K, b = _p(rng, 2, 2, 5, 5), _p(rng, 3, 2, 3, 3), _p(rng, 3)
        return (lambda: ad.reduce("sum", ad.softplus(ad.conv2d(x, K, stride, pad, b)))), {"x": x, "K": K, "bias": b}

    return build


def _reduction(op, axes):
    def build(rng):
        x = _p(rng, 2, 3, 2, 2)
        w = rng.uniform(-1, 1, ad.reduce(op, x.detach(), axes).shape)
        return (lambda: ad.reduce("sum", ad.reduce(op, x, axes) * w)), {"x": x}

    return build


_TINY_CORPUS = None


def _composition(objective):
    def build(rng):
        global _TINY_CORPUS
        if _TINY_CORPUS is None:
            _TINY_CORPUS = gen_captioned_shapes(ShapesCorpusSpec(n=16, seed=0))
        model = init_model(int(rng.integers(0, 2**31)), d_img=4, d_txt=4, d_proj=4)
        params = model.named_params(objective)
        for name, t in params.items():
            if name.endswith("_b"):
                # zero biases would put every relu of a constant input exactly at its kink
                t.data[...] = rng.uniform(-0.1, 0.1, t.shape)
        batch = batch_at(_TINY_CORPUS, 3, 0, 0)
        return (lambda: objective_loss(model, batch, objective)[0]), params

    return build


CASES: dict[str, Callable] = {
    **{f"elementwise/{op}": _elementwise(op) for op in ("add", "sub", "mul", "scale", "negate", "relu", "softplus", "exp", "log")},
    "matmul": _matmul,
    "linear": _linear,
    "transpose": _transpose,
    "reshape": _reshape,
    "gather_rows": _gather,
    "normalize_rows": _normalize,
    "conv2d/s1p0": _conv(1, 0),
    "conv2d/s2p1": _conv(2, 1),
    "reduce/sum": _reduction("sum", (1, 3)),
    "reduce/mean": _reduction("mean", None),
    "reduce/global_avg_pool": _reduction("global_avg_pool", None),
    "reduce/log_sum_exp": _reduction("log_sum_exp", 1),
    "model/jsd_single_neg": _composition("jsd_single_neg"),
    "model/infonce_all_pairs": _composition("infonce_all_pairs"),
    "model/dv_single_neg": _composition("dv_single_neg"),
}


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    worst_param: str
    passed: bool
    seconds: float
    coords: int = 0
    skipped: int = 0


def run_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4, only=None) -> list[CaseResult]:
    results = []
    for name, build in CASES.items():
        if only is not None and name not in only:
            continue
        t0 = time.perf_counter()
        forward, params = build(substream(seed, f"gradcheck/{name}"))
        report = check_gradients(forward, params, eps=eps, tol=tol)
        worst = max(report.errors, key=report.errors.get)
        coords = sum(p.size for p in params.values())
        results.append(
            CaseResult(name, report.max_error, worst, report.passed, time.perf_counter() - t0, coords, sum(report.skipped.values()))
        )
    return results


def suite_csv(results: list[CaseResult]) -> str:
    lines = ["case,max_rel_err,worst_param,passed,coords,skipped_at_kinks"]
    for r in results:
        lines.append(f"{r.name},{r.max_rel_err!r},{r.worst_param},{int(r.passed)},{r.coords},{r.skipped}")
    return "\n".join(lines) + "\n"
