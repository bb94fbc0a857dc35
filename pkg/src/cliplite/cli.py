"""Command-line entry point: ``cliplite <command> [--config F] [--seed N] [--out D] [--set k=v ...]``.

Every run resolves one ExperimentConfig and writes into
``<out>/<command>-<hash>-seed<seed>/``, where the hash covers the full config.
The ``config.json`` snapshot in that directory reproduces the run when passed
back through ``--config``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COMMANDS = ("gen-data", "train", "eval-retrieval", "eval-zeroshot", "eval-probe", "mi-bench", "edit-concept", "ground", "gradcheck")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n: int = 4096
    noise: float = 0.02
    test_fraction: float = 0.1
    split: str = "heldout"  # or "unseen-combination"
    path: str = ""  # directory written by gen-data; empty regenerates from the seed


@dataclass
class TrainSection:
    objective: str = "jsd_single_neg"
    batch_size: int = 64
    total_steps: int = 3000
    warmup_steps: int = 100
    optimizer: str | None = None
    base_lr: float | None = None
    weight_decay: float | None = None
    lookahead_alpha: float | None = None
    lookahead_k: int = 5
    checkpoint_every: int = 0
    resume: str = ""


@dataclass
class EvalSection:
    ks: list = field(default_factory=lambda: [1, 5, 10])
    probe_label: str = "shape"


@dataclass
class MiSection:
    estimators: list = field(default_factory=lambda: ["jsd", "infonce", "dv"])
    batch_sizes: list = field(default_factory=lambda: [8, 64])
    rhos: list = field(default_factory=lambda: [0.0, 0.5, 0.8])
    seeds: int = 3
    d: int = 1
    steps: int = 1500
    lr: float = 2e-3


@dataclass
class EditSection:
    k: int = 1
    top_n: int = 10
    normalize: bool = True


@dataclass
class GroundSection:
    n_images: int = 500
    upsample: str = "nearest"
    mass_fraction: float = 0.5
    dump: int = 8


@dataclass
class GradcheckSection:
    eps: float = 1e-5
    tol: float = 1e-4


@dataclass
class ExperimentConfig:
    seed: int = 0
    checkpoint: str = ""
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    mi: MiSection = field(default_factory=MiSection)
    edit: EditSection = field(default_factory=EditSection)
    ground: GroundSection = field(default_factory=GroundSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    def digest(self, command: str) -> str:
        blob = json.dumps({"command": command, **self.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key {where}{unknown[0]!r}")
    kwargs = {}
    for name, value in d.items():
        sub = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(raw)


def resolve_config(config_path: str | None, seed: int | None, overrides: list[str], command: str | None = None) -> ExperimentConfig:
    base = ExperimentConfig().to_dict()
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        # run snapshots carry the command they were written by
        snap_cmd = loaded.pop("command", None) if isinstance(loaded, dict) else None
        if snap_cmd is not None and command is not None and snap_cmd != command:
            raise ConfigError(f"config snapshot was written by {snap_cmd!r}, not {command!r}")
        base = ExperimentConfig.from_dict(loaded).to_dict()
    for o in overrides:
        apply_override(base, o)
    if seed is not None:
        base["seed"] = seed
    return ExperimentConfig.from_dict(base)


def prepare_run_dir(out: str, command: str, cfg: ExperimentConfig, force: bool) -> Path:
    run = Path(out) / f"{command}-{cfg.digest(command)}-seed{cfg.seed}"
    if run.exists() and any(run.iterdir()) and not force:
        raise FileExistsError(f"output directory {run} already exists (use --force to overwrite)")
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps({"command": command, **cfg.to_dict()}, indent=2, sort_keys=True) + "\n")
    return run


# --------------------------------------------------------------------------
# commands


def _corpus(cfg: ExperimentConfig):
    from .data import ShapesCorpusSpec, gen_captioned_shapes, heldout_split, load_corpus, unseen_combination_split

    corpus = load_corpus(cfg.data.path) if cfg.data.path else gen_captioned_shapes(ShapesCorpusSpec(cfg.data.n, cfg.seed, cfg.data.noise))
    if cfg.data.split == "heldout":
        tr, te = heldout_split(len(corpus), cfg.seed, cfg.data.test_fraction)
    elif cfg.data.split == "unseen-combination":
        tr, te = unseen_combination_split(corpus)
    else:
        raise ConfigError(f"unknown split {cfg.data.split!r}")
    return corpus.subset(tr), corpus.subset(te)


def _train_config(cfg: ExperimentConfig):
    from .training import TrainConfig

    t = cfg.train
    return TrainConfig(
        objective=t.objective, batch_size=t.batch_size, total_steps=t.total_steps, seed=cfg.seed,
        optimizer=t.optimizer, base_lr=t.base_lr, warmup_steps=t.warmup_steps, weight_decay=t.weight_decay,
        lookahead_alpha=t.lookahead_alpha, lookahead_k=t.lookahead_k, checkpoint_every=t.checkpoint_every,
    )


def _model(cfg: ExperimentConfig):
    from .training import load_model

    if not cfg.checkpoint:
        raise ConfigError("this command needs a checkpoint (--checkpoint PATH or --set checkpoint=PATH)")
    if not Path(cfg.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint {cfg.checkpoint} does not exist")
    return load_model(cfg.checkpoint)[0]


def cmd_gen_data(cfg, run: Path) -> str:
    from .data import ShapesCorpusSpec, export_corpus, gen_captioned_shapes

    corpus = gen_captioned_shapes(ShapesCorpusSpec(cfg.data.n, cfg.seed, cfg.data.noise))
    export_corpus(corpus, run / "corpus")
    return f"wrote {len(corpus)} images to {run / 'corpus'}"


def cmd_train(cfg, run: Path) -> str:
    from .training import metrics_csv, timing_csv, train

    train_set, _ = _corpus(cfg)
    result = train(
        train_set, _train_config(cfg), checkpoint_dir=run / "checkpoints",
        resume_from=cfg.train.resume or None, config_hash=cfg.digest("train"),
    )
    (run / "metrics.csv").write_text(metrics_csv(result.metrics))
    (run / "timing.csv").write_text(timing_csv(result.metrics[-len(result.seconds):] if result.seconds else [], result.seconds))
    last = result.metrics[-1]["loss"] if result.metrics else float("nan")
    return f"trained {result.step} steps, final loss {last:.4f}, checkpoint {run / 'checkpoints' / 'final.ckpt'}"


def cmd_eval_retrieval(cfg, run: Path) -> str:
    from .evaluation import retrieval_csv, retrieval_reports

    _, test = _corpus(cfg)
    reports = retrieval_reports(_model(cfg), test.images, test.tokens, tuple(cfg.eval.ks))
    (run / "retrieval.csv").write_text(retrieval_csv(reports))
    return "  ".join(f"{r.direction} R@1={r.recalls[min(r.recalls)]:.3f}" for r in reports)


def cmd_eval_zeroshot(cfg, run: Path) -> str:
    from .data import SHAPES
    from .evaluation import ZERO_SHOT_TEMPLATES, zero_shot_classify

    _, test = _corpus(cfg)
    model = _model(cfg)
    z = model.embed_images(test.images)[0].data
    lines = ["template,accuracy,n_images"]
    accs = []
    for tpl in ZERO_SHOT_TEMPLATES:
        pred, _ = zero_shot_classify(z, SHAPES, tpl, model)
        acc = float((pred == test.labels["shape"]).mean())
        accs.append(acc)
        lines.append(f"{tpl.format('{class}')},{acc!r},{len(test)}")
    (run / "zeroshot.csv").write_text("\n".join(lines) + "\n")
    return "zero-shot accuracy " + " / ".join(f"{a:.3f}" for a in accs)


def cmd_eval_probe(cfg, run: Path) -> str:
    from .encoders import encode_image
    from .evaluation import linear_probe
    from .training import init_model

    train_set, test = _corpus(cfg)
    label = cfg.eval.probe_label
    if label not in train_set.labels:
        raise ConfigError(f"unknown probe label {label!r}")
    rows = ["encoder,label,accuracy"]
    out = {}
    for name, model in (("trained", _model(cfg)), ("random-init", init_model(cfg.seed))):
        f = lambda c: encode_image(model.image, c.images)[0].data
        out[name] = linear_probe(f(train_set), train_set.labels[label], f(test), test.labels[label])
        rows.append(f"{name},{label},{out[name]!r}")
    (run / "probe.csv").write_text("\n".join(rows) + "\n")
    return f"probe[{label}] trained {out['trained']:.3f} vs random-init {out['random-init']:.3f}"


def cmd_mi_bench(cfg, run: Path) -> str:
    from .evaluation import CriticBudget, mi_benchmark

    m = cfg.mi
    budget = CriticBudget(steps=m.steps, lr=m.lr)
    seeds = [cfg.seed + i for i in range(m.seeds)]
    report = mi_benchmark(m.estimators, m.batch_sizes, m.rhos, seeds, d=m.d, budget=budget)
    (run / "mi_bench.csv").write_text(report.csv())
    return f"{len(report.rows)} cells; jsd monotone in rho: {report.jsd_monotone()}"


def cmd_edit_concept(cfg, run: Path) -> str:
    from .concept import equalization_csv, texture_edit

    _, test = _corpus(cfg)
    result = texture_edit(_model(cfg), test, cfg.edit.k, cfg.edit.top_n, cfg.edit.normalize)
    (run / "equalization.csv").write_text(equalization_csv(result.rows))
    lines = ["component,explained_variance"] + [f"{j},{e!r}" for j, e in enumerate(result.basis.explained)]
    (run / "subspace.csv").write_text("\n".join(lines) + "\n")
    before, after = result.gaps("before"), result.gaps("after")
    shrunk = sum(after[p] < before[p] for p in before)
    return (
        f"k={result.basis.k} explained={result.basis.explained.round(3).tolist()} max residual {result.residual:.1e}; "
        f"gaps shrunk on {shrunk}/{len(before)} prompts; attribute-free shift {result.attribute_free_shift():.3f}"
    )


def cmd_ground(cfg, run: Path) -> str:
    from .grounding import box_from_saliency, chance_rate, grad_cam, grid_csv, pointing_hits, write_pgm

    _, test = _corpus(cfg)
    model = _model(cfg)
    n = min(cfg.ground.n_images, len(test))
    maps = [grad_cam(model, test.images[i], test.captions[i], i, cfg.ground.upsample) for i in range(n)]
    hits = pointing_hits(maps, test.labels["row"][:n], test.labels["col"][:n])
    lines = ["image_id,phrase,hit,box_r0,box_c0,box_r1,box_c1,zero_gradient"]
    dump = run / "saliency"
    dump.mkdir(exist_ok=True)
    for i, (m, h) in enumerate(zip(maps, hits)):
        box = box_from_saliency(m, cfg.ground.mass_fraction) if m.upsampled.sum() > 0 else (-1, -1, -1, -1)
        lines.append(f"{i},{m.phrase},{int(h)},{box[0]},{box[1]},{box[2]},{box[3]},{int(m.zero_gradient)}")
        if i < cfg.ground.dump:
            write_pgm(dump / f"{i:04d}.pgm", m)
            (dump / f"{i:04d}.csv").write_text(grid_csv(m))
    (run / "pointing.csv").write_text("\n".join(lines) + "\n")
    return f"pointing accuracy {hits.mean():.3f} over {n} images (chance {chance_rate():.3f})"


def cmd_gradcheck(cfg, run: Path) -> str:
    from .gradcheck_suite import run_suite, suite_csv

    results = run_suite(cfg.seed, cfg.gradcheck.eps, cfg.gradcheck.tol)
    (run / "gradcheck.csv").write_text(suite_csv(results))
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"  {r.name:<{width}}  max rel err {r.max_rel_err:.2e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"gradient check failed for {', '.join(failed)}")
    return f"all {len(results)} cases below {cfg.gradcheck.tol:g}"


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-zeroshot": cmd_eval_zeroshot,
    "eval-probe": cmd_eval_probe,
    "mi-bench": cmd_mi_bench,
    "edit-concept": cmd_edit_concept,
    "ground": cmd_ground,
    "gradcheck": cmd_gradcheck,
}

# Concrete substreams of the root seed used by each command; the templated
# families are listed after them when the command draws from them.
SUBSTREAMS = {
    "gen-data": (["data/shapes"], []),
    "train": (["data/shapes", "data/split", "train/epoch/0"], ["init/<parameter name>", "train/epoch/<epoch>"]),
    "mi-bench": (["mi/train", "mi/eval", "mi/minibatch"], ["init/critic/<w1|b1|w2|b2>"]),
    "gradcheck": ([], ["gradcheck/<case name>"]),
}


def seed_report(command: str, seed: int) -> list[str]:
    from .rng import describe

    names, families = SUBSTREAMS.get(command, (["data/shapes", "data/split"], []))
    lines = describe(seed, names)
    for fam in families:
        lines.append(f"  substream family {fam!r}: key = sha256('{seed}/{fam}')[:16] per member")
    if command == "train":
        lines.append("  batch order: 'train/shuffle' keyed by the epoch seed drawn from 'train/epoch/<epoch>'")
    return lines


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cliplite", description="Image-caption contrastive learning experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON experiment config (e.g. a config.json snapshot)")
    parser.add_argument("--seed", type=int, help="root seed; overrides the config")
    parser.add_argument("--out", default="runs", help="parent directory for run outputs")
    parser.add_argument("--force", action="store_true", help="reuse an existing output directory")
    parser.add_argument("--checkpoint", help="checkpoint for evaluation commands")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set train.batch_size=8")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.checkpoint:
            overrides.append(f"checkpoint={json.dumps(args.checkpoint)}")
        cfg = resolve_config(args.config, args.seed, overrides, args.command)
        for line in seed_report(args.command, cfg.seed):
            print(line)
        run = prepare_run_dir(args.out, args.command, cfg, args.force)
        summary = HANDLERS[args.command](cfg, run)
    except Exception as err:  # one-line diagnostic, nonzero exit
        print(f"cliplite {args.command}: error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    print(summary)
    print(f"artifacts: {run}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
