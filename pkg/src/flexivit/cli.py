"""Command-line entry point: ``flexivit {train,distill,resize-verify,analyze,gen-data}``.

Experiments are described by a flat ``key = value`` file (UTF-8, ``#``
comments). Every key has a default, unknown keys are rejected, and the parsed
configuration is echoed to ``config.txt`` in the output directory in a form
that reparses to the same values.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
import typing
from pathlib import Path

import numpy as np
import torch

from . import analyze
from .data import NUM_CLASSES, FormatError, ShapeDataset, gen_shapes, load_dataset, save_dataset
from .embedding import TilingError
from .encoder import EncoderConfig, FlexiViT, init_params, load_checkpoint, materialize, save_checkpoint
from .linmaps import bilinear_matrix, heuristic_resize, resize_map
from .train import (
    Curriculum,
    NumericalError,
    PatchSizeDistribution,
    TrainConfig,
    predict_logits,
    teacher_init,
    train_flexi,
)

log = logging.getLogger("flexivit")

EXIT_OK, EXIT_INVALID, EXIT_NAN = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """All experiment keys with their defaults.

    Sizes are comma-separated integer lists. An empty ``patch_weights`` means
    uniform sampling; an empty ``curriculum_sizes`` disables the curriculum;
    a non-empty ``depth_choices`` samples a block count per step.
    ``warmup_steps`` is clamped to ``steps``. ``train_data`` and ``eval_data``
    name FXT datasets; when empty, ``n_train + n_eval`` images are generated
    from ``seed`` and split in order.
    """

    seed: int = 0
    out_dir: str = "out"
    # model
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    underlying_patch: int = 32
    underlying_grid: int = 7
    channels: int = 1
    dtype: str = "float64"
    # data
    image_side: int = 48
    n_train: int = 20000
    n_eval: int = 500
    value_lo: float = -1.0
    value_hi: float = 1.0
    train_data: str = ""
    eval_data: str = ""
    # training
    steps: int = 2000
    batch_size: int = 64
    lr: float = 3e-3
    warmup_steps: int = 100
    cosine: bool = True
    grad_clip: float = 1.0
    resize_method: str = "pi"
    patch_sizes: tuple[int, ...] = (24, 16, 12, 8, 6)
    patch_weights: tuple[float, ...] = ()
    curriculum_sizes: tuple[int, ...] = ()
    curriculum_schedule: float = 0.75
    curriculum_ramp: float = 0.0
    eval_sizes: tuple[int, ...] = (24, 16, 12, 8, 6)
    eval_every: int = 0
    depth_choices: tuple[int, ...] = ()
    # distillation
    temperature: float = 1.0
    teacher_patch: int = 6
    teacher_init: bool = True
    # analysis
    analyze_sizes: tuple[int, ...] = (12, 8)
    analyze_n: int = 256

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.patch_weights and len(self.patch_weights) != len(self.patch_sizes):
            raise ConfigError("patch_weights must be empty or match patch_sizes in length")
        if not self.patch_sizes:
            raise ConfigError("patch_sizes must not be empty")
        if min(self.n_train, self.n_eval, self.analyze_n) < 1:
            raise ConfigError("n_train, n_eval and analyze_n must be positive")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self.dtype == "float32" else torch.float64

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            depth=self.depth,
            width=self.width,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            num_classes=NUM_CLASSES,
            channels=self.channels,
            underlying_patch=self.underlying_patch,
            underlying_grid=self.underlying_grid,
        )

    def training(self, loss: str = "xent") -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            warmup_steps=min(self.warmup_steps, self.steps),
            cosine=self.cosine,
            loss=loss,
            temperature=self.temperature,
            seed=self.seed,
            image_side=self.image_side,
            eval_sizes=self.eval_sizes,
            eval_every=self.eval_every,
            grad_clip=self.grad_clip,
            resize_method=self.resize_method,
            teacher_patch=self.teacher_patch,
            depth_choices=self.depth_choices,
        )

    def schedule(self) -> PatchSizeDistribution | Curriculum:
        target = (
            PatchSizeDistribution(self.patch_sizes, self.patch_weights)
            if self.patch_weights
            else PatchSizeDistribution.uniform(self.patch_sizes)
        )
        if not self.curriculum_sizes:
            return target
        large = PatchSizeDistribution.uniform(self.curriculum_sizes)
        return Curriculum(large, target, self.curriculum_schedule, self.curriculum_ramp, self.steps)


_HINTS = typing.get_type_hints(ExperimentConfig)


def _parse_value(key: str, text: str):
    hint = _HINTS[key]
    try:
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if hint in (int, float, str):
            return hint(text)
        item = typing.get_args(hint)[0]
        return tuple(item(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg))


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(Path(args.config).read_text(encoding="utf-8")) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if args.sizes is not None:
        sizes = _parse_value("patch_sizes", args.sizes)
        key = "analyze_sizes" if args.command == "analyze" else "patch_sizes"
        overrides[key] = sizes
        if key == "patch_sizes":
            overrides["patch_weights"] = ()
    return dataclasses.replace(cfg, **overrides)


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    return out


def _datasets(cfg: ExperimentConfig) -> tuple[ShapeDataset, ShapeDataset]:
    if cfg.train_data:
        train = load_dataset(cfg.train_data)
    else:
        full = gen_shapes(cfg.seed, cfg.n_train + cfg.n_eval, cfg.image_side, cfg.channels)
        train = full.subset(slice(0, cfg.n_train))
    if cfg.eval_data:
        held = load_dataset(cfg.eval_data)
    elif cfg.train_data:
        held = gen_shapes(cfg.seed, cfg.n_eval, cfg.image_side, cfg.channels)
    else:
        held = full.subset(slice(cfg.n_train, None))
    return train.value_range(cfg.value_lo, cfg.value_hi), held.value_range(cfg.value_lo, cfg.value_hi)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _predictions(model: FlexiViT, data: ShapeDataset, p: int) -> np.ndarray:
    return predict_logits(model, data, p).argmax(-1)


def cmd_train(cfg: ExperimentConfig) -> int:
    train, held = _datasets(cfg)
    out = _prepare_out(cfg)
    model = init_params(cfg.encoder(), cfg.seed, cfg.torch_dtype)
    trained, metrics = train_flexi(cfg.training(), cfg.schedule(), train, model, eval_data=held)
    save_checkpoint(out / "checkpoint.fxt", trained)
    _write(out / "metrics.csv", metrics.steps_csv())
    _write(out / "evals.csv", metrics.evals_csv())
    _write(out / "sweep.csv", analyze.eval_sweep(trained, held, cfg.eval_sizes).to_csv())
    return EXIT_OK


def _agreement_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patch_size", "agreement"])
    for p, a in rows:
        w.writerow([p, repr(a)])
    return buf.getvalue()


def cmd_distill(cfg: ExperimentConfig, teacher_path: str) -> int:
    """Distil a flexible student from a checkpointed teacher run at ``teacher_patch``.

    With ``teacher_init`` the student starts from the teacher's weights; the
    teacher is first materialized at its patch size when its underlying kernel
    differs. Writes init and final agreement with the teacher per eval size.
    """
    teacher = load_checkpoint(teacher_path).to(cfg.torch_dtype)
    train, held = _datasets(cfg)
    student_cfg = cfg.encoder()
    if teacher.config.underlying_patch != cfg.teacher_patch:
        teacher = materialize(teacher, cfg.teacher_patch, cfg.image_side // cfg.teacher_patch)
    if cfg.teacher_init:
        student = teacher_init(teacher, cfg.underlying_patch, cfg.underlying_grid, student_cfg)
    else:
        if teacher.config.num_classes != student_cfg.num_classes:
            raise ConfigError("teacher/student num_classes mismatch")
        student = init_params(student_cfg, cfg.seed, cfg.torch_dtype)
    out = _prepare_out(cfg)
    teacher_preds = _predictions(teacher, held, cfg.teacher_patch)
    init_rows = [(p, analyze.agreement(_predictions(student, held, p), teacher_preds)) for p in cfg.eval_sizes]
    _write(out / "init_agreement.csv", _agreement_csv(init_rows))
    trained, metrics = train_flexi(cfg.training("distill"), cfg.schedule(), train, student, teacher, held)
    final_rows = [(p, analyze.agreement(_predictions(trained, held, p), teacher_preds)) for p in cfg.eval_sizes]
    save_checkpoint(out / "checkpoint.fxt", trained)
    _write(out / "final_agreement.csv", _agreement_csv(final_rows))
    _write(out / "metrics.csv", metrics.steps_csv())
    _write(out / "evals.csv", metrics.evals_csv())
    _write(out / "sweep.csv", analyze.eval_sweep(trained, held, cfg.eval_sizes).to_csv())
    return EXIT_OK


@dataclasses.dataclass
class VerifyReport:
    p_in: int
    p_out: int
    trials: int
    deviation: dict[str, float]  # max |<x,w> - <Bx,w_hat>| / (1 + |<x,w>|)
    lstsq_gap: float | None  # downsampling: relative gap between PI and oracle residuals

    @property
    def passed(self) -> bool:
        if self.p_out >= self.p_in:
            return self.deviation["pi"] < 1e-9
        return self.lstsq_gap is not None and self.lstsq_gap <= 1e-8

    def to_text(self) -> str:
        lines = [f"method,max_deviation  (p_in={self.p_in}, p_out={self.p_out}, trials={self.trials})"]
        lines += [f"{m},{d:.3e}" for m, d in self.deviation.items()]
        if self.lstsq_gap is not None:
            lines.append(f"pi_lstsq_residual_gap,{self.lstsq_gap:.3e}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines) + "\n"


def resize_verify(p_in: int, p_out: int, trials: int, seed: int = 0) -> VerifyReport:
    """Token-value preservation of each resize method over random (patch, kernel) pairs."""
    if min(p_in, p_out, trials) < 1:
        raise ConfigError("p_in, p_out and trials must be >= 1")
    rng = np.random.default_rng(seed)
    b = bilinear_matrix(p_in, p_out).weights
    x = rng.standard_normal((trials, p_in * p_in))
    w = rng.standard_normal((trials, p_in, p_in))
    ref = np.einsum("ti,ti->t", x, w.reshape(trials, -1))
    bx = x @ b.T
    deviation = {}
    for method in ("pi", "vanilla", "area", "norm"):
        if method == "pi":
            w_hat = resize_map(p_in, p_out, "pi").apply(w.transpose(1, 2, 0)).transpose(2, 0, 1)
        else:
            w_hat = np.stack([heuristic_resize(wi, p_out, method) for wi in w])
        got = np.einsum("ti,ti->t", bx, w_hat.reshape(trials, -1))
        deviation[method] = float(np.max(np.abs(ref - got) / (1 + np.abs(ref))))
    gap = None
    if p_out < p_in:
        pi = resize_map(p_in, p_out, "pi").weights
        wf = w.reshape(trials, -1).T
        res_pi = np.linalg.norm(b.T @ (pi @ wf) - wf, axis=0)
        oracle = np.linalg.lstsq(b.T, wf, rcond=None)[0]
        res_or = np.linalg.norm(b.T @ oracle - wf, axis=0)
        gap = float(np.max(np.abs(res_pi - res_or) / np.maximum(res_or, 1e-300)))
    return VerifyReport(p_in, p_out, trials, deviation, gap)


def cmd_analyze(cfg: ExperimentConfig, checkpoint: str, mode: str, dataset: str | None) -> int:
    model = load_checkpoint(checkpoint).to(cfg.torch_dtype)
    if dataset:
        data = load_dataset(dataset).value_range(cfg.value_lo, cfg.value_hi)
    else:
        data = _datasets(cfg)[1]
    out = _prepare_out(cfg)
    sizes = cfg.analyze_sizes
    if mode == "sweep":
        _write(out / "sweep.csv", analyze.eval_sweep(model, data, sizes).to_csv())
    elif mode == "ensemble":
        _write(out / "ensemble.csv", analyze.ensemble_report(model, data, sizes).to_csv())
    elif mode == "cka":
        images = data.images[: cfg.analyze_n]
        tags, feats = [], []
        for p in sizes:
            for b, pair in enumerate(analyze.block_features(model, images, p)):
                for sub, f in zip(analyze.SUBLAYERS, pair):
                    tags.append(f"p{p}.b{b}.{sub}")
                    feats.append((tags[-1], f[:, 0]))
        _write(out / "cka.csv", analyze.cka_csv(tags, analyze.cka_matrix(feats)))
    elif mode == "cosine":
        images = data.images[: cfg.analyze_n]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed_size", "target_size", "block", "sublayer", "hit", "zero_count"])
        for p in sizes:
            for q in sizes:
                for b in range(model.config.depth):
                    cos, zeros = analyze.token_cosine_map(model, images, b, "mlp", p, q)
                    np.savetxt(out / f"cosine_p{p}_q{q}_b{b}_mlp.csv", cos, delimiter=",", fmt="%.17g")
                    hit = analyze.correspondence_hit(cos, cfg.image_side // p)
                    w.writerow([p, q, b, "mlp", int(hit), zeros])
        _write(out / "cosine_hits.csv", buf.getvalue())
    else:
        raise ConfigError(f"unknown analyze mode {mode!r}")
    return EXIT_OK


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    out = _prepare_out(cfg)
    full = gen_shapes(cfg.seed, cfg.n_train + cfg.n_eval, cfg.image_side, cfg.channels)
    save_dataset(out / "train.fxt", full.subset(slice(0, cfg.n_train)))
    save_dataset(out / "eval.fxt", full.subset(slice(cfg.n_train, None)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexivit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps=True):
        p.add_argument("--config", help="key = value experiment file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if steps:
            p.add_argument("--steps", type=int, help="override the step count")
        p.add_argument("--sizes", help="comma-separated patch sizes")
        return p

    common(sub.add_parser("train", help="train a flexible (or fixed) model"))
    d = common(sub.add_parser("distill", help="distil a flexible student from a teacher"))
    d.add_argument("--teacher", required=True, help="teacher checkpoint")
    a = common(sub.add_parser("analyze", help="analyse a checkpoint"), steps=False)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--mode", required=True, help="cka, cosine, ensemble or sweep")
    a.add_argument("--data", help="FXT dataset (defaults to the generated eval split)")
    common(sub.add_parser("gen-data", help="write train/eval datasets"), steps=False)
    r = sub.add_parser("resize-verify", help="check token preservation of resize methods")
    r.add_argument("p_in", type=int)
    r.add_argument("p_out", type=int)
    r.add_argument("trials", type=int, nargs="?", default=1000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="also write the report here")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "resize-verify":
            report = resize_verify(args.p_in, args.p_out, args.trials, args.seed)
            sys.stdout.write(report.to_text())
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(report.to_text(), encoding="utf-8")
            return EXIT_OK if report.passed else EXIT_INVALID
        cfg = _load_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "distill":
            return cmd_distill(cfg, args.teacher)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.checkpoint, args.mode, args.data)
        return cmd_gen_data(cfg)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (ValueError, FileNotFoundError, TilingError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
