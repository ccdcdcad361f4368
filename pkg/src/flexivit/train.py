"""Randomized patch-size training, distillation, teacher initialization and curricula."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import logging
import math
from collections.abc import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .data import ShapeDataset
from .embedding import EmbedMethod, check_tiling
from .encoder import EncoderConfig, FlexiViT
from .seeding import BATCH, DEPTH, PATCH_SIZE, make_rng

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclasses.dataclass(frozen=True)
class PatchSizeDistribution:
    sizes: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "weights", weights)
        if not sizes or len(sizes) != len(weights):
            raise ValueError("sizes and weights must be non-empty and of equal length")
        if min(sizes) < 1:
            raise ValueError("patch sizes must be positive")
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise ValueError("weights must be finite and non-negative")
        if not any(w > 0 for w in weights):
            raise ValueError("at least one weight must be positive")
        diffs = np.diff(sizes)
        if len(sizes) > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError(f"sizes must be strictly increasing or decreasing, got {sizes}")

    @classmethod
    def uniform(cls, sizes: Sequence[int]) -> "PatchSizeDistribution":
        return cls(tuple(sizes), (1.0,) * len(sizes))

    @property
    def probs(self) -> np.ndarray:
        w = np.asarray(self.weights)
        return w / w.sum()

    def check_tiles(self, side: int) -> None:
        for p in self.sizes:
            check_tiling(side, side, p)


def sample_patch_size(dist: PatchSizeDistribution, rng: np.random.Generator) -> int:
    return int(dist.sizes[rng.choice(len(dist.sizes), p=dist.probs)])


def triangular_distribution(sizes: Sequence[int], lo: int = 16, hi: int = 30) -> PatchSizeDistribution:
    """Weight 3 for sizes in ``[lo, hi]``, 1 elsewhere."""
    if not sizes:
        raise ValueError("sizes must be non-empty")
    return PatchSizeDistribution(tuple(sizes), tuple(3.0 if lo <= s <= hi else 1.0 for s in sizes))


def mix(a: PatchSizeDistribution, b: PatchSizeDistribution, alpha: float) -> PatchSizeDistribution:
    """``(1 - alpha) * a + alpha * b`` over the union of sizes, largest first."""
    pa = dict(zip(a.sizes, a.probs))
    pb = dict(zip(b.sizes, b.probs))
    sizes = sorted(set(pa) | set(pb), reverse=True)
    return PatchSizeDistribution(
        tuple(sizes), tuple((1 - alpha) * pa.get(s, 0.0) + alpha * pb.get(s, 0.0) for s in sizes)
    )


@dataclasses.dataclass(frozen=True)
class Curriculum:
    """Large-patch phase, optional linear ramp, then the target distribution.

    ``schedule_fraction`` of all steps use ``large_dist`` alone; the ramp
    takes ``ramp_fraction`` of the remaining steps.
    """

    large_dist: PatchSizeDistribution
    target_dist: PatchSizeDistribution
    schedule_fraction: float
    ramp_fraction: float
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.schedule_fraction <= 1 or not 0 <= self.ramp_fraction <= 1:
            raise ValueError("schedule_fraction and ramp_fraction must lie in [0, 1]")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @property
    def ramp_start(self) -> float:
        return self.schedule_fraction * self.total_steps

    @property
    def ramp_length(self) -> float:
        return self.ramp_fraction * (1 - self.schedule_fraction) * self.total_steps

    def check_tiles(self, side: int) -> None:
        self.large_dist.check_tiles(side)
        self.target_dist.check_tiles(side)


def curriculum_distribution(cur: Curriculum, step: int) -> PatchSizeDistribution:
    if not 0 <= step < cur.total_steps:
        raise ValueError(f"step {step} outside [0, {cur.total_steps})")
    start, length = cur.ramp_start, cur.ramp_length
    if step < start:
        return cur.large_dist
    if step >= start + length:
        return cur.target_dist
    return mix(cur.large_dist, cur.target_dist, (step - start) / length)


def distribution_at(schedule, step: int) -> PatchSizeDistribution:
    if isinstance(schedule, Curriculum):
        return curriculum_distribution(schedule, step)
    return schedule


def supervised_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy."""
    return F.cross_entropy(logits, labels)


def distill_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Mean ``KL(softmax(teacher / T) || softmax(student / T))``; the teacher gets no gradient."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    log_q = F.log_softmax(student_logits / temperature, dim=-1)
    log_p = F.log_softmax(teacher_logits.detach() / temperature, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return kl.mean()


def teacher_init(
    teacher: FlexiViT,
    underlying_patch: int = 32,
    underlying_grid: int = 7,
    student_config: EncoderConfig | None = None,
) -> FlexiViT:
    """Student whose encoder copies the teacher and whose embeddings are resized to the student's shapes.

    The teacher's kernel (side ``p_t``) is PI-resized to ``underlying_patch``
    and its position grid bilinearly resampled to ``underlying_grid``.
    """
    cfg = dataclasses.replace(teacher.config, underlying_patch=underlying_patch, underlying_grid=underlying_grid)
    if student_config is not None:
        for field in ("depth", "width", "heads", "mlp_ratio", "num_classes", "channels"):
            if getattr(student_config, field) != getattr(cfg, field):
                raise ValueError(
                    f"teacher/student {field} mismatch: {getattr(cfg, field)} vs {getattr(student_config, field)}"
                )
        cfg = student_config
    student = FlexiViT(cfg).to(teacher.cls.dtype)
    state = {k: v.clone() for k, v in teacher.state_dict().items() if k not in ("embed.kernel", "pos.grid")}
    with torch.no_grad():
        state["embed.kernel"] = teacher.embed.resized(cfg.underlying_patch, "pi").detach().clone()
        g = cfg.underlying_grid
        state["pos.grid"] = teacher.pos.resized((g, g)).reshape(g, g, -1).detach().clone()
    student.load_state_dict(state)
    return student


@dataclasses.dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 100
    cosine: bool = True
    loss: str = "xent"
    temperature: float = 1.0
    seed: int = 0
    image_side: int = 48
    eval_sizes: tuple[int, ...] = (24, 16, 12, 8, 6)
    eval_every: int = 0
    grad_clip: float = 1.0
    resize_method: EmbedMethod = "pi"
    teacher_patch: int = 8
    depth_choices: tuple[int, ...] = ()  # flexible depth: uniform over these block counts

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.warmup_steps > max(self.steps, 0) and self.steps > 0:
            raise ValueError(f"warmup_steps {self.warmup_steps} exceeds steps {self.steps}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.loss not in ("xent", "distill"):
            raise ValueError(f"unknown loss {self.loss!r}; expected xent or distill")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(d < 1 for d in self.depth_choices):
            raise ValueError("depth_choices must be >= 1")


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to zero (or constant)."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if not cfg.cosine:
        return cfg.lr
    progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclasses.dataclass
class MetricLog:
    steps: list[tuple[int, int, float, float]] = dataclasses.field(default_factory=list)
    evals: list[tuple[int, int, float]] = dataclasses.field(default_factory=list)

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "patch_size", "loss", "lr"])
        for step, p, loss, lr in self.steps:
            w.writerow([step, p, repr(loss), repr(lr)])
        return buf.getvalue()

    def evals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "patch_size", "accuracy"])
        for step, p, acc in self.evals:
            w.writerow([step, p, repr(acc)])
        return buf.getvalue()


@torch.no_grad()
def predict_logits(
    model: FlexiViT,
    data: ShapeDataset,
    patch_size: int,
    batch_size: int = 256,
    depth_limit: int | None = None,
    resize_method: EmbedMethod = "pi",
) -> np.ndarray:
    model.eval()
    out = []
    dtype = model.cls.dtype
    for i in range(0, len(data), batch_size):
        images = torch.as_tensor(data.images[i : i + batch_size], dtype=dtype)
        out.append(model(images, patch_size, depth_limit=depth_limit, resize_method=resize_method).double().numpy())
    return np.concatenate(out)


def evaluate(model: FlexiViT, data: ShapeDataset, patch_size: int, **kw) -> float:
    """Top-1 accuracy at one patch size."""
    logits = predict_logits(model, data, patch_size, **kw)
    return float(np.mean(logits.argmax(-1) == data.labels))


def train_flexi(
    config: TrainConfig,
    schedule: PatchSizeDistribution | Curriculum,
    data: ShapeDataset,
    model: FlexiViT,
    teacher: FlexiViT | None = None,
    eval_data: ShapeDataset | None = None,
) -> tuple[FlexiViT, MetricLog]:
    """Train a copy of ``model`` drawing one patch size per step from ``schedule``.

    With ``config.loss == "distill"`` the loss is the KL divergence to
    ``teacher`` evaluated at ``config.teacher_patch`` on the same batch.
    Gradients are clipped to global norm ``config.grad_clip``.
    """
    if data.side != config.image_side:
        raise ValueError(f"data side {data.side} != configured image side {config.image_side}")
    schedule.check_tiles(config.image_side)
    for p in config.eval_sizes:
        check_tiling(config.image_side, config.image_side, p)
    if config.loss == "distill":
        if teacher is None:
            raise ValueError("distillation requires a teacher")
        check_tiling(config.image_side, config.image_side, config.teacher_patch)
        teacher.eval()
    if config.depth_choices and max(config.depth_choices) > model.config.depth:
        raise ValueError(f"depth_choices {config.depth_choices} exceed model depth {model.config.depth}")
    if isinstance(schedule, Curriculum) and schedule.total_steps != config.steps:
        raise ValueError(f"curriculum spans {schedule.total_steps} steps but training runs {config.steps}")

    model = copy.deepcopy(model)
    dtype = model.cls.dtype
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    metrics = MetricLog()
    eval_data = eval_data if eval_data is not None else data
    batch = min(config.batch_size, len(data))

    for step in range(config.steps):
        p = sample_patch_size(distribution_at(schedule, step), make_rng(config.seed, PATCH_SIZE, step))
        idx = make_rng(config.seed, BATCH, step).choice(len(data), size=batch, replace=False)
        images = torch.as_tensor(data.images[idx], dtype=dtype)
        depth = None
        if config.depth_choices:
            depth = int(make_rng(config.seed, DEPTH, step).choice(config.depth_choices))
        model.train()
        logits = model(images, p, depth_limit=depth, resize_method=config.resize_method)
        if config.loss == "distill":
            with torch.no_grad():
                target = teacher(images, config.teacher_patch)
            loss = distill_loss(logits, target, config.temperature)
        else:
            loss = supervised_loss(logits, torch.as_tensor(data.labels[idx]))
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at step {step} (patch size {p})")
        lr = learning_rate(config, step)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        metrics.steps.append((step, p, value, lr))
        if config.eval_every and (step + 1) % config.eval_every == 0 and step + 1 < config.steps:
            _eval_sweep(model, eval_data, config, step + 1, metrics)
    _eval_sweep(model, eval_data, config, config.steps, metrics)
    model.eval()
    return model, metrics


def _eval_sweep(model, data, config, step, metrics):
    for p in config.eval_sizes:
        acc = evaluate(model, data, p, resize_method=config.resize_method)
        metrics.evals.append((step, p, acc))
        log.info("step %d  p=%d  acc=%.4f", step, p, acc)
