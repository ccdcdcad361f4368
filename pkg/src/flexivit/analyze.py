"""Representation and prediction analysis: CKA, cross-scale token maps, ensembles, sweeps, FLOPs."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import warnings
from collections.abc import Sequence

import numpy as np
import torch

from .data import ShapeDataset
from .embedding import check_tiling
from .encoder import EncoderConfig, FlexiViT
from .train import Curriculum, PatchSizeDistribution, distribution_at, predict_logits

SUBLAYERS = ("attn", "mlp")


def _centered(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"{name} must be a 2-D matrix with at least 2 rows, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    xc = x - x.mean(axis=0, keepdims=True)
    if not np.any(xc):
        raise ValueError(f"{name} has zero variance; CKA is undefined")
    return xc


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA ``||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)`` on column-centered features."""
    if len(x) != len(y):
        raise ValueError(f"row counts differ: {len(x)} vs {len(y)}")
    xc, yc = _centered(x, "X"), _centered(y, "Y")
    cross = np.linalg.norm(yc.T @ xc) ** 2
    return float(cross / (np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)))


def hsic_unbiased(k: np.ndarray, l: np.ndarray) -> float:
    """Unbiased HSIC estimator on Gram matrices (diagonals are ignored)."""
    n = k.shape[0]
    if n < 4:
        raise ValueError("unbiased HSIC needs at least 4 examples")
    k = k - np.diag(np.diag(k))
    l = l - np.diag(np.diag(l))
    kl = k @ l
    term = np.trace(kl) + k.sum() * l.sum() / ((n - 1) * (n - 2)) - 2.0 * kl.sum() / (n - 2)
    return float(term / (n * (n - 3)))


def minibatch_cka(x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Minibatch linear CKA: unbiased HSIC terms averaged over consecutive row batches."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError(f"row counts differ: {len(x)} vs {len(y)}")
    xy = xx = yy = 0.0
    batches = 0
    for i in range(0, len(x) - 3, batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        if len(xb) < 4:
            break
        k, l = xb @ xb.T, yb @ yb.T
        xy += hsic_unbiased(k, l)
        xx += hsic_unbiased(k, k)
        yy += hsic_unbiased(l, l)
        batches += 1
    if batches == 0:
        raise ValueError("need at least 4 rows for minibatch CKA")
    if xx <= 0 or yy <= 0:
        raise ValueError("zero-variance features; CKA is undefined")
    return float(xy / math.sqrt(xx * yy))


def arccos_distance(similarity: float, slack: float = 1e-9) -> float:
    """Angular distance ``arccos(similarity)`` for similarities in ``[0, 1]``."""
    if not -slack <= similarity <= 1 + slack:
        raise ValueError(f"similarity {similarity} outside [0, 1]")
    return math.acos(min(max(similarity, 0.0), 1.0))


@torch.no_grad()
def block_features(
    model: FlexiViT, images: np.ndarray, patch_size: int, batch_size: int = 256
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-block ``(post_attention, post_mlp)`` token features, each ``(n, 1 + s, d)``."""
    model.eval()
    chunks = []
    for i in range(0, len(images), batch_size):
        seq = model.tokens(images[i : i + batch_size], patch_size)
        _, feats = model.forward_tokens(seq.tokens)
        chunks.append([(a.double().numpy(), m.double().numpy()) for a, m in feats])
    return [
        tuple(np.concatenate([c[b][j] for c in chunks]) for j in range(2)) for b in range(model.config.depth)
    ]


def cka_matrix(tagged: Sequence[tuple[str, np.ndarray]]) -> np.ndarray:
    n = len(tagged)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = linear_cka(tagged[i][1], tagged[j][1])
    return out


def cka_csv(tags: Sequence[str], matrix: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tag", *tags])
    for tag, row in zip(tags, matrix):
        w.writerow([tag, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def center_index(grid: int) -> int:
    """Seed cell per axis; top-left of the central 2x2 for even grids."""
    return grid // 2


def token_cosine_map(
    model: FlexiViT,
    images: np.ndarray,
    block: int,
    sublayer: str,
    seed_size: int,
    target_size: int,
) -> tuple[np.ndarray, int]:
    """Mean cosine between the central token at ``seed_size`` and every token at ``target_size``.

    Returns ``(grid, zero_count)``: a ``(g_q, g_q)`` map averaged over images and
    the number of (image, token) pairs skipped because a representation was
    the zero vector (those contribute 0).
    """
    if not 0 <= block < model.config.depth:
        raise ValueError(f"block {block} outside [0, {model.config.depth})")
    if sublayer not in SUBLAYERS:
        raise ValueError(f"sublayer must be one of {SUBLAYERS}")
    side = images.shape[1]
    gp, _ = check_tiling(side, images.shape[2], seed_size)
    gq, _ = check_tiling(side, images.shape[2], target_size)
    which = SUBLAYERS.index(sublayer)
    fp = block_features(model, images, seed_size)[block][which]
    fq = fp if target_size == seed_size else block_features(model, images, target_size)[block][which]
    c = center_index(gp)
    seed = fp[:, 1 + c * gp + c]  # (n, d)
    tokens = fq[:, 1:]  # (n, gq*gq, d)
    norms = np.linalg.norm(seed, axis=-1)[:, None] * np.linalg.norm(tokens, axis=-1)
    dots = np.einsum("nd,nsd->ns", seed, tokens)
    valid = norms > 0
    cos = np.divide(dots, norms, out=np.zeros_like(dots), where=valid)
    zero_count = int((~valid).sum())
    if zero_count:
        warnings.warn(f"{zero_count} zero-vector representations contributed 0 to the cosine map")
    return cos.mean(axis=0).reshape(gq, gq), zero_count


def rescaled_seed(seed_grid: int, target_grid: int) -> tuple[int, int]:
    """Cell of the target grid containing the center of the seed cell."""
    c = center_index(seed_grid)
    r = min(int((c + 0.5) * target_grid / seed_grid), target_grid - 1)
    return r, r


def correspondence_hit(cos_map: np.ndarray, seed_grid: int) -> bool:
    """Whether the cosine argmax is within Chebyshev distance 1 of the rescaled seed."""
    gq = cos_map.shape[0]
    ar, ac = np.unravel_index(int(np.argmax(cos_map)), cos_map.shape)
    sr, sc = rescaled_seed(seed_grid, gq)
    return max(abs(int(ar) - sr), abs(int(ac) - sc)) <= 1


def ensemble_predict(logit_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Average logits across models, then take the argmax."""
    if len(logit_sets) == 0:
        raise ValueError("need at least one logit set")
    arrays = [np.asarray(l, dtype=np.float64) for l in logit_sets]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ValueError("logit sets must share a shape")
    return np.mean(arrays, axis=0).argmax(axis=-1)


def agreement(preds_a: np.ndarray, preds_b: np.ndarray) -> float:
    preds_a, preds_b = np.asarray(preds_a), np.asarray(preds_b)
    if preds_a.shape != preds_b.shape:
        raise ValueError(f"prediction lengths differ: {preds_a.shape} vs {preds_b.shape}")
    return float(np.mean(preds_a == preds_b))


@dataclasses.dataclass(frozen=True)
class FlopsBreakdown:
    attention_linear: int  # per block, 4 s d^2
    attention_quadratic: int  # per block, 2 s^2 d
    mlp: int  # per block, 2 s d (r d) 2
    embed: int  # s p^2 c d
    depth: int

    @property
    def total(self) -> int:
        return self.depth * (self.attention_linear + self.attention_quadratic + self.mlp) + self.embed


def flops_breakdown(config: EncoderConfig, s: int, patch_size: int = 0, depth: int | None = None) -> FlopsBreakdown:
    if s < 1:
        raise ValueError("sequence length must be >= 1")
    d = config.width
    return FlopsBreakdown(
        attention_linear=4 * s * d * d,
        attention_quadratic=2 * s * s * d,
        mlp=2 * s * d * (config.mlp_ratio * d) * 2,
        embed=s * patch_size * patch_size * config.channels * d,
        depth=config.depth if depth is None else depth,
    )


def flops_estimate(config: EncoderConfig, s: int, patch_size: int = 0, depth: int | None = None) -> int:
    """Closed-form forward FLOPs for ``s`` patch tokens.

    Per block: attention ``4 s d^2 + 2 s^2 d`` and MLP ``2 * s * d * (r d) * 2``;
    plus the embedding ``s * p^2 * c * d``. ``depth`` overrides the block count
    (truncated-depth evaluation).
    """
    return flops_breakdown(config, s, patch_size, depth).total


def seq_len(image_side: int, patch_size: int) -> int:
    g, _ = check_tiling(image_side, image_side, patch_size)
    return g * g


def schedule_flops(
    config: EncoderConfig, schedule: PatchSizeDistribution | Curriculum, steps: int, image_side: int
) -> float:
    """Expected total forward FLOPs (per example) over ``steps`` training steps."""
    total = 0.0
    for step in range(steps):
        dist = distribution_at(schedule, step)
        total += sum(
            prob * flops_estimate(config, seq_len(image_side, p), p) for p, prob in zip(dist.sizes, dist.probs)
        )
    return total


@dataclasses.dataclass(frozen=True)
class SweepRow:
    patch_size: int
    accuracy: float
    flops: int
    seq_len: int


@dataclasses.dataclass
class SweepResult:
    rows: list[SweepRow]

    def __post_init__(self):
        sizes = [r.patch_size for r in self.rows]
        if len(set(sizes)) != len(sizes):
            raise ValueError("sweep sizes must be distinct")

    def accuracy(self) -> dict[int, float]:
        return {r.patch_size: r.accuracy for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patch_size", "accuracy", "gflops", "seq_len"])
        for r in self.rows:
            w.writerow([r.patch_size, repr(r.accuracy), repr(r.flops / 1e9), r.seq_len])
        return buf.getvalue()


def eval_sweep(model: FlexiViT, data: ShapeDataset, sizes: Sequence[int], resize_method: str = "pi") -> SweepResult:
    """Accuracy, FLOPs and sequence length at every size (sizes outside training are fine)."""
    rows = []
    for p in sizes:
        s = seq_len(data.side, p)
        logits = predict_logits(model, data, p, resize_method=resize_method)
        acc = float(np.mean(logits.argmax(-1) == data.labels))
        rows.append(SweepRow(int(p), acc, flops_estimate(model.config, s, p), s))
    return SweepResult(rows)


@dataclasses.dataclass(frozen=True)
class EnsembleReport:
    sizes: tuple[int, ...]
    per_size_accuracy: dict[int, float]
    per_size_flops: dict[int, int]
    ensemble_accuracy: float
    ensemble_flops: int
    agreement: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "accuracy", "gflops"])
        for p in self.sizes:
            w.writerow([f"p{p}", repr(self.per_size_accuracy[p]), repr(self.per_size_flops[p] / 1e9)])
        w.writerow(["ensemble", repr(self.ensemble_accuracy), repr(self.ensemble_flops / 1e9)])
        w.writerow(["agreement", repr(self.agreement), ""])
        return buf.getvalue()


def ensemble_report(model: FlexiViT, data: ShapeDataset, sizes: Sequence[int]) -> EnsembleReport:
    """One model at several patch sizes, ensembled by logit averaging, with summed FLOPs."""
    sizes = tuple(int(p) for p in sizes)
    logits = {p: predict_logits(model, data, p) for p in sizes}
    preds = {p: l.argmax(-1) for p, l in logits.items()}
    flops = {p: flops_estimate(model.config, seq_len(data.side, p), p) for p in sizes}
    ens = ensemble_predict([logits[p] for p in sizes])
    agree = agreement(preds[sizes[0]], preds[sizes[-1]]) if len(sizes) > 1 else 1.0
    return EnsembleReport(
        sizes,
        {p: float(np.mean(preds[p] == data.labels)) for p in sizes},
        flops,
        float(np.mean(ens == data.labels)),
        sum(flops.values()),
        agree,
    )
