"""Pre-norm transformer encoder with flexible sequence length and depth."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import FormatError, fxt_read, fxt_write
from .embedding import EmbedMethod, PatchKernel, PosGrid, TokenSeq, embed_tokens
from .seeding import INIT, make_rng


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 8
    channels: int = 1
    underlying_patch: int = 32
    underlying_grid: int = 7

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.heads < 1 or self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if min(self.mlp_ratio, self.num_classes, self.channels) < 1:
            raise ValueError("mlp_ratio, num_classes and channels must be >= 1")
        if min(self.underlying_patch, self.underlying_grid) < 1:
            raise ValueError("underlying shapes must be >= 1")


class Block(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, mlp_ratio * width)
        self.fc2 = nn.Linear(mlp_ratio * width, width)

    def attention(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n, s, d = x.shape
        q, k, v = self.qkv(x).reshape(n, s, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        probs = logits.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(n, s, d)
        return self.proj(out), probs

    def forward(self, x: torch.Tensor):
        a, probs = self.attention(self.norm1(x))
        x_attn = x + a
        x_mlp = x_attn + self.fc2(F.gelu(self.fc1(self.norm2(x_attn))))
        return x_attn, x_mlp, probs


class FlexiViT(nn.Module):
    """All learnable parameters plus the flexible forward pass.

    Only ``embed.kernel`` and ``pos.grid`` depend on the patch size; they are
    stored at underlying shapes and resized per call.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.width
        self.embed = PatchKernel(config.underlying_patch, config.channels, d)
        self.pos = PosGrid(config.underlying_grid, d)
        self.cls = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.num_classes)

    def tokens(self, images: torch.Tensor, patch_size: int, resize_method: EmbedMethod = "pi") -> TokenSeq:
        images = torch.as_tensor(images, dtype=self.cls.dtype)
        return embed_tokens(images, patch_size, self.embed, self.pos, self.cls, resize_method)

    def forward_tokens(self, tokens: torch.Tensor, depth_limit: int | None = None, return_attention: bool = False):
        """Run the encoder on ``(n, 1 + s, d)`` tokens.

        Returns ``(logits, features)`` where ``features[i]`` is the pair
        ``(post_attention, post_mlp)`` for block ``i``; with
        ``return_attention`` a third element holds per-block attention
        probabilities. The head reads the CLS token of the last executed
        block through the shared final norm.
        """
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.width:
            raise ValueError(f"expected tokens of shape (n, 1 + s, {self.config.width}), got {tuple(tokens.shape)}")
        if tokens.shape[1] < 2:
            raise ValueError("token sequence needs at least one patch token besides CLS")
        depth = self.config.depth if depth_limit is None else depth_limit
        if not 1 <= depth <= self.config.depth:
            raise ValueError(f"depth_limit must be in [1, {self.config.depth}], got {depth_limit}")
        features, attention = [], []
        x = tokens
        for block in self.blocks[:depth]:
            x_attn, x, probs = block(x)
            features.append((x_attn, x))
            attention.append(probs)
        logits = self.head(self.final_norm(x[:, 0]))
        if return_attention:
            return logits, features, attention
        return logits, features

    def forward(
        self,
        images: torch.Tensor,
        patch_size: int,
        depth_limit: int | None = None,
        resize_method: EmbedMethod = "pi",
    ) -> torch.Tensor:
        seq = self.tokens(images, patch_size, resize_method)
        logits, _ = self.forward_tokens(seq.tokens, depth_limit)
        return logits


def flexi_forward(images, patch_size: int, model: FlexiViT, resize_method: EmbedMethod = "pi") -> torch.Tensor:
    """Logits for ``images`` tokenized at ``patch_size``."""
    return model(images, patch_size, resize_method=resize_method)


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_params(config: EncoderConfig, seed: int, dtype: torch.dtype = torch.float64) -> FlexiViT:
    """Deterministic initialization from ``seed``.

    Weight matrices and the kernel are truncated normal (std 0.02, cut at two
    standard deviations), biases and the CLS token are zero, positions are
    small normal, LayerNorms are identity and the head is zero.
    """
    model = FlexiViT(config).to(dtype)
    with torch.no_grad():
        for i, (name, param) in enumerate(model.named_parameters()):
            rng = make_rng(seed, INIT, i)
            if name.startswith("head.") or name == "cls" or name.endswith("bias"):
                value = np.zeros(param.shape)
            elif name.startswith("pos."):
                value = 0.02 * rng.standard_normal(param.shape)
            elif "norm" in name:
                value = np.ones(param.shape) if name.endswith("weight") else np.zeros(param.shape)
            else:
                value = _trunc_normal(rng, param.shape, 0.02)
            param.copy_(torch.as_tensor(value, dtype=dtype))
    return model


def materialize(model: FlexiViT, patch_size: int, grid: int) -> FlexiViT:
    """A copy whose underlying shapes equal the given patch side and grid.

    The result is the fixed-size model the flexible one computes at that
    patch size: identical logits there, with identity resize maps.
    """
    cfg = dataclasses.replace(model.config, underlying_patch=patch_size, underlying_grid=grid)
    out = FlexiViT(cfg).to(model.cls.dtype)
    state = {k: v for k, v in model.state_dict().items() if k not in ("embed.kernel", "pos.grid")}
    with torch.no_grad():
        state["embed.kernel"] = model.embed.resized(patch_size).detach().clone()
        state["pos.grid"] = model.pos.resized((grid, grid)).reshape(grid, grid, -1).detach().clone()
    out.load_state_dict(state)
    return out


_META_FIELDS = ("depth", "width", "heads", "mlp_ratio", "num_classes", "channels", "underlying_patch", "underlying_grid")


def checkpoint_tensors(model: FlexiViT) -> list[tuple[str, np.ndarray]]:
    """Canonical checkpoint contents: ``meta.encoder`` then the state dict.

    Tensor names follow the module tree: ``embed.kernel`` ``(P_u, P_u, c, d)``,
    ``embed.bias``, ``pos.grid`` ``(G_u, G_u, d)``, ``pos.cls_pos``, ``cls``,
    ``blocks.{i}.{norm1,qkv,proj,norm2,fc1,fc2}.{weight,bias}``,
    ``final_norm.{weight,bias}`` and ``head.{weight,bias}``. ``meta.encoder``
    holds the config integers in the order of ``_META_FIELDS`` as f64.
    """
    meta = np.array([getattr(model.config, f) for f in _META_FIELDS], dtype=np.float64)
    return [("meta.encoder", meta)] + [(k, v.detach().cpu().numpy()) for k, v in model.state_dict().items()]


def save_checkpoint(path, model: FlexiViT) -> None:
    fxt_write(path, checkpoint_tensors(model))


def load_checkpoint(path) -> FlexiViT:
    tensors = fxt_read(path)
    if "meta.encoder" not in tensors:
        raise FormatError("checkpoint lacks meta.encoder")
    meta = tensors.pop("meta.encoder")
    if meta.shape != (len(_META_FIELDS),):
        raise FormatError(f"meta.encoder has shape {meta.shape}")
    config = EncoderConfig(**{f: int(v) for f, v in zip(_META_FIELDS, meta)})
    dtypes = {v.dtype for v in tensors.values()}
    if len(dtypes) != 1:
        raise FormatError("checkpoint mixes dtypes")
    model = FlexiViT(config).to(torch.float32 if dtypes.pop() == np.float32 else torch.float64)
    expected = set(model.state_dict())
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise FormatError(f"checkpoint tensor names differ: missing {missing}, unexpected {extra}")
    try:
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    except RuntimeError as exc:
        raise FormatError(f"checkpoint shapes do not match its config: {exc}") from None
    model.eval()
    return model
