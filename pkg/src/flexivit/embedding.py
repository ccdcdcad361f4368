"""Patchification and flexible patch/position embeddings.

The learnable kernel and position grid live at fixed underlying shapes and are
resized on the fly to whatever patch size the forward pass requests. Images are
channels-last: ``(h, w, c)`` or batched ``(n, h, w, c)``.
"""

from __future__ import annotations

import functools
from typing import Literal, NamedTuple

import numpy as np
import torch
from torch import nn

from . import linmaps

EmbedMethod = Literal["pi", "vanilla", "normalize"]
EMBED_METHODS = ("pi", "vanilla", "normalize")


class TilingError(ValueError):
    pass


class TokenSeq(NamedTuple):
    tokens: torch.Tensor  # (n, 1 + s, d), CLS first
    patch_size: int
    grid: tuple[int, int]


def check_tiling(h: int, w: int, p: int) -> tuple[int, int]:
    if p < 1 or h % p or w % p:
        raise TilingError(f"patch size {p} does not tile a {h}x{w} image (h={h}, w={w}, p={p})")
    return h // p, w // p


def _permute(x, dims):
    return x.permute(*dims) if isinstance(x, torch.Tensor) else np.transpose(x, dims)


def patchify(image, p: int):
    """Split ``(..., h, w, c)`` into ``(..., s, p, p, c)`` row-major patches."""
    *lead, h, w, c = image.shape
    gh, gw = check_tiling(h, w, p)
    k = len(lead)
    x = image.reshape(*lead, gh, p, gw, p, c)
    x = _permute(x, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return x.reshape(*lead, gh * gw, p, p, c)


def unpatchify(patches, grid: tuple[int, int]):
    """Inverse of :func:`patchify`."""
    *lead, s, p, _, c = patches.shape
    gh, gw = grid
    if s != gh * gw:
        raise ValueError(f"{s} patches cannot fill a {gh}x{gw} grid")
    k = len(lead)
    x = patches.reshape(*lead, gh, gw, p, p, c)
    x = _permute(x, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return x.reshape(*lead, gh * p, gw * p, c)


@functools.lru_cache(maxsize=256)
def _kernel_map(p_in: int, p_out: int, method: str, dtype: torch.dtype) -> torch.Tensor:
    name = "pi" if method == "pi" else "bilinear"
    return torch.tensor(linmaps.resize_map(p_in, p_out, name).weights, dtype=dtype)


@functools.lru_cache(maxsize=256)
def _grid_map(in_hw: tuple[int, int], out_hw: tuple[int, int], dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(linmaps.bilinear_matrix_2d(in_hw, out_hw), dtype=dtype)


class PatchKernel(nn.Module):
    """Underlying patch-embedding kernel ``(P_u, P_u, c, d)`` and bias ``(d,)``."""

    def __init__(self, underlying: int, channels: int, width: int):
        super().__init__()
        if underlying < 1:
            raise ValueError("underlying kernel side must be >= 1")
        self.kernel = nn.Parameter(torch.zeros(underlying, underlying, channels, width))
        self.bias = nn.Parameter(torch.zeros(width))

    @property
    def side(self) -> int:
        return self.kernel.shape[0]

    def resized(self, p: int, method: EmbedMethod = "pi") -> torch.Tensor:
        """Kernel at patch side ``p``; every ``(channel, dim)`` slice resized independently."""
        if method not in EMBED_METHODS:
            raise ValueError(f"unknown resize method {method!r}; expected one of {EMBED_METHODS}")
        pu, _, c, d = self.kernel.shape
        if p == pu:
            return self.kernel
        m = _kernel_map(pu, p, method, self.kernel.dtype)
        return (m @ self.kernel.reshape(pu * pu, c * d)).reshape(p, p, c, d)


class PosGrid(nn.Module):
    """Underlying position grid ``(G_u, G_u, d)`` and the never-resized CLS position."""

    def __init__(self, underlying: int, width: int):
        super().__init__()
        if underlying < 1:
            raise ValueError("underlying grid side must be >= 1")
        self.grid = nn.Parameter(torch.zeros(underlying, underlying, width))
        self.cls_pos = nn.Parameter(torch.zeros(width))

    @property
    def side(self) -> int:
        return self.grid.shape[0]

    def resized(self, grid_hw: tuple[int, int]) -> torch.Tensor:
        """Bilinearly resampled grid flattened to ``(gh * gw, d)``."""
        gu, _, d = self.grid.shape
        if tuple(grid_hw) == (gu, gu):
            return self.grid.reshape(gu * gu, d)
        m = _grid_map((gu, gu), tuple(grid_hw), self.grid.dtype)
        return m @ self.grid.reshape(gu * gu, d)


def embed_tokens(
    images: torch.Tensor,
    p: int,
    kernel: PatchKernel,
    pos: PosGrid,
    cls: torch.Tensor,
    resize_method: EmbedMethod = "pi",
) -> TokenSeq:
    """Patchify, embed with the kernel resized to ``p``, add positions, prepend CLS.

    ``images`` is ``(n, h, w, c)`` (a single ``(h, w, c)`` image is promoted).
    With ``resize_method="normalize"`` the kernel is bilinearly resized and
    every patch embedding is scaled to unit L2 norm before positions are added.
    """
    if images.ndim == 3:
        images = images[None]
    n, h, w, c = images.shape
    grid = check_tiling(h, w, p)
    w_hat = kernel.resized(p, resize_method)
    patches = patchify(images, p).reshape(n, grid[0] * grid[1], p * p * c)
    e = patches @ w_hat.reshape(p * p * c, -1) + kernel.bias
    if resize_method == "normalize":
        e = e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    t = e + pos.resized(grid)
    head = (cls + pos.cls_pos).expand(n, 1, -1)
    return TokenSeq(torch.cat([head, t], dim=1), p, grid)


def strided_geometry(side: int, fixed_patch: int, target_grid: int) -> tuple[int, int]:
    """Smallest image resize ``I`` and integer stride ``t`` with ``(I - P) / t + 1 == g``.

    Candidates are searched within ``[side - P, side + P]``; among equally
    close sizes the larger image wins so no content is discarded.
    """
    if target_grid < 1 or fixed_patch < 1:
        raise ValueError("target_grid and fixed_patch must be >= 1")
    lo, hi = side - fixed_patch, side + fixed_patch
    best = None
    if target_grid == 1:
        candidates = [(fixed_patch, fixed_patch)] if lo <= fixed_patch <= hi else []
    else:
        candidates = []
        for t in range(1, hi // (target_grid - 1) + 1):
            size = fixed_patch + t * (target_grid - 1)
            if lo <= size <= hi:
                candidates.append((size, t))
    for size, t in candidates:
        key = (abs(size - side), -size)
        if best is None or key < best[0]:
            best = (key, size, t)
    if best is None:
        raise ValueError(
            f"no image size in [{lo}, {hi}] yields a {target_grid}x{target_grid} grid "
            f"with {fixed_patch}px patches and an integer stride"
        )
    return best[1], best[2]


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Separable half-pixel bilinear resize of ``(h, w, c)`` to ``(size, size, c)``."""
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    rows = linmaps.bilinear_weights_1d(h, size)
    cols = linmaps.bilinear_weights_1d(w, size)
    return np.einsum("ih,hwc,jw->ijc", rows, image, cols)


def patchify_strided(image: np.ndarray, target_grid: int, fixed_patch: int = 32):
    """Overlapping fixed-size patches on a minimally resized image.

    Returns ``(patches, (image_size, stride))`` with ``patches`` of shape
    ``(g * g, P, P, c)`` in row-major order.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w, _ = image.shape
    if h != w:
        raise ValueError("strided patchification expects a square image")
    size, stride = strided_geometry(h, fixed_patch, target_grid)
    resized = resize_image(image, size) if size != h else image
    patches = [
        resized[i * stride : i * stride + fixed_patch, j * stride : j * stride + fixed_patch]
        for i in range(target_grid)
        for j in range(target_grid)
    ]
    return np.stack(patches), (size, stride)
