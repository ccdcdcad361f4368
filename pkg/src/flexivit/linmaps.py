"""Resize operators as explicit dense linear maps.

Every spatial resize of a ``p_in x p_in`` grid to ``p_out x p_out`` used by the
model is materialized as a ``(p_out**2, p_in**2)`` matrix acting on the
row-major flattening of the grid. Bilinear resizing uses half-pixel centers
with edge clamping and no antialiasing. The pseudoinverse ("PI") resize is
the transpose-pseudoinverse of the bilinear map, so that inner products with
bilinearly upsampled inputs are preserved exactly.
"""

from __future__ import annotations

import dataclasses
import functools
from typing import Literal

import numpy as np

Method = Literal["bilinear", "pi", "area", "norm"]
HeuristicMethod = Literal["vanilla", "area", "norm"]

_METHODS = ("bilinear", "pi", "area", "norm")


def _check_side(name: str, value: int) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer side length, got {value!r}")
    return int(value)


@dataclasses.dataclass(frozen=True, eq=False)
class ResizeMap:
    """A resize of a square grid realized as a dense matrix.

    ``weights`` has shape ``(p_out**2, p_in**2)`` and acts on row-major
    flattened grids. For ``method="norm"`` the matrix is the bilinear one and
    :meth:`apply` additionally rescales the output to the input's L2 norm.
    """

    p_in: int
    p_out: int
    method: Method
    weights: np.ndarray

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown resize method {self.method!r}")
        expected = (self.p_out**2, self.p_in**2)
        if self.weights.shape != expected:
            raise ValueError(f"weights shape {self.weights.shape} != {expected}")
        self.weights.flags.writeable = False

    def apply(self, grid: np.ndarray) -> np.ndarray:
        """Resize a ``(p_in, p_in, ...)`` array along its two leading axes."""
        grid = np.asarray(grid, dtype=np.float64)
        if grid.shape[:2] != (self.p_in, self.p_in):
            raise ValueError(f"expected leading shape {(self.p_in, self.p_in)}, got {grid.shape[:2]}")
        trailing = grid.shape[2:]
        flat = grid.reshape(self.p_in**2, -1)
        out = self.weights @ flat
        if self.method == "norm":
            in_norm = np.linalg.norm(flat, axis=0)
            out_norm = np.linalg.norm(out, axis=0)
            scale = np.divide(in_norm, out_norm, out=np.zeros_like(in_norm), where=out_norm > 0)
            out = out * scale
        return out.reshape((self.p_out, self.p_out) + trailing)


def bilinear_weights_1d(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` half-pixel bilinear interpolation matrix with edge clamping."""
    n_in = _check_side("n_in", n_in)
    n_out = _check_side("n_out", n_out)
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        x = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(x))
        i1 = min(i0 + 1, n_in - 1)
        frac = x - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def area_weights_1d(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` matrix averaging the input cells each output cell overlaps."""
    n_in = _check_side("n_in", n_in)
    n_out = _check_side("n_out", n_out)
    m = np.zeros((n_out, n_in))
    width = n_in / n_out
    for o in range(n_out):
        lo, hi = o * width, (o + 1) * width
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                m[o, i] = overlap / width
    return m


def bilinear_matrix_2d(in_hw: tuple[int, int], out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear map between rectangular grids, ``(oh*ow, ih*iw)``."""
    return np.kron(bilinear_weights_1d(in_hw[0], out_hw[0]), bilinear_weights_1d(in_hw[1], out_hw[1]))


def bilinear_matrix(p_in: int, p_out: int) -> ResizeMap:
    """Dense bilinear resize ``p_in x p_in -> p_out x p_out``.

    The 2-D matrix is the Kronecker product of the 1-D interpolation matrix
    with itself, matching row-major flattening.
    """
    w1 = bilinear_weights_1d(p_in, p_out)
    return ResizeMap(int(p_in), int(p_out), "bilinear", np.kron(w1, w1))


def area_matrix(p_in: int, p_out: int) -> ResizeMap:
    w1 = area_weights_1d(p_in, p_out)
    return ResizeMap(int(p_in), int(p_out), "area", np.kron(w1, w1))


def pseudoinverse(m: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse via the SVD.

    Singular values at or below ``tol * sigma_max`` are treated as zero.
    ``tol`` defaults to ``max(rows, cols) * eps``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("pseudoinverse input contains non-finite values")
    rows, cols = m.shape
    if m.size == 0:
        return np.zeros((cols, rows))
    if tol is None:
        tol = max(rows, cols) * np.finfo(np.float64).eps
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    cutoff = tol * s[0]
    keep = s > cutoff
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vh.T * s_inv) @ u.T


def pi_resize_matrix(p_in: int, p_out: int) -> ResizeMap:
    """PI-resize: ``((B_{p_in}^{p_out})^T)^+`` for bilinear map ``B``.

    Upsampling (``p_out >= p_in``) preserves ``<x, w> == <B x, P w>`` for every
    ``x``; downsampling returns the least-squares solution of
    ``min ||w - B^T w_hat||``.
    """
    b = bilinear_matrix(p_in, p_out).weights
    return ResizeMap(int(p_in), int(p_out), "pi", pseudoinverse(b.T))


@dataclasses.dataclass(frozen=True, eq=False)
class CovarianceSpec:
    """Uncentered patch covariance ``E[x x^T]`` over ``p x p`` patches."""

    p: int
    sigma: np.ndarray

    def __post_init__(self):
        n = self.p * self.p
        if self.sigma.shape != (n, n):
            raise ValueError(f"sigma must have shape {(n, n)}, got {self.sigma.shape}")
        if not np.allclose(self.sigma, self.sigma.T, rtol=0, atol=1e-12):
            raise ValueError("sigma must be symmetric")


def psd_sqrt(sigma: np.ndarray, neg_tol: float = 1e-8) -> np.ndarray:
    """Symmetric square root via eigendecomposition; handles singular PSD input."""
    sigma = 0.5 * (sigma + sigma.T)
    evals, evecs = np.linalg.eigh(sigma)
    if evals.min() < -neg_tol:
        raise ValueError(f"sigma is not positive semidefinite (min eigenvalue {evals.min():.3g})")
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def sigma_weighted_pi_matrix(p_in: int, p_out: int, cov: CovarianceSpec) -> np.ndarray:
    """Minimizer map of ``||w - B^T w_hat||_Sigma^2``: ``(sqrt(S) B^T)^+ sqrt(S)``."""
    if cov.p != p_in:
        raise ValueError(f"covariance is over {cov.p}x{cov.p} patches, expected {p_in}x{p_in}")
    root = psd_sqrt(cov.sigma)
    bt = bilinear_matrix(p_in, p_out).weights.T
    return pseudoinverse(root @ bt) @ root


def resize_map(p_in: int, p_out: int, method: Method) -> ResizeMap:
    """Cached resize map for the given method; result is read-only."""
    if method not in _METHODS:
        raise ValueError(f"unknown resize method {method!r}; expected one of {_METHODS}")
    return _cached_map(_check_side("p_in", p_in), _check_side("p_out", p_out), method)


@functools.lru_cache(maxsize=256)
def _cached_map(p_in: int, p_out: int, method: str) -> ResizeMap:
    if method == "bilinear":
        return bilinear_matrix(p_in, p_out)
    if method == "pi":
        return pi_resize_matrix(p_in, p_out)
    if method == "area":
        return area_matrix(p_in, p_out)
    b = bilinear_matrix(p_in, p_out)
    return ResizeMap(p_in, p_out, "norm", b.weights.copy())


def heuristic_resize(kernel_slice: np.ndarray, p_out: int, method: HeuristicMethod) -> np.ndarray:
    """Resize one spatial kernel slice with a non-PI baseline.

    ``vanilla`` is plain bilinear, ``area`` averages overlapped input area, and
    ``norm`` is bilinear followed by rescaling to the input slice's L2 norm
    (a zero slice stays zero).
    """
    kernel_slice = np.asarray(kernel_slice, dtype=np.float64)
    if kernel_slice.ndim != 2 or kernel_slice.shape[0] != kernel_slice.shape[1]:
        raise ValueError(f"expected a square 2-D slice, got shape {kernel_slice.shape}")
    names = {"vanilla": "bilinear", "area": "area", "norm": "norm"}
    if method not in names:
        raise ValueError(f"unknown heuristic {method!r}; expected vanilla, area or norm")
    return resize_map(kernel_slice.shape[0], p_out, names[method]).apply(kernel_slice)


def resize_kernel(kernel: np.ndarray, p_out: int, method: Method = "pi") -> np.ndarray:
    """Resize a ``(p, p, ...)`` kernel, treating every trailing slice independently."""
    kernel = np.asarray(kernel, dtype=np.float64)
    return resize_map(kernel.shape[0], p_out, method).apply(kernel)
