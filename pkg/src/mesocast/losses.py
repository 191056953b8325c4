"""Training objectives: mean squared error plus a band-pass pyramid penalty
that weights fine spatial scales, used to sharpen shockwave fronts.

The pyramid is one-dimensional along the segment axis and is applied row by
row, so a (rows, length) tensor of spatial profiles is decomposed in one
pass.  Reduction uses the binomial kernel [1, 4, 6, 4, 1]/16; expansion
zero-stuffs and blurs with doubled gain.  Details are stored as the exact
difference between a level and the expansion of the next, so reconstruction
is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_KERNEL = (1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16)

PADDING_MODES = ("zero", "replicate")


@dataclass(frozen=True)
class LossConfig:
    pyramid_depth: int = 3
    lap_weight: float = 1.0
    padding_mode: str = "zero"

    def __post_init__(self):
        if self.pyramid_depth < 0:
            raise ValueError(f"pyramid_depth must be >= 0, got {self.pyramid_depth}")
        if self.lap_weight < 0:
            raise ValueError(f"lap_weight must be >= 0, got {self.lap_weight}")
        if self.padding_mode not in PADDING_MODES:
            raise ValueError(f"padding_mode must be one of {PADDING_MODES}")


@dataclass
class PyramidLevels:
    details: list[Tensor]  # band-pass levels, level j has length padded/2^j
    residual: Tensor       # low-pass top, length padded/2^depth


def padded_length(length: int, depth: int) -> int:
    """Smallest multiple of 2**depth that is >= length."""
    block = 1 << depth
    return ((length + block - 1) // block) * block


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.tensor(x)


def _blur(t: Tensor, mode: str) -> Tensor:
    xp = ad.pad_last(t, 2, 2, mode)
    n = t.shape[-1]
    acc = ad.scale(ad.narrow(xp, -1, 0, n), _KERNEL[0])
    for k in range(1, 5):
        acc = ad.add(acc, ad.scale(ad.narrow(xp, -1, k, n), _KERNEL[k]))
    return acc


def _reduce(t: Tensor, mode: str) -> Tensor:
    return ad.downsample2(_blur(t, mode))


def _expand(t: Tensor, mode: str) -> Tensor:
    """Upsample to twice the length: pad, zero-stuff, blur with gain 2.

    Padding before stuffing keeps boundary samples consistent with ``mode``,
    so expansion preserves constants exactly under replicate padding.
    """
    up = ad.upsample2(ad.pad_last(t, 1, 1, mode))
    n = 2 * t.shape[-1]
    acc = ad.scale(ad.narrow(up, -1, 0, n), 2.0 * _KERNEL[0])
    for k in range(1, 5):
        acc = ad.add(acc, ad.scale(ad.narrow(up, -1, k, n), 2.0 * _KERNEL[k]))
    return acc


def pad_profile(x, depth: int, mode: str) -> Tensor:
    """Right-pad spatial profiles so the length divides by 2**depth."""
    t = _as_tensor(x)
    target = padded_length(t.shape[-1], depth)
    extra = target - t.shape[-1]
    return ad.pad_last(t, 0, extra, mode) if extra else t


def build_pyramid(x, depth: int, mode: str = "zero") -> PyramidLevels:
    """Decompose profiles (last axis) into ``depth`` band-pass levels plus a
    low-pass residual; the input is padded internally."""
    if depth < 1:
        raise ValueError(f"build_pyramid: depth must be >= 1, got {depth}")
    current = pad_profile(x, depth, mode)
    details = []
    for _ in range(depth):
        coarser = _reduce(current, mode)
        details.append(ad.sub(current, _expand(coarser, mode)))
        current = coarser
    return PyramidLevels(details=details, residual=current)


def reconstruct(levels: PyramidLevels, mode: str = "zero") -> np.ndarray:
    """Invert ``build_pyramid``; exact because details store the expansion
    error verbatim."""
    g = levels.residual
    for detail in reversed(levels.details):
        g = ad.add(detail, _expand(g, mode))
    return g.data


def _l1(a: Tensor, b: Tensor) -> Tensor:
    return ad.sum_all(ad.abs_(ad.sub(a, b)))


def pyramid_weighted_l1(pa: PyramidLevels, pb: PyramidLevels) -> Tensor:
    """sum_j 4^j * |L_j(a) - L_j(b)|_1 with the residual counted as the top
    index, so coarse speed-level error is penalised too."""
    if len(pa.details) != len(pb.details):
        raise ValueError("pyramid depths differ")
    total = ad.scale(_l1(pa.details[0], pb.details[0]), 1.0)
    for j in range(1, len(pa.details)):
        total = ad.add(total, ad.scale(_l1(pa.details[j], pb.details[j]), float(4 ** j)))
    top = len(pa.details)
    return ad.add(total, ad.scale(_l1(pa.residual, pb.residual), float(4 ** top)))


def mse(pred, truth) -> Tensor:
    p, t = _as_tensor(pred), _as_tensor(truth)
    if p.shape != t.shape:
        raise ValueError(f"mse: shape mismatch {p.shape} vs {t.shape}")
    diff = ad.sub(p, t)
    return ad.mean_all(ad.mul(diff, diff))


def lap_loss(x, x_other, depth: int, mode: str = "zero") -> Tensor:
    """Multi-scale L1 between pyramid representations; depth 0 disables the
    term and returns constant zero."""
    a, b = _as_tensor(x), _as_tensor(x_other)
    if a.shape != b.shape:
        raise ValueError(f"lap_loss: shape mismatch {a.shape} vs {b.shape}")
    if depth == 0:
        return ad.tensor(0.0)
    return pyramid_weighted_l1(build_pyramid(a, depth, mode), build_pyramid(b, depth, mode))


def combined_loss(pred, truth, cfg: LossConfig) -> Tensor:
    """mse + lap_weight * lap / (padded length * profile count); the per-entry
    normalisation keeps both terms comparable at lap_weight 1."""
    p, t = _as_tensor(pred), _as_tensor(truth)
    err = mse(p, t)
    if cfg.pyramid_depth == 0 or cfg.lap_weight == 0.0:
        return err
    lap = lap_loss(p, t, cfg.pyramid_depth, cfg.padding_mode)
    rows = int(np.prod(p.shape[:-1])) if p.data.ndim > 1 else 1
    norm = cfg.lap_weight / (padded_length(p.shape[-1], cfg.pyramid_depth) * rows)
    return ad.add(err, ad.scale(lap, norm))
