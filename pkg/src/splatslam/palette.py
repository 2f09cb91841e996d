"""Canonical-palette albedo quantization with a straight-through gradient.

Forcing every albedo channel onto a small fixed palette makes the per-primitive
illumination factor absorb lighting instead of the color. The quantizer is a
step function, so optimization runs it with a straight-through surrogate:
identity gradient inside [0, 1], zero where the raw value saturates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PaletteSpec:
    """levels bins per channel, bin width `step`, bin centers at offset + k*step."""

    levels: int = 4
    step: float = 0.25
    offset: float = 0.125

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.levels * self.step > 1.0 + 1e-12:
            raise ValueError("palette exceeds [0, 1]")

    def values(self) -> np.ndarray:
        return self.offset + self.step * np.arange(self.levels)


def quantize_channel(a_v: float, spec: PaletteSpec = PaletteSpec()) -> float:
    """Snap one channel value to its palette bin (input clamped to [0, 1] first)."""
    a = min(1.0, max(0.0, float(a_v)))
    idx = min(int(np.floor(spec.levels * a)), spec.levels - 1)
    return idx * spec.step + spec.offset


def quantize_albedo(a, spec: PaletteSpec = PaletteSpec()) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.array([quantize_channel(v, spec) for v in a])


def quantize_array(a, spec: PaletteSpec = PaletteSpec()) -> np.ndarray:
    """Vectorized palette snap for arrays of any shape."""
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    idx = np.minimum(np.floor(spec.levels * a), spec.levels - 1)
    return idx * spec.step + spec.offset


def ste_gradient(upstream, a) -> np.ndarray:
    """Straight-through backward rule: pass the gradient where the raw
    (pre-clamp) albedo lies in [0, 1], zero it where the clamp saturates."""
    upstream = np.asarray(upstream, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    mask = (a >= 0.0) & (a <= 1.0)
    return np.where(mask, upstream, 0.0)


def quantize_tensor(a: torch.Tensor, spec: PaletteSpec = PaletteSpec()) -> torch.Tensor:
    """Palette snap for tensors, no gradient semantics attached."""
    a = a.clamp(0.0, 1.0)
    idx = torch.floor(spec.levels * a).clamp(max=spec.levels - 1)
    return idx * spec.step + spec.offset


def ste_quantize(a: torch.Tensor, spec: PaletteSpec = PaletteSpec()) -> torch.Tensor:
    """Quantized forward with straight-through gradient (clamp supplies the
    saturation mask)."""
    a_c = a.clamp(0.0, 1.0)
    return a_c + (quantize_tensor(a_c, spec) - a_c).detach()
