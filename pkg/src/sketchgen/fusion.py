"""Combining the structural and textural sketches under parsing guidance.

Two schemes: a hard scheme selecting per pixel via a binary hair mask,
and a soft scheme taking a per-pixel convex combination weighted by the
hair probability. The soft result is clipped into the per-pixel envelope
[min(S_s, S_t), max(S_s, S_t)] so convexity survives float rounding.

Parsing maps arrive at the parsing network's half resolution; resize
them (ParsingMap.resized) to the sketch resolution before building a
FusionInput.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sketchgen.data import ParsingMap
from sketchgen.ops import ShapeError, as_tensor


@dataclass(frozen=True)
class FusionInput:
    """Structural sketch, textural sketch, and a congruent parsing map."""

    structural: np.ndarray
    textural: np.ndarray
    parsing: ParsingMap

    def __post_init__(self):
        object.__setattr__(self, "structural", as_tensor(self.structural))
        object.__setattr__(self, "textural", as_tensor(self.textural))
        s, t = self.structural, self.textural
        if s.shape[0] != 1 or t.shape[0] != 1:
            raise ShapeError(
                f"sketch maps must be single-channel, got {s.shape} and {t.shape}"
            )
        if s.shape != t.shape:
            raise ShapeError(f"sketch shapes differ: {s.shape} vs {t.shape}")
        if self.parsing.shape != s.shape[1:]:
            raise ShapeError(
                f"parsing map {self.parsing.shape} does not cover sketches {s.shape[1:]}"
            )


def binary_hair_map(parsing: ParsingMap) -> np.ndarray:
    """1 where hair probability is at least both others, 0 elsewhere.

    Ties go to hair.
    """
    f, h, b = parsing.p_face, parsing.p_hair, parsing.p_background
    return ((h >= f) & (h >= b)).astype(np.float64)


def hard_fuse(inp: FusionInput) -> np.ndarray:
    """Per-pixel binary selection: textural where the hair mask is set.

    Equivalent to (1 - P_l) * S_s + P_l * S_t, realized as a select so
    the untouched pixels pass through bitwise.
    """
    mask = binary_hair_map(inp.parsing)
    return np.where(mask == 1.0, inp.textural, inp.structural)


def soft_fuse(inp: FusionInput) -> np.ndarray:
    """Per-pixel convex combination weighted by the hair probability.

    S = (1 - P_h) * S_s + P_h * S_t, then clipped into the per-pixel
    [min, max] envelope of the two sketches: the arithmetic identity
    can drift a rounding step outside convexity, the clip cannot.
    """
    ph = inp.parsing.p_hair
    raw = (1.0 - ph) * inp.structural + ph * inp.textural
    lo = np.minimum(inp.structural, inp.textural)
    hi = np.maximum(inp.structural, inp.textural)
    return np.clip(raw, lo, hi)


def clamp_unit(sketch: np.ndarray) -> np.ndarray:
    """Clamp a fused sketch into [0, 1] for export."""
    return np.clip(sketch, 0.0, 1.0)


def max_adjacent_jump(sketch: np.ndarray) -> float:
    """Largest absolute difference between horizontally adjacent pixels.

    The boundary-smoothness comparison between the two fusion schemes is
    phrased in terms of this quantity along rows.
    """
    sketch = as_tensor(sketch)
    if sketch.shape[2] < 2:
        return 0.0
    return float(np.abs(np.diff(sketch, axis=2)).max())
