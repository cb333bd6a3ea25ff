"""Two-axis rotary position embedding over a patch grid.

Head channels are split into adjacent (even, odd) pairs; the first half of
the pairs rotate by row * theta_k, the second half by col * theta_k, with a
geometric frequency ladder shared by both axes. Rotation at (0, 0) is the
identity, so condition tokens pinned there are untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class GridPos:
    """Integer (row, col) position on the patch grid."""

    i: int
    j: int


class RopeTable:
    """Per-axis rotation frequencies for one head dimension."""

    def __init__(self, head_dim: int, base: float = 10000.0):
        if head_dim <= 0 or head_dim % 4 != 0:
            raise DimensionError(f"head_dim must be a positive multiple of 4, got {head_dim}")
        self.head_dim = head_dim
        half = head_dim // 2
        k = np.arange(half // 2)
        # one ladder of strictly decreasing frequencies, reused for both axes
        self.freqs = base ** (-2.0 * k / half)

    def angles(self, pos: GridPos) -> np.ndarray:
        """Pair angles for one grid position: row-axis pairs then col-axis."""
        return np.concatenate([pos.i * self.freqs, pos.j * self.freqs])


def rotate(vec, pos: GridPos, table: RopeTable) -> np.ndarray:
    """Rotate one head-dim vector by its grid position's pair angles."""
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (table.head_dim,):
        raise DimensionError(f"rotate: vec {v.shape} vs head_dim {table.head_dim}")
    ang = table.angles(pos)
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty_like(v)
    out[0::2] = v[0::2] * c - v[1::2] * s
    out[1::2] = v[0::2] * s + v[1::2] * c
    return out


def relative_score(q, k, pq: GridPos, pk: GridPos, table: RopeTable) -> float:
    """Attention logit between a rotated query and a rotated key."""
    return float(rotate(q, pq, table) @ rotate(k, pk, table))


def center_patch_index(bbox, grid_rows: int, grid_cols: int) -> GridPos:
    """Grid cell containing the box center, clamped to the grid edge.

    bbox is (x1, y1, x2, y2) in normalized [0, 1] coordinates.
    """
    x1, y1, x2, y2 = (float(v) for v in bbox)
    if not (x1 < x2 and y1 < y2):
        raise ValidationError(f"degenerate bbox ({x1}, {y1}, {x2}, {y2})")
    if min(x1, y1) < 0.0 or max(x2, y2) > 1.0:
        raise ValidationError(f"bbox outside [0, 1]: ({x1}, {y1}, {x2}, {y2})")
    cx = 0.5 * (x1 + x2)
    cy = 0.5 * (y1 + y2)
    i = min(int(np.floor(cy * grid_rows)), grid_rows - 1)
    j = min(int(np.floor(cx * grid_cols)), grid_cols - 1)
    return GridPos(i, j)


def stream_cos_sin(positions, table: RopeTable, heads: int):
    """Stacked (cos, sin) tables for a token stream, tiled across heads.

    Returns two arrays of shape (len(positions), heads * head_dim // 2),
    ready for the pairwise rotation op on full model-width activations.
    """
    angles = np.stack([np.tile(table.angles(p), heads) for p in positions])
    return np.cos(angles), np.sin(angles)
