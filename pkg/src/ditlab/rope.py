"""3D rotary position embedding over (frame, row, column) token coordinates.

Reference tokens get the spatially shifted variant: they sit on frame 0 but
their row/column coordinates are offset by the noise grid's height/width, so
no reference position ever coincides with a noise position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import Tensor, rotate_pairs


class PositionTriple(NamedTuple):
    t: int
    h: int
    w: int


def split_head_dim(head_dim: int) -> tuple[int, int, int]:
    """``ceil(d/3)`` rounded down to even for frame and row, remainder to column."""
    part = math.ceil(head_dim / 3)
    part -= part % 2
    rest = head_dim - 2 * part
    if head_dim % 2 or part <= 0 or rest <= 0 or rest % 2:
        raise ValueError(f"head_dim {head_dim} cannot be split into three positive even parts")
    return part, part, rest


@dataclass(frozen=True)
class RopeTable:
    dims: tuple[int, int, int]
    base: float
    cos: tuple[np.ndarray, np.ndarray, np.ndarray]
    sin: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def head_dim(self) -> int:
        return sum(self.dims)

    @property
    def limits(self) -> tuple[int, int, int]:
        return tuple(c.shape[0] - 1 for c in self.cos)


def axis_frequencies(dim: int, base: float = 10000.0) -> np.ndarray:
    return base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)


def build_rope(head_dim: int, max_t: int, max_h: int, max_w: int, base: float = 10000.0) -> RopeTable:
    """Precompute cos/sin tables for coordinates ``0..max_*`` inclusive on each axis."""
    dims = split_head_dim(head_dim)
    cos, sin = [], []
    for dim, limit in zip(dims, (max_t, max_h, max_w)):
        angles = np.outer(np.arange(limit + 1, dtype=np.float64), axis_frequencies(dim, base))
        cos.append(np.cos(angles))
        sin.append(np.sin(angles))
    return RopeTable(dims, base, tuple(cos), tuple(sin))


def rope_angles(positions: Sequence[PositionTriple], table: RopeTable) -> tuple[np.ndarray, np.ndarray]:
    """Per-token ``(cos, sin)`` arrays of shape ``[tokens, head_dim // 2]``."""
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    limits = table.limits
    for axis in range(3):
        if pos.size and (pos[:, axis].min() < 0 or pos[:, axis].max() > limits[axis]):
            raise ValueError(
                f"position on axis {'thw'[axis]} outside table range 0..{limits[axis]}"
            )
    cos = np.concatenate([table.cos[a][pos[:, a]] for a in range(3)], axis=1)
    sin = np.concatenate([table.sin[a][pos[:, a]] for a in range(3)], axis=1)
    return cos, sin


def apply_rope(
    x: Tensor,
    positions: Sequence[PositionTriple] | None,
    table: RopeTable,
    angles: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Rotate ``x[..., tokens, head_dim]`` by its token coordinates.

    Pass precomputed ``angles`` from :func:`rope_angles` to skip the table lookup.
    """
    if x.shape[-1] != table.head_dim:
        raise ValueError(f"head dim {x.shape[-1]} does not match table {table.head_dim}")
    if angles is None:
        if len(positions) != x.shape[-2]:
            raise ValueError(f"{len(positions)} positions for {x.shape[-2]} tokens")
        angles = rope_angles(positions, table)
    cos, sin = angles
    dtype = x.data.dtype
    return rotate_pairs(x, cos.astype(dtype, copy=False), sin.astype(dtype, copy=False))


def positions_for_noise(frames: int, height: int, width: int) -> list[PositionTriple]:
    return [
        PositionTriple(f, h, w)
        for f in range(frames)
        for h in range(height)
        for w in range(width)
    ]


def positions_for_reference(
    ref_height: int, ref_width: int, noise_height: int, noise_width: int
) -> list[PositionTriple]:
    return [
        PositionTriple(0, h + noise_height, w + noise_width)
        for h in range(ref_height)
        for w in range(ref_width)
    ]
