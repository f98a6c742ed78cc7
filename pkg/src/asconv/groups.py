"""Discrete roto-translation group p4 and its action on feature maps.

Conventions (fixed once, everything else derives from them):

* an element is ``(r, (tx, ty))`` with ``r`` quarter-turns mod 4 and an
  integer translation; ``tx`` shifts columns, ``ty`` shifts rows;
* the quarter-turn acts on translation pairs as ``(tx, ty) -> (-ty, tx)``;
* on pixel grids the quarter-turn moves ``(row, col)`` to ``(col, H-1-row)``,
  i.e. rotation about the array centre;
* actions use circular (toroidal) indexing, so they are exact bijections and
  the equivariance identities hold with no boundary caveats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonSquareRotation


def rotate_vec(r: int, t: tuple[int, int]) -> tuple[int, int]:
    """Apply ``r`` quarter-turns to an integer translation pair."""
    tx, ty = t
    for _ in range(r % 4):
        tx, ty = -ty, tx
    return tx, ty


@dataclass(frozen=True)
class P4Element:
    """One roto-translation: ``r`` quarter-turns followed by a translation."""

    r: int = 0
    t: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "r", self.r % 4)
        object.__setattr__(self, "t", (int(self.t[0]), int(self.t[1])))

    @classmethod
    def identity(cls) -> "P4Element":
        return cls(0, (0, 0))

    def compose(self, other: "P4Element") -> "P4Element":
        # semidirect product: (R1,t1)(R2,t2) = (R1 R2, R1 t2 + t1)
        rx, ry = rotate_vec(self.r, other.t)
        return P4Element(self.r + other.r, (rx + self.t[0], ry + self.t[1]))

    def inverse(self) -> "P4Element":
        rx, ry = rotate_vec(-self.r, self.t)
        return P4Element(-self.r, (-rx, -ry))

    def __mul__(self, other: "P4Element") -> "P4Element":
        return self.compose(other)


def _rot_spatial(f: np.ndarray, r: int) -> np.ndarray:
    """Quarter-turn action on the trailing two axes: out[q] = f[rot^-r q]."""
    r = r % 4
    if r == 0:
        return f.copy()
    if f.shape[-2] != f.shape[-1] and r % 2 == 1:
        raise NonSquareRotation(
            f"odd quarter-turn needs square spatial dims, got {f.shape[-2:]}")
    # (row, col) -> (col, H-1-row) is np.rot90 with k=-1 on these axes
    return np.ascontiguousarray(np.rot90(f, k=-r, axes=(-2, -1)))


def act_planar(g: P4Element, f: np.ndarray, padding: str = "circular") -> np.ndarray:
    """Transform a planar map: out(y) = f(P^-1 (y - x)).  Pure permutation."""
    if padding != "circular":
        raise ValueError("act_planar is defined for circular padding only")
    out = _rot_spatial(f, g.r)
    tx, ty = g.t
    if tx or ty:
        out = np.roll(out, shift=(ty, tx), axis=(-2, -1))
    return out


def act_group(g: P4Element, f: np.ndarray, padding: str = "circular") -> np.ndarray:
    """Transform a p4 map [..., 4, H, W]: out(R,y) = f(P^-1 R, P^-1 (y - x))."""
    if padding != "circular":
        raise ValueError("act_group is defined for circular padding only")
    if f.shape[-3] != 4:
        raise ValueError(f"expected orientation axis of size 4, got {f.shape}")
    out = np.roll(f, shift=g.r, axis=-3)  # orientation R picks slice R - r
    out = _rot_spatial(out, g.r)
    tx, ty = g.t
    if tx or ty:
        out = np.roll(out, shift=(ty, tx), axis=(-2, -1))
    return np.ascontiguousarray(out)


def rotate_filter_planar(psi: np.ndarray, r: int) -> np.ndarray:
    """Spatially rotate a filter: psi_P(d) = psi(P^-1 d) on the k x k grid."""
    return _rot_spatial(psi, r)


def transform_filter_p4(psi: np.ndarray, r: int) -> np.ndarray:
    """Transform a p4 filter [..., 4, k, k] by a rotation (as act_group)."""
    return act_group(P4Element(r), psi)


def window_offsets(k: int) -> np.ndarray:
    """Row-major (drow, dcol) offsets of a k x k window centred at 0."""
    m = k // 2
    offs = [(du - m, dv - m) for du in range(k) for dv in range(k)]
    return np.asarray(offs, dtype=np.int64)


def rotated_offset_index(k: int, r: int) -> np.ndarray:
    """Index table rho with rho[j] = window index of (r quarter-turns)(offset_j).

    Enumerating a window through ``offset[rho_r]`` visits the same set of
    offsets rotated by ``r``; this is how p4 layers evaluate rotated filters
    without permuting parameter arrays.
    """
    offs = window_offsets(k)
    m = k // 2
    table = np.empty(k * k, dtype=np.int64)
    for j, (du, dv) in enumerate(offs):
        # pixel-convention quarter-turn on centred (row, col) offsets:
        # (row, col) -> (col, -row), applied r times
        a, b = du, dv
        for _ in range(r % 4):
            a, b = b, -a
        table[j] = (a + m) * k + (b + m)
    return table
