"""Random checkerboard coefficient fields and their reference-frame transforms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import CoarsePartition

__all__ = [
    "FieldDistribution",
    "CoefficientField",
    "ElementCoefficients",
    "philox4x64",
    "sample_field",
    "constant_field",
    "element_coefficients",
    "dump_field_csv",
]

GENERATOR_ID = "philox4x64-10/cell-keyed"

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_FIELD_TAG = 0x686F6D6F67656E69  # distinguishes this stream family from others keyed by the same seed


def _mulhilo(a: np.ndarray, b: np.uint64):
    a_lo, a_hi = a & _LO32, a >> _S32
    b_lo, b_hi = b & _LO32, b >> _S32
    lo_lo = a_lo * b_lo
    hi_lo = a_hi * b_lo
    lo_hi = a_lo * b_hi
    cross = (lo_lo >> _S32) + (hi_lo & _LO32) + lo_hi
    hi = a_hi * b_hi + (hi_lo >> _S32) + (cross >> _S32)
    return hi, a * b


def philox4x64(counter: np.ndarray, key) -> np.ndarray:
    """Philox4x64-10 block function, vectorised over rows of ``counter``.

    ``counter`` has shape ``(..., 4)`` (uint64); ``key`` is a pair of uint64.
    Same bijection as ``numpy.random.Philox``.
    """
    c = np.asarray(counter, dtype=np.uint64)
    c0, c1, c2, c3 = (c[..., i].copy() for i in range(4))
    k0, k1 = np.uint64(key[0]), np.uint64(key[1])
    with np.errstate(over="ignore"):
        for r in range(10):
            hi0, lo0 = _mulhilo(c0, _M0)
            hi1, lo1 = _mulhilo(c2, _M1)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
            if r < 9:
                k0 = k0 + _W0
                k1 = k1 + _W1
    return np.stack([c0, c1, c2, c3], axis=-1)


def _zigzag(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.int64)
    return np.where(z >= 0, 2 * z, -2 * z - 1).astype(np.uint64)


@dataclass(frozen=True)
class FieldDistribution:
    """Each diagonal entry is ``alpha`` or ``beta`` with probability 1/2."""

    dimension: int
    alpha: float
    beta: float

    def __post_init__(self):
        if self.dimension not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if not (0 < self.alpha <= self.beta):
            raise ValueError("need 0 < alpha <= beta")

    @property
    def contrast(self) -> float:
        return self.beta / self.alpha


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Diagonal coefficient ``diag`` per lattice cell of ``[lo, hi)``.

    ``diag`` has shape ``(*(hi - lo), d)``; index it with ``z - lo``.
    """

    box_lo: tuple[int, ...]
    box_hi: tuple[int, ...]
    diag: np.ndarray
    seed: int | None = None
    generator: str = GENERATOR_ID

    @property
    def dimension(self) -> int:
        return len(self.box_lo)

    def at(self, cells: np.ndarray) -> np.ndarray:
        """Diagonal entries for an ``(m, d)`` array of cell coordinates."""
        cells = np.asarray(cells, dtype=np.int64)
        rel = cells - np.asarray(self.box_lo)
        if np.any(rel < 0) or np.any(rel >= np.asarray(self.box_hi) - np.asarray(self.box_lo)):
            raise ValueError("cell outside the coefficient field box")
        return self.diag[tuple(rel.T)]


def _cell_grid(box_lo, box_hi) -> np.ndarray:
    axes = [np.arange(a, b) for a, b in zip(box_lo, box_hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def sample_field(dist: FieldDistribution, box_lo, box_hi, seed: int) -> CoefficientField:
    """Draw the checkerboard law on every cell of ``[lo, hi)``.

    Each entry is a pure function of ``(seed, z, i)``: the Philox counter is
    built from the absolute cell coordinate, so overlapping boxes drawn with
    the same seed agree cell by cell.
    """
    d = dist.dimension
    box_lo, box_hi = tuple(int(x) for x in box_lo), tuple(int(x) for x in box_hi)
    if len(box_lo) != d or len(box_hi) != d or any(b <= a for a, b in zip(box_lo, box_hi)):
        raise ValueError("invalid box")
    z = _cell_grid(box_lo, box_hi)  # (..., d)
    shape = z.shape[:-1]
    ctr = np.zeros(shape + (d, 4), dtype=np.uint64)
    for axis in range(d):
        ctr[..., axis] = _zigzag(z[..., axis])[..., None]
    ctr[..., 3] = (np.arange(d, dtype=np.uint64) | np.uint64(d << 8))
    key = (np.uint64(int(seed) % 2**64), np.uint64(_FIELD_TAG))
    bits = philox4x64(ctr, key)[..., 0] >> np.uint64(63)
    diag = np.where(bits == 1, dist.beta, dist.alpha).astype(float)
    return CoefficientField(box_lo, box_hi, diag, int(seed))


def constant_field(box_lo, box_hi, diag_fn) -> CoefficientField:
    """Deterministic field; ``diag_fn(z)`` maps an ``(..., d)`` cell array to ``(..., d)`` values."""
    z = _cell_grid(box_lo, box_hi)
    diag = np.broadcast_to(np.asarray(diag_fn(z), dtype=float), z.shape).copy()
    return CoefficientField(tuple(box_lo), tuple(box_hi), diag, None, "deterministic")


@dataclass(frozen=True, eq=False)
class ElementCoefficients:
    """``c[K] = |det B_K| B_K^{-1} a_K B_K^{-T}`` and ``abs_det[K]`` per coarse element.

    ``flux[K] = |det B_K| B_K^{-1} a_K`` is kept too: it is what load vectors
    and flux averages need (``flux[K] @ xi``).
    """

    c: np.ndarray  # (m, d, d)
    abs_det: np.ndarray  # (m,)
    flux: np.ndarray  # (m, d, d)
    a_diag: np.ndarray  # (m, d)


def element_coefficients(field: CoefficientField, coarse: CoarsePartition) -> ElementCoefficients:
    a = field.at(coarse.cells)
    Binv = np.linalg.inv(coarse.B)
    det = coarse.abs_det
    flux = det[:, None, None] * Binv * a[:, None, :]
    c = flux @ np.transpose(Binv, (0, 2, 1))
    c = 0.5 * (c + np.transpose(c, (0, 2, 1)))
    return ElementCoefficients(c, det, flux, a)


def dump_field_csv(field: CoefficientField, path) -> None:
    d = field.dimension
    z = _cell_grid(field.box_lo, field.box_hi).reshape(-1, d)
    vals = field.diag.reshape(-1, d)
    names = ["z1", "z2", "z3"][:d] + ["b11", "b22", "b33"][:d]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for zz, vv in zip(z, vals):
            fh.write(",".join([str(int(x)) for x in zz] + [repr(float(x)) for x in vv]) + "\n")
