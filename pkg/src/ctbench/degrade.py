"""Measurement degradation: additive Gaussian noise and scatter-kernel
superposition on parallel-beam log data."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ctbench.errors import DataError
from ctbench.projector import Sinogram

#: Slice ranges (inclusive, 0-based) scattered in a 668-slice stack.
SCATTER_SLICE_RANGES = ((195, 214), (365, 404), (525, 544))
SCATTER_REFERENCE_SLICES = 668
DEFAULT_ALPHA = 5.0
DEFAULT_NOISE_FRACTION = 0.05

# Amplitude scale of the default kernel table; gives a peak scatter field of
# about 5% of I0 at alpha=1 on the default 256^2 phantom.
DEFAULT_A0 = 0.0026


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def add_gaussian_noise(sino: Sinogram, fraction: float, seed: int) -> Sinogram:
    """Add i.i.d. zero-mean Gaussian noise with standard deviation
    ``fraction * |mean(sino)|``."""
    if fraction < 0:
        raise DataError("noise fraction must be non-negative")
    values = np.asarray(sino.values)
    if values.size == 0:
        raise DataError("empty sinogram")
    if fraction == 0:
        return sino.with_values(values)
    sigma = fraction * abs(float(values.mean()))
    noise = _rng(seed).normal(0.0, sigma, size=values.shape)
    return sino.with_values(values + noise)


@dataclass(frozen=True, eq=False)
class ScatterKernelTable:
    """Thickness-indexed two-Gaussian scatter kernel parameters.

    ``A`` and ``B`` are amplitudes per unit detector length, relative to the
    unattenuated intensity ``I0``; ``sigma1`` and ``sigma2`` are standard
    deviations in detector length units.
    """

    thickness: np.ndarray
    A: np.ndarray
    B: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        cols = {}
        for name in ("thickness", "A", "B", "sigma1", "sigma2"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True).ravel()
            arr.flags.writeable = False
            cols[name] = arr
            object.__setattr__(self, name, arr)
        n = cols["thickness"].size
        if n == 0:
            raise DataError("empty scatter kernel table")
        if any(c.size != n for c in cols.values()):
            raise DataError("kernel table columns differ in length")
        if not all(np.all(np.isfinite(c)) for c in cols.values()):
            raise DataError("kernel table contains non-finite values")
        if np.any(np.diff(cols["thickness"]) <= 0):
            raise DataError("kernel thickness must be strictly increasing")
        if np.any(cols["A"] < 0) or np.any(cols["B"] < 0):
            raise DataError("kernel amplitudes must be non-negative")
        if np.any(cols["sigma1"] <= 0) or np.any(cols["sigma1"] > cols["sigma2"]):
            raise DataError("kernel widths must satisfy 0 < sigma1 <= sigma2")

    def __len__(self):
        return self.thickness.size


def default_kernel_table(a0: float = DEFAULT_A0, n_knots: int = 41) -> ScatterKernelTable:
    """Phenomenological water-like table on thickness ``[0, 10]``:
    ``A = a0 t exp(-0.2 t)``, ``B = 0.3 A``, ``sigma1 = 2 + 0.8 t``,
    ``sigma2 = 4 sigma1``."""
    t = np.linspace(0.0, 10.0, n_knots)
    A = a0 * t * np.exp(-0.2 * t)
    s1 = 2.0 + 0.8 * t
    return ScatterKernelTable(t, A, 0.3 * A, s1, 4.0 * s1)


def kernel_params(table: ScatterKernelTable, thickness):
    """Piecewise-linear ``(A, B, sigma1, sigma2)`` at ``thickness``, clamped
    to the end rows. Accepts scalars or arrays."""
    if len(table) == 0:
        raise DataError("empty scatter kernel table")
    t = np.asarray(thickness, dtype=np.float64)
    if np.any(t < 0):
        raise DataError("thickness must be non-negative")
    out = tuple(
        np.interp(t, table.thickness, col) for col in (table.A, table.B, table.sigma1, table.sigma2)
    )
    if t.ndim == 0:
        return tuple(float(v) for v in out)
    return out


def scatter_field(
    row: np.ndarray,
    bin_centers: np.ndarray,
    table: ScatterKernelTable,
    alpha: float,
    I0: float = 1.0,
) -> np.ndarray:
    """Scatter intensity on every bin from all pencil beams of one projection.

    Each bin ``u`` acts as a pencil beam whose kernel parameters are looked
    up at thickness ``row[u]`` (the log attenuation along it); contributions
    are integrated over the detector with the bin pitch as measure.
    """
    row = np.asarray(row, dtype=np.float64)
    u = np.asarray(bin_centers, dtype=np.float64)
    du = float(u[1] - u[0]) if u.size > 1 else 1.0
    A, B, s1, s2 = kernel_params(table, np.maximum(row, 0.0))
    diff2 = (u[None, :] - u[:, None]) ** 2  # [source u, target u']
    kern = A[:, None] * np.exp(-diff2 / (2 * s1[:, None] ** 2))
    kern += B[:, None] * np.exp(-diff2 / (2 * s2[:, None] ** 2))
    return (I0 * alpha * du) * kern.sum(axis=0)


def apply_scatter(
    sino: Sinogram,
    table: ScatterKernelTable | None = None,
    alpha: float = DEFAULT_ALPHA,
    I0: float = 1.0,
) -> Sinogram:
    """Add kernel-superposition scatter to every projection of ``sino``.

    Each row is converted to intensity, the scatter field is added and the
    result is log-normalised again, so the output never exceeds the input.
    ``alpha == 0`` returns the input unchanged.
    """
    if alpha < 0:
        raise DataError("alpha must be non-negative")
    if not I0 > 0:
        raise DataError("I0 must be positive")
    if alpha == 0:
        return sino.with_values(sino.values)
    table = default_kernel_table() if table is None else table
    P = np.asarray(sino.values)
    u = sino.geometry.bin_centers
    out = np.empty_like(P)
    for k in range(P.shape[0]):
        S = scatter_field(P[k], u, table, alpha, I0)
        # -ln((I0 e^-P + S) / I0) = P - ln(1 + (S / I0) e^P), in a form whose
        # subtracted term is never negative
        with np.errstate(divide="ignore"):
            t = P[k] + np.log(S / I0)
        out[k] = P[k] - np.logaddexp(0.0, t)
    return sino.with_values(out)


def scatter_slice_indices(
    n_slices: int = SCATTER_REFERENCE_SLICES,
    ranges: Sequence[tuple[int, int]] = SCATTER_SLICE_RANGES,
    reference: int = SCATTER_REFERENCE_SLICES,
) -> np.ndarray:
    """Slice indices that receive scatter in a stack of ``n_slices``.

    The inclusive ranges are defined on a ``reference``-slice stack and are
    mapped proportionally onto shorter or longer stacks.
    """
    if n_slices < 1:
        raise DataError("n_slices must be >= 1")
    idx = np.concatenate([np.arange(a, b + 1) for a, b in ranges])
    if n_slices != reference:
        idx = np.floor(idx * (n_slices / reference)).astype(np.int64)
    return np.unique(idx[(idx >= 0) & (idx < n_slices)])


_KERNEL_HEADER = ["thickness", "A", "B", "sigma1", "sigma2"]


def read_kernel_table(path) -> ScatterKernelTable:
    path = Path(path)
    rows = [r for r in csv.reader(io.StringIO(path.read_text(encoding="utf-8"))) if r]
    if not rows or [h.strip() for h in rows[0]] != _KERNEL_HEADER:
        raise DataError(f"{path}: header must be {','.join(_KERNEL_HEADER)}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != 5:
        raise DataError(f"{path}: every row needs five values")
    return ScatterKernelTable(*data.T)


def write_kernel_table(table: ScatterKernelTable, path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_KERNEL_HEADER)
    for row in zip(table.thickness, table.A, table.B, table.sigma1, table.sigma2):
        w.writerow([repr(float(v)) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    return path
