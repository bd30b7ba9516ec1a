"""Parallel-beam geometry, Joseph-style ray transform and its exact adjoint.

Coordinates: an ``n x n`` image of pixel size ``p`` covers the centred square
``[-n p / 2, n p / 2]^2``. Column ``j`` sits at ``x = (j - (n-1)/2) p`` and row
``i`` at ``y = ((n-1)/2 - i) p`` (row 0 is the top). Detector bin ``m`` of an
``M``-bin detector with spacing ``d`` sits at ``t = (m - (M-1)/2) d``. The ray
for angle ``theta`` and offset ``t`` is the line ``x cos(theta) + y sin(theta) = t``.

Each ray is marched along whichever image axis it crosses more steeply; at
every step the image is linearly interpolated between the two neighbouring
pixel centres (zero outside the grid) and weighted by the step length.
:func:`back_project` scatters with exactly the same weights, so the pair is
an exact adjoint up to floating point summation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ctbench.errors import DataError
from ctbench.gridio import Grid2D, read_grid, write_grid

_SQRT2 = math.sqrt(2.0)


def make_angle_grid(n_angles: int) -> np.ndarray:
    """``n_angles`` uniformly spaced angles in [0, pi) with half-step offset,
    ``theta_k = (k + 1/2) pi / n_angles``."""
    if n_angles < 1:
        raise DataError("n_angles must be >= 1")
    return (np.arange(n_angles) + 0.5) * (np.pi / n_angles)


@dataclass(frozen=True, eq=False)
class ParallelGeometry:
    angles: np.ndarray
    detector_bins: int
    detector_spacing: float
    fov_width: float

    def __post_init__(self):
        angles = np.array(self.angles, dtype=np.float64, copy=True).ravel()
        if angles.size == 0:
            raise DataError("geometry needs at least one angle")
        if np.any(angles < 0) or np.any(angles >= np.pi):
            raise DataError("angles must lie in [0, pi)")
        if np.any(np.diff(angles) <= 0):
            raise DataError("angles must be strictly increasing")
        if self.detector_bins < 1 or self.detector_spacing <= 0 or self.fov_width <= 0:
            raise DataError("detector bins, spacing and field of view must be positive")
        if self.detector_bins * self.detector_spacing < self.fov_width * _SQRT2 * (1 - 1e-12):
            raise DataError(
                f"detector extent {self.detector_bins * self.detector_spacing:g} does not "
                f"cover the image diagonal {self.fov_width * _SQRT2:g}"
            )
        angles.flags.writeable = False
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "detector_bins", int(self.detector_bins))
        object.__setattr__(self, "detector_spacing", float(self.detector_spacing))
        object.__setattr__(self, "fov_width", float(self.fov_width))

    @property
    def n_angles(self) -> int:
        return self.angles.size

    @property
    def bin_centers(self) -> np.ndarray:
        m = self.detector_bins
        return (np.arange(m) - (m - 1) / 2.0) * self.detector_spacing

    def with_angles(self, angles) -> "ParallelGeometry":
        return ParallelGeometry(angles, self.detector_bins, self.detector_spacing, self.fov_width)

    def __eq__(self, other):
        if not isinstance(other, ParallelGeometry):
            return NotImplemented
        return (
            np.array_equal(self.angles, other.angles)
            and self.detector_bins == other.detector_bins
            and self.detector_spacing == other.detector_spacing
            and self.fov_width == other.fov_width
        )


def parallel_geometry(
    n_pixels: int,
    n_angles: int | np.ndarray = 50,
    pixel_size: float = 1.0,
    detector_bins: int | None = None,
    detector_spacing: float | None = None,
) -> ParallelGeometry:
    """Default geometry for an ``n_pixels`` square image.

    The detector gets ``ceil(sqrt(2) n)`` bins at the pixel pitch unless
    overridden. ``n_angles`` may be an explicit angle array.
    """
    angles = make_angle_grid(n_angles) if np.isscalar(n_angles) else np.asarray(n_angles)
    if detector_spacing is None:
        detector_spacing = pixel_size
    if detector_bins is None:
        detector_bins = math.ceil(_SQRT2 * n_pixels * pixel_size / detector_spacing - 1e-9)
    return ParallelGeometry(angles, detector_bins, detector_spacing, n_pixels * pixel_size)


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Line integrals, one row per angle and one column per detector bin."""

    geometry: ParallelGeometry
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        shape = (self.geometry.n_angles, self.geometry.detector_bins)
        if vals.shape != shape:
            raise DataError(f"sinogram shape {vals.shape} != geometry shape {shape}")
        if not np.all(np.isfinite(vals)):
            raise DataError("sinogram contains non-finite values")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def angles(self) -> np.ndarray:
        return self.geometry.angles

    def with_values(self, values) -> "Sinogram":
        return Sinogram(self.geometry, values)

    def select_angles(self, indices) -> "Sinogram":
        indices = np.asarray(indices, dtype=np.int64)
        return Sinogram(self.geometry.with_angles(self.angles[indices]), self.values[indices])

    def __eq__(self, other):
        if not isinstance(other, Sinogram):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.values, other.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


def _image_array(image) -> tuple[np.ndarray, float | None]:
    if isinstance(image, Grid2D):
        return np.asarray(image.values, dtype=np.float64), image.pixel_size
    arr = np.asarray(image, dtype=np.float64)
    return arr, None


def _check_square(arr: np.ndarray) -> int:
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DataError(f"image must be square, got shape {arr.shape}")
    return arr.shape[0]


def _ray_weights(theta: float, t: np.ndarray, n: int, p: float):
    """Interpolation stencil of every ray at one angle.

    Returns ``(row_lo, col_lo, row_hi, col_hi, w_lo, w_hi)`` arrays of shape
    ``(bins, n)`` in zero-padded image coordinates (valid indices
    ``0 .. n + 1``), with the step length already folded into the weights.
    """
    c, s = math.cos(theta), math.sin(theta)
    half = (n - 1) / 2.0
    steps = np.arange(n)
    if abs(s) >= abs(c):
        # march across columns, interpolate between rows
        x = (steps - half) * p
        y = (t[:, None] - x[None, :] * c) / s
        frac = half - y / p
        step = p / abs(s)
        lo = np.floor(frac)
        w_hi = frac - lo
        lo = lo.astype(np.int64)
        cols = np.broadcast_to(steps[None, :] + 1, lo.shape)
        row_lo, row_hi = lo + 1, lo + 2
        col_lo = col_hi = cols
    else:
        # march across rows, interpolate between columns
        y = (half - steps) * p
        x = (t[:, None] - y[None, :] * s) / c
        frac = x / p + half
        step = p / abs(c)
        lo = np.floor(frac)
        w_hi = frac - lo
        lo = lo.astype(np.int64)
        rows = np.broadcast_to(steps[None, :] + 1, lo.shape)
        col_lo, col_hi = lo + 1, lo + 2
        row_lo = row_hi = rows
    w_lo = (1.0 - w_hi) * step
    w_hi = w_hi * step
    # neighbours outside the padded grid carry zero image mass
    lo_ok = (lo >= -1) & (lo <= n - 1)
    hi_ok = (lo >= -2) & (lo <= n - 2)
    w_lo = np.where(lo_ok, w_lo, 0.0)
    w_hi = np.where(hi_ok, w_hi, 0.0)
    clip = lambda a: np.clip(a, 0, n + 1)  # noqa: E731
    return clip(row_lo), clip(col_lo), clip(row_hi), clip(col_hi), w_lo, w_hi


def _forward_array(img: np.ndarray, geometry: ParallelGeometry, p: float) -> np.ndarray:
    n = img.shape[0]
    padded = np.zeros((n + 2, n + 2))
    padded[1:-1, 1:-1] = img
    t = geometry.bin_centers
    out = np.empty((geometry.n_angles, geometry.detector_bins))
    for k, theta in enumerate(geometry.angles):
        r0, c0, r1, c1, w0, w1 = _ray_weights(theta, t, n, p)
        vals = w0 * padded[r0, c0] + w1 * padded[r1, c1]
        out[k] = vals.sum(axis=1)
    return out


def _back_array(sino: np.ndarray, geometry: ParallelGeometry, n: int, p: float) -> np.ndarray:
    size = (n + 2) * (n + 2)
    acc = np.zeros(size)
    t = geometry.bin_centers
    for k, theta in enumerate(geometry.angles):
        r0, c0, r1, c1, w0, w1 = _ray_weights(theta, t, n, p)
        y = sino[k][:, None]
        acc += np.bincount((r0 * (n + 2) + c0).ravel(), (w0 * y).ravel(), size)
        acc += np.bincount((r1 * (n + 2) + c1).ravel(), (w1 * y).ravel(), size)
    return acc.reshape(n + 2, n + 2)[1:-1, 1:-1]


def _pixel_size_for(n: int, geometry: ParallelGeometry) -> float:
    return geometry.fov_width / n


def radon_forward(image, geometry: ParallelGeometry) -> Sinogram:
    """Discrete parallel-beam ray transform of a square image.

    The image fills the geometry's field of view, so its pixel size is
    ``fov_width / n``; a :class:`Grid2D` with a conflicting pixel size is
    rejected.
    """
    img, grid_p = _image_array(image)
    n = _check_square(img)
    p = _pixel_size_for(n, geometry)
    if grid_p is not None and not math.isclose(grid_p, p, rel_tol=1e-9):
        raise DataError(
            f"image pixel size {grid_p:g} does not fill field of view {geometry.fov_width:g}"
        )
    return Sinogram(geometry, _forward_array(img, geometry, p))


def back_project(sino: Sinogram, n_pixels: int | None = None) -> Grid2D:
    """Exact adjoint of :func:`radon_forward` onto an ``n_pixels`` square grid.

    ``n_pixels`` defaults to a grid whose pixel pitch equals the detector
    pitch.
    """
    geo = sino.geometry
    if n_pixels is None:
        n_pixels = int(round(geo.fov_width / geo.detector_spacing))
    p = _pixel_size_for(n_pixels, geo)
    return Grid2D(_back_array(np.asarray(sino.values), geo, n_pixels, p), pixel_size=p)


def upsample_bilinear(image, factor: int) -> Grid2D:
    """Bilinear upsampling by an integer factor over the same field of view.

    Fine pixel centres map to coarse index ``(j + 1/2) / factor - 1/2``;
    positions beyond the outermost coarse centres are clamped (edge
    replication).
    """
    factor = int(factor)
    if factor < 1:
        raise DataError("upsampling factor must be >= 1")
    arr, p = _image_array(image)
    p = 1.0 if p is None else p
    if factor == 1:
        return Grid2D(arr, pixel_size=p)
    h, w = arr.shape
    out = _interp_axis(_interp_axis(arr, factor, axis=0), factor, axis=1)
    return Grid2D(out, pixel_size=p / factor)


def _interp_axis(arr: np.ndarray, factor: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    u = (np.arange(n * factor) + 0.5) / factor - 0.5
    u = np.clip(u, 0.0, n - 1)
    lo = np.minimum(np.floor(u).astype(np.int64), max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    frac = u - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def project_without_inverse_crime(image, geometry: ParallelGeometry, factor: int = 2) -> Sinogram:
    """Simulate measurements of ``image`` on ``geometry`` through a finer model.

    The image is upsampled by ``factor``, projected onto a detector with
    ``factor`` times as many bins at ``1/factor`` the pitch, and adjacent fine
    bins are averaged back onto the coarse detector. The result therefore does
    not lie in the range of the coarse-grid operator.
    """
    fine = upsample_bilinear(image, factor)
    if factor == 1:
        return radon_forward(fine.values, geometry)
    fine_geo = ParallelGeometry(
        geometry.angles,
        geometry.detector_bins * factor,
        geometry.detector_spacing / factor,
        geometry.fov_width,
    )
    fine_sino = radon_forward(fine.values, fine_geo).values
    coarse = fine_sino.reshape(geometry.n_angles, geometry.detector_bins, factor).mean(axis=2)
    return Sinogram(geometry, coarse)


# --------------------------------------------------------------------------
# Beer-Lambert conversions


def to_intensity(P, I0: float = 1.0) -> np.ndarray:
    """Transmitted intensity ``I0 exp(-P)``."""
    if not I0 > 0:
        raise DataError("I0 must be positive")
    return I0 * np.exp(-np.asarray(P, dtype=np.float64))


def to_logdata(intensity, I0: float = 1.0, geometry: ParallelGeometry | None = None):
    """Line integrals ``-ln(I / I0)``; returns a :class:`Sinogram` when a
    geometry is given, else an array."""
    if not I0 > 0:
        raise DataError("I0 must be positive")
    I = np.asarray(intensity, dtype=np.float64)
    bad = np.argwhere(~(I > 0))
    if bad.size:
        idx = tuple(int(v) for v in bad[0])
        raise DataError(f"non-positive intensity {I[idx]!r} at bin {idx}")
    P = -np.log(I / I0)
    return Sinogram(geometry, P) if geometry is not None else P


def normalize_flat_dark(raw, flat, dark) -> np.ndarray:
    """Flat/dark-field corrected line integrals ``-ln((raw - dark) / (flat - dark))``."""
    raw, flat, dark = (np.asarray(a, dtype=np.float64) for a in (raw, flat, dark))
    signal = raw - dark
    reference = np.broadcast_to(flat - dark, signal.shape)
    if np.any(reference <= 0):
        raise DataError("flat field must exceed dark field everywhere")
    return to_logdata(signal / reference, 1.0)


# --------------------------------------------------------------------------
# sinogram files


def write_sinogram(sino: Sinogram, path):
    geo = sino.geometry
    extra = {
        "kind": "sinogram",
        "angles_deg": ",".join(repr(float(a)) for a in np.degrees(geo.angles)),
        "angles_rad": ",".join(repr(float(a)) for a in geo.angles),
        "detector_spacing": repr(geo.detector_spacing),
        "fov_width": repr(geo.fov_width),
    }
    return write_grid(Grid2D(sino.values, pixel_size=geo.detector_spacing), path, extra=extra)


def read_sinogram(path) -> Sinogram:
    grid = read_grid(path)
    meta = grid.meta
    if meta.get("kind") != "sinogram":
        raise DataError(f"{path}: not a sinogram container")
    try:
        if "angles_rad" in meta:
            angles = [float(v) for v in meta["angles_rad"].split(",")]
        else:
            angles = np.radians([float(v) for v in meta["angles_deg"].split(",")])
        geo = ParallelGeometry(
            angles,
            grid.width,
            float(meta["detector_spacing"]),
            float(meta["fov_width"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad sinogram header ({exc})") from None
    return Sinogram(geo, grid.values.astype(np.float64))
