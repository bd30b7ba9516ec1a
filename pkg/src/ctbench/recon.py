"""Filtered back-projection, CGLS and limited-view angle samplings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ctbench.errors import DataError
from ctbench.gridio import Grid2D
from ctbench.projector import (
    ParallelGeometry,
    Sinogram,
    back_project,
    make_angle_grid,
    radon_forward,
)

PARENT_ANGLES = 50
SAMPLING_KINDS = ("full", "sampling1", "sampling2", "custom")
_ALIASES = {"s1": "sampling1", "s2": "sampling2"}


@dataclass(frozen=True, eq=False)
class SamplingScheme:
    """Subset of a parent angle grid (or explicit angles for ``custom``)."""

    kind: str
    angles: np.ndarray
    indices: np.ndarray | None = None
    n_parent: int | None = None

    def __post_init__(self):
        if self.kind not in SAMPLING_KINDS:
            raise DataError(f"unknown sampling kind {self.kind!r}")
        angles = np.array(self.angles, dtype=np.float64).ravel()
        angles.flags.writeable = False
        object.__setattr__(self, "angles", angles)
        if self.indices is not None:
            idx = np.array(self.indices, dtype=np.int64).ravel()
            if np.any(np.diff(idx) <= 0):
                raise DataError("sampling indices must be strictly increasing")
            if idx.size and (idx[0] < 0 or idx[-1] >= self.n_parent):
                raise DataError("sampling index outside the parent grid")
            idx.flags.writeable = False
            object.__setattr__(self, "indices", idx)

    @property
    def n_angles(self) -> int:
        return self.angles.size

    @property
    def angles_deg(self) -> np.ndarray:
        if self.indices is not None:
            # exact decimal degrees of the half-offset grid
            return (self.indices + 0.5) * 180.0 / self.n_parent
        return np.degrees(self.angles)

    @property
    def missing_indices(self) -> np.ndarray:
        if self.indices is None:
            raise DataError("custom samplings have no parent grid")
        return np.setdiff1d(np.arange(self.n_parent), self.indices)

    @property
    def missing_wedge_deg(self) -> float:
        """Total angular width of the unmeasured gaps, in degrees.

        Gaps are measured between neighbouring acquired angles on the
        half circle; a gap counts as missing when it exceeds the nominal
        spacing.
        """
        if self.indices is not None:
            idx = self.indices
            gaps = np.diff(np.append(idx, idx[0] + self.n_parent))
            return float(sum(180.0 * int(g) / self.n_parent for g in gaps if g > 1))
        a = np.sort(np.degrees(self.angles) % 180.0)
        gaps = np.diff(np.append(a, a[0] + 180.0))
        step = gaps.min()
        return float(gaps[gaps > 1.5 * step].sum())


def make_sampling(kind: str, parent_angles=None, angles=None) -> SamplingScheme:
    """Build a sampling on a 50-angle half-offset parent grid.

    ``sampling1`` keeps parent indices 10..39 (37.8 to 142.2 degrees);
    ``sampling2`` keeps 0..14 and 35..49 (1.8 to 52.2 and 127.8 to 178.2
    degrees). ``custom`` needs explicit ``angles`` in radians.
    """
    kind = _ALIASES.get(kind, kind)
    if kind == "custom":
        if angles is None:
            raise DataError("custom sampling needs explicit angles")
        return SamplingScheme("custom", angles)
    parent = make_angle_grid(PARENT_ANGLES) if parent_angles is None else np.asarray(parent_angles)
    n = parent.size
    if kind == "full":
        idx = np.arange(n)
    elif kind in ("sampling1", "sampling2"):
        if n != PARENT_ANGLES:
            raise DataError(f"{kind} is defined on a {PARENT_ANGLES}-angle parent grid")
        if kind == "sampling1":
            idx = np.arange(10, 40)
        else:
            idx = np.concatenate([np.arange(0, 15), np.arange(35, 50)])
    else:
        raise DataError(f"unknown sampling kind {kind!r}")
    return SamplingScheme(kind, parent[idx], idx, n)


def apply_sampling(sino: Sinogram, scheme: SamplingScheme) -> Sinogram:
    """Keep only the projections of ``sino`` that ``scheme`` selects."""
    if scheme.indices is not None and sino.geometry.n_angles == scheme.n_parent:
        return sino.select_angles(scheme.indices)
    pos = [int(np.argmin(np.abs(sino.angles - a))) for a in scheme.angles]
    if not np.allclose(sino.angles[pos], scheme.angles, atol=1e-9):
        raise DataError("sinogram lacks some of the sampling's angles")
    return sino.select_angles(pos)


@dataclass(frozen=True)
class ReconSettings:
    filter: str = "ramp"
    cutoff: float = 1.0
    iterations: int = 15
    output_size: int | None = None

    def __post_init__(self):
        if self.filter not in ("ramp", "none"):
            raise DataError(f"unknown filter {self.filter!r}")
        if not 0 < self.cutoff <= 1:
            raise DataError("cutoff must lie in (0, 1]")
        if self.iterations < 1:
            raise DataError("iterations must be >= 1")


def _output_size(geo: ParallelGeometry, settings: ReconSettings) -> int:
    if settings.output_size is not None:
        return int(settings.output_size)
    return int(round(geo.fov_width / geo.detector_spacing))


def ramp_filter(values: np.ndarray, spacing: float, cutoff: float = 1.0) -> np.ndarray:
    """Filter each row with ``|f|`` (cycles per unit length) up to
    ``cutoff`` times the Nyquist frequency. Rows are zero-padded to the next
    power of two at least twice their length."""
    values = np.asarray(values, dtype=np.float64)
    m = values.shape[-1]
    npad = 1 << max(1, math.ceil(math.log2(2 * m)))
    freqs = np.abs(np.fft.rfftfreq(npad, d=spacing))
    response = np.where(freqs <= cutoff * freqs[-1] * (1 + 1e-12), freqs, 0.0)
    spec = np.fft.rfft(values, n=npad, axis=-1)
    return np.fft.irfft(spec * response, n=npad, axis=-1)[..., :m]


def angular_weight(angles: np.ndarray) -> float:
    """Per-projection quadrature weight: the nominal angular step.

    Equals ``pi / n`` for a uniform full-range grid and keeps the same weight
    per projection for limited-view subsets of that grid.
    """
    if angles.size == 1:
        return math.pi
    a = np.sort(np.asarray(angles) % math.pi)
    gaps = np.diff(np.append(a, a[0] + math.pi))
    return float(np.median(gaps)) if gaps.size > 2 else float(gaps.min())


def pixel_back_project(values: np.ndarray, geo: ParallelGeometry, n: int) -> np.ndarray:
    """Pixel-driven back-projection with linear interpolation on the
    detector (zero outside it); unweighted sum over angles."""
    p = geo.fov_width / n
    half = (n - 1) / 2.0
    coords = (np.arange(n) - half) * p
    X, Y = np.meshgrid(coords, -coords)
    t = geo.bin_centers
    out = np.zeros((n, n))
    for k, theta in enumerate(geo.angles):
        proj = X * math.cos(theta) + Y * math.sin(theta)
        out += np.interp(proj, t, values[k], left=0.0, right=0.0)
    return out


def fbp(sino: Sinogram, settings: ReconSettings = ReconSettings()) -> Grid2D:
    """Filtered back-projection; missing angles are not compensated."""
    geo = sino.geometry
    if geo.n_angles == 0:
        raise DataError("no projection angles")
    values = np.asarray(sino.values)
    if settings.filter == "ramp":
        values = ramp_filter(values, geo.detector_spacing, settings.cutoff)
    n = _output_size(geo, settings)
    image = angular_weight(geo.angles) * pixel_back_project(values, geo, n)
    return Grid2D(image, pixel_size=geo.fov_width / n)


@dataclass(frozen=True, eq=False)
class CGLSResult:
    image: Grid2D
    residual_norms: np.ndarray
    iterations: int
    breakdown: bool = False
    history: list = field(default_factory=list, repr=False)


def cgls(
    sino: Sinogram,
    settings: ReconSettings = ReconSettings(),
    keep_history: bool = False,
) -> CGLSResult:
    """Conjugate gradient least squares for ``min ||A x - b||`` from ``x = 0``.

    ``residual_norms[k]`` is ``||A x_k - b||`` for ``k = 0 .. iterations``.
    Stops early, flagging ``breakdown``, when the search direction vanishes
    in data space.
    """
    geo = sino.geometry
    n = _output_size(geo, settings)
    b = np.asarray(sino.values, dtype=np.float64)

    def A(x):
        return radon_forward(x, geo).values

    def At(y):
        return back_project(Sinogram(geo, y), n).values

    x = np.zeros((n, n))
    r = b.copy()
    s = At(r)
    p = s.copy()
    gamma = float(np.vdot(s, s))
    norms = [float(np.linalg.norm(r))]
    history = [x.copy()] if keep_history else []
    breakdown = False
    it = 0
    for it in range(1, settings.iterations + 1):
        q = A(p)
        delta = float(np.vdot(q, q))
        if delta == 0.0 or gamma == 0.0:
            breakdown = True
            it -= 1
            break
        alpha = gamma / delta
        x = x + alpha * p
        r = r - alpha * q
        s = At(r)
        gamma_new = float(np.vdot(s, s))
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
        norms.append(float(np.linalg.norm(r)))
        if keep_history:
            history.append(x.copy())
    image = Grid2D(x, pixel_size=geo.fov_width / n)
    return CGLSResult(image, np.array(norms), it, breakdown, history)


def reconstruct(
    sino: Sinogram,
    method: str = "fbp",
    sampling: SamplingScheme | str | None = None,
    settings: ReconSettings = ReconSettings(),
) -> Grid2D:
    """Restrict ``sino`` to ``sampling`` and reconstruct with ``method``."""
    if sampling is not None:
        if isinstance(sampling, str):
            sampling = make_sampling(sampling, sino.angles)
        sino = apply_sampling(sino, sampling)
    if method == "fbp":
        return fbp(sino, settings)
    if method == "cgls":
        return cgls(sino, settings).image
    raise DataError(f"unknown reconstruction method {method!r}")
