"""Seeded apple-like phantoms with per-pixel defect labels.

A phantom slice is a disk of flesh wrapped in a thin skin ring, with a
five-lobed core in the middle and randomly placed elliptical defects.
Randomness comes from numpy's counter-based Philox generator, so a given
seed reproduces the same slice on every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ctbench.errors import DataError
from ctbench.gridio import (
    DEFAULT_CLASSES,
    DEFECT_CLASSES,
    DefectTable,
    Grid2D,
    LabeledSlice,
    VolumeStack,
)

BACKGROUND, HEALTHY = 0, 1


@dataclass(frozen=True)
class DefectSpec:
    """Placement rule for one defect class.

    Radii are fractions of the half field of view; ``offset`` is added to the
    underlying tissue attenuation.
    """

    name: str
    count_min: int
    count_max: int
    radius_min: float
    radius_max: float
    offset: float

    def __post_init__(self):
        if self.name not in DEFECT_CLASSES:
            raise DataError(f"unknown defect class {self.name!r}")
        if not 0 <= self.count_min <= self.count_max:
            raise DataError(f"{self.name}: bad count range")
        if not 0 < self.radius_min <= self.radius_max <= 1:
            raise DataError(f"{self.name}: radius fractions must lie in (0, 1]")
        if not math.isfinite(self.offset):
            raise DataError(f"{self.name}: offset must be finite")


def default_defects(flesh: float = 0.02) -> tuple[DefectSpec, ...]:
    return (
        DefectSpec("bitterpit", 0, 6, 0.012, 0.025, 0.3 * flesh),
        DefectSpec("holes", 0, 2, 0.02, 0.06, -0.98 * flesh),
        DefectSpec("rot", 0, 1, 0.10, 0.22, -0.3 * flesh),
        DefectSpec("browning", 1, 5, 0.03, 0.09, -0.1 * flesh),
    )


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 256
    field_of_view: float = 100.0
    outer_radius: float = 0.8
    skin_thickness: float = 0.025
    flesh_attenuation: float = 0.02
    skin_attenuation: float = 0.028
    core_radius: float = 0.18
    core_attenuation: float = 0.017
    defects: tuple[DefectSpec, ...] = field(default_factory=default_defects)
    seed: int = 0
    placement_retries: int = 200

    def __post_init__(self):
        if self.size < 2:
            raise DataError("phantom size must be >= 2")
        if not self.field_of_view > 0:
            raise DataError("field_of_view must be positive")
        for name in ("outer_radius", "core_radius"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise DataError(f"{name} must lie in (0, 1]")
        if not 0 <= self.skin_thickness < self.outer_radius:
            raise DataError("skin_thickness must be smaller than outer_radius")
        for name in ("flesh_attenuation", "skin_attenuation", "core_attenuation"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DataError(f"{name} must be finite and positive")
        object.__setattr__(self, "defects", tuple(self.defects))
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFF_FFFF_FFFF_FFFF)

    @property
    def pixel_size(self) -> float:
        return self.field_of_view / self.size


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def _coords(n: int) -> tuple[np.ndarray, np.ndarray]:
    half = (n - 1) / 2.0
    idx = np.arange(n)
    x = (idx - half) / (n / 2.0)
    y = (half - idx) / (n / 2.0)
    return np.meshgrid(x, y)


def generate_phantom(spec: PhantomSpec) -> LabeledSlice:
    """Render one labelled slice. Deterministic in ``spec`` (including seed)."""
    rng = _rng(spec.seed)
    X, Y = _coords(spec.size)
    r2 = X * X + Y * Y
    R = spec.outer_radius

    labels = np.zeros(X.shape, dtype=np.uint8)
    inside = r2 <= R * R
    labels[inside] = HEALTHY
    base = np.zeros(X.shape)
    base[inside] = spec.flesh_attenuation
    skin = inside & (r2 > (R - spec.skin_thickness) ** 2)
    base[skin] = spec.skin_attenuation

    phase = rng.uniform(0, 2 * np.pi)
    phi = np.arctan2(Y, X)
    core_r = spec.core_radius * R * (1 + 0.2 * np.cos(5 * phi + phase))
    base[inside & (r2 <= core_r**2)] = spec.core_attenuation

    image = base.copy()
    placed: list[tuple[float, float, float]] = []
    inner = R - spec.skin_thickness
    for d in spec.defects:
        count = int(rng.integers(d.count_min, d.count_max + 1))
        code = DEFAULT_CLASSES.index(d.name)
        for _ in range(count):
            cx, cy, a, b, rot = _place(rng, d, inner, placed, spec.placement_retries)
            placed.append((cx, cy, a))
            cr, sr = math.cos(rot), math.sin(rot)
            u = (X - cx) * cr + (Y - cy) * sr
            v = -(X - cx) * sr + (Y - cy) * cr
            blob = inside & ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
            labels[blob] = code
            image[blob] = base[blob] + d.offset

    # keep tissue strictly positive so that zero attenuation means background
    floor = 0.01 * spec.flesh_attenuation
    image[inside] = np.maximum(image[inside], floor)
    return LabeledSlice(Grid2D(image, pixel_size=spec.pixel_size), labels, DEFAULT_CLASSES)


def _place(rng, d: DefectSpec, inner: float, placed, retries: int):
    for _ in range(max(retries, 1)):
        a = rng.uniform(d.radius_min, d.radius_max)
        b = a * rng.uniform(0.5, 1.0)
        rot = rng.uniform(0, np.pi)
        room = inner - a
        if room <= 0:
            continue
        rho = room * math.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * np.pi)
        cx, cy = rho * math.cos(ang), rho * math.sin(ang)
        if all(math.hypot(cx - px, cy - py) > a + pa for px, py, pa in placed):
            return cx, cy, a, b, rot
    raise DataError(
        f"could not place a {d.name} defect of radius up to {d.radius_max:g} "
        f"after {retries} attempts"
    )


def _child_seed(ss: np.random.SeedSequence) -> int:
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def item_ids(n_items: int) -> list[str]:
    width = max(3, len(str(n_items)))
    return [f"{i + 1:0{width}d}" for i in range(n_items)]


def generate_collection(
    base_spec: PhantomSpec,
    n_items: int,
    slices_per_item: int,
    master_seed: int,
    healthy_fraction: float = 0.15,
) -> list[tuple[str, VolumeStack]]:
    """A collection of items, each a stack of labelled slices.

    Every item draws its own defect burden: with probability
    ``healthy_fraction`` it is defect free, otherwise each defect class is
    switched on independently with probability 0.75 and its count range is
    scaled by a random factor. Slices of one item share that burden and
    narrow towards the top and bottom of the stack.
    """
    if n_items < 1 or slices_per_item < 1:
        raise DataError("n_items and slices_per_item must be >= 1")
    root = np.random.SeedSequence(int(master_seed) & 0xFFFF_FFFF_FFFF_FFFF)
    out = []
    for item_id, item_ss in zip(item_ids(n_items), root.spawn(n_items)):
        burden_ss, *slice_ss = item_ss.spawn(1 + slices_per_item)
        rng = _rng(_child_seed(burden_ss))
        healthy = rng.uniform() < healthy_fraction
        defects = []
        for d in base_spec.defects:
            on = rng.uniform() < 0.75
            scale = rng.uniform(0.3, 1.6)
            if healthy or not on:
                continue
            hi = max(1, int(round(d.count_max * scale)))
            lo = min(int(round(d.count_min * scale)), hi)
            defects.append(replace(d, count_min=lo, count_max=hi))
        radius = base_spec.outer_radius * rng.uniform(0.88, 1.0)
        z = np.linspace(-0.55, 0.55, slices_per_item) if slices_per_item > 1 else [0.0]
        slices = []
        for zk, ss in zip(z, slice_ss):
            r = radius * math.sqrt(1 - zk * zk)
            spec = replace(
                base_spec,
                outer_radius=r,
                skin_thickness=min(base_spec.skin_thickness, 0.5 * r),
                defects=tuple(defects),
                seed=_child_seed(ss),
            )
            slices.append(generate_phantom(spec))
        out.append((item_id, VolumeStack(slices)))
    return out


def label_counts(sl: LabeledSlice) -> dict[str, int]:
    """Pixel count of every class of ``sl``."""
    counts = np.bincount(sl.labels.ravel(), minlength=len(sl.classes))
    return {name: int(c) for name, c in zip(sl.classes, counts)}


def build_defect_table(
    collection: Sequence[tuple[str, Sequence[LabeledSlice]]],
    defect_names: Sequence[str] = DEFECT_CLASSES,
) -> DefectTable:
    """Sum slice label counts per item; healthy and background go in extras."""
    if len(collection) == 0:
        raise DataError("empty collection")
    ids, rows, healthy, background = [], [], [], []
    for item_id, stack in collection:
        total: dict[str, int] = {}
        for sl in stack:
            for k, v in label_counts(sl).items():
                total[k] = total.get(k, 0) + v
        ids.append(item_id)
        rows.append([total.get(name, 0) for name in defect_names])
        healthy.append(total.get("healthy", 0))
        background.append(total.get("background", 0))
    return DefectTable(
        ids, defect_names, np.array(rows).reshape(len(ids), len(defect_names)),
        {"healthy": healthy, "background": background},
    )


# --------------------------------------------------------------------------
# key=value spec files

_SCALARS = {
    "size": int,
    "field_of_view": float,
    "outer_radius": float,
    "skin_thickness": float,
    "flesh_attenuation": float,
    "skin_attenuation": float,
    "core_radius": float,
    "core_attenuation": float,
    "seed": int,
    "placement_retries": int,
}


def parse_phantom_spec(text: str) -> PhantomSpec:
    """Parse ``key=value`` lines.

    Scalars use the :class:`PhantomSpec` field names. Defects are given as
    ``defect.<class> = count_min,count_max,radius_min,radius_max,offset``;
    if any defect line is present, only the listed classes are used.
    """
    kwargs: dict[str, object] = {}
    defects = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("defect."):
                parts = [s.strip() for s in value.split(",")]
                if len(parts) != 5:
                    raise ValueError("defect needs five fields")
                defects.append(
                    DefectSpec(key[7:], int(parts[0]), int(parts[1]),
                               float(parts[2]), float(parts[3]), float(parts[4]))
                )
            elif key in _SCALARS:
                kwargs[key] = _SCALARS[key](value)
            else:
                raise DataError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    if defects:
        kwargs["defects"] = tuple(defects)
    elif "flesh_attenuation" in kwargs:
        kwargs["defects"] = default_defects(float(kwargs["flesh_attenuation"]))
    return PhantomSpec(**kwargs)


def read_phantom_spec(path) -> PhantomSpec:
    return parse_phantom_spec(Path(path).read_text(encoding="utf-8"))


def format_phantom_spec(spec: PhantomSpec) -> str:
    lines = [f"{k}={getattr(spec, k)!r}" for k in _SCALARS]
    for d in spec.defects:
        lines.append(
            f"defect.{d.name}={d.count_min},{d.count_max},"
            f"{d.radius_min!r},{d.radius_max!r},{d.offset!r}"
        )
    return "\n".join(lines) + "\n"
