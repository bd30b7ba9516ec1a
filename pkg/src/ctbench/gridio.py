"""Grid and stack containers, the ``.meta``/``.raw`` file format and
defect-table CSV ingestion.

A grid on disk is a pair of files sharing a stem:

``<name>.meta``
    UTF-8 text, one ``key=value`` per line. Required keys are ``width``,
    ``height``, ``dtype`` (always ``f32``), ``order`` (``row-major``) and
    ``endianness`` (``little``). Extra keys are preserved as metadata.
``<name>.raw``
    ``width * height`` little-endian float32 samples, row-major.

Labelled slices add ``labels=u8`` and a ``classes`` code map to the sidecar
and store the class codes in ``<name>.lab`` (one unsigned byte per pixel).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ctbench.errors import DataError

#: Relative total-grey-value threshold below which a slice counts as empty.
EMPTY_SLICE_THRESHOLD = 1e-3

DEFAULT_CLASSES = ("background", "healthy", "bitterpit", "holes", "rot", "browning")
DEFECT_CLASSES = ("bitterpit", "holes", "rot", "browning")

_F32 = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Row-major 2D sample grid.

    ``values`` is stored as a read-only array of shape ``(height, width)``.
    """

    values: np.ndarray
    pixel_size: float = 1.0
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        arr = np.array(self.values, copy=True)
        if arr.ndim != 2:
            raise DataError(f"grid must be 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise DataError("grid contains non-finite values")
        if not (self.pixel_size > 0 and np.isfinite(self.pixel_size)):
            raise DataError(f"pixel_size must be positive, got {self.pixel_size}")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, Grid2D):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.pixel_size == other.pixel_size
            and np.array_equal(self.values, other.values)
        )

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class LabeledSlice:
    """Attenuation image plus a per-pixel class-code grid."""

    image: Grid2D
    labels: np.ndarray
    classes: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint8, copy=True)
        if labels.shape != self.image.shape:
            raise DataError(
                f"label grid shape {labels.shape} != image shape {self.image.shape}"
            )
        if len(set(self.classes)) != len(self.classes):
            raise DataError("class names must be unique")
        if labels.size and labels.max() >= len(self.classes):
            raise DataError(f"label code {labels.max()} has no class name")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "classes", tuple(self.classes))

    def class_code(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise DataError(f"unknown class {name!r}") from None

    def __eq__(self, other):
        if not isinstance(other, LabeledSlice):
            return NotImplemented
        return (
            self.image == other.image
            and self.classes == other.classes
            and np.array_equal(self.labels, other.labels)
        )


class VolumeStack(tuple):
    """Ordered slices of identical shape; index 0 is the top slice."""

    def __new__(cls, slices: Iterable = ()):
        slices = tuple(slices)
        shapes = {_slice_shape(s) for s in slices}
        if len(shapes) > 1:
            raise DataError(f"stack slices differ in shape: {sorted(shapes)}")
        return super().__new__(cls, slices)

    def __add__(self, other):
        return VolumeStack(tuple(self) + tuple(other))

    def __getitem__(self, key):
        out = super().__getitem__(key)
        return VolumeStack(out) if isinstance(key, slice) else out


def _slice_shape(s) -> tuple[int, int]:
    if isinstance(s, LabeledSlice):
        return s.image.shape
    if isinstance(s, Grid2D):
        return s.shape
    return np.shape(s)


def _slice_values(s) -> np.ndarray:
    if isinstance(s, LabeledSlice):
        return s.image.values
    if isinstance(s, Grid2D):
        return s.values
    return np.asarray(s, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DefectTable:
    """Per-item pixel counts for each defect class.

    ``extra`` holds optional non-defect columns such as ``healthy`` or
    ``background`` keyed by name, each an integer vector over items.
    """

    item_ids: tuple[str, ...]
    defect_names: tuple[str, ...]
    counts: np.ndarray
    extra: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.item_ids)
        names = tuple(self.defect_names)
        counts = np.array(self.counts, dtype=np.int64, copy=True).reshape(
            len(ids), len(names)
        )
        if len(set(names)) != len(names):
            raise DataError(f"duplicate defect names in {names}")
        if len(set(ids)) != len(ids):
            raise DataError("duplicate item ids")
        if np.any(counts < 0):
            raise DataError("defect counts must be non-negative")
        counts.flags.writeable = False
        extra = {}
        for key, col in dict(self.extra).items():
            col = np.array(col, dtype=np.int64, copy=True)
            if col.shape != (len(ids),):
                raise DataError(f"extra column {key!r} has wrong length")
            col.flags.writeable = False
            extra[key] = col
        object.__setattr__(self, "item_ids", ids)
        object.__setattr__(self, "defect_names", names)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "extra", extra)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def column(self, name: str) -> np.ndarray:
        if name in self.defect_names:
            return self.counts[:, self.defect_names.index(name)]
        if name in self.extra:
            return self.extra[name]
        raise DataError(f"unknown column {name!r}")

    def subset(self, rows) -> "DefectTable":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return DefectTable(
            [self.item_ids[i] for i in rows],
            self.defect_names,
            self.counts[rows],
            {k: v[rows] for k, v in self.extra.items()},
        )


# --------------------------------------------------------------------------
# grid container


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".meta", ".raw", ".lab"):
        return path.with_suffix("")
    return path


def _sidecar_text(pairs: Sequence[tuple[str, str]]) -> str:
    return "".join(f"{k}={v}\n" for k, v in pairs)


def _parse_sidecar(path: Path) -> dict[str, str]:
    if not path.exists():
        raise FileNotFoundError(f"missing grid header {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _grid_header(meta: dict[str, str], path: Path) -> tuple[int, int]:
    try:
        width = int(meta["width"])
        height = int(meta["height"])
    except KeyError as exc:
        raise DataError(f"{path}: header lacks {exc.args[0]!r}") from None
    except ValueError:
        raise DataError(f"{path}: width/height must be integers") from None
    if width < 1 or height < 1:
        raise DataError(f"{path}: non-positive grid size {width}x{height}")
    expected = {"dtype": "f32", "order": "row-major", "endianness": "little"}
    for key, want in expected.items():
        if meta.get(key, want) != want:
            raise DataError(f"{path}: unsupported {key}={meta[key]!r}")
    return width, height


_RESERVED = ("width", "height", "dtype", "order", "endianness", "pixel_size")


def write_grid(grid: Grid2D, path, extra: Mapping[str, str] | None = None) -> Path:
    """Write ``grid`` as ``<path>.meta`` + ``<path>.raw``.

    Samples are stored as float32; identical input gives identical bytes.
    Returns the stem path.
    """
    if not isinstance(grid, Grid2D):
        grid = Grid2D(grid)
    stem = _stem(path)
    payload = np.ascontiguousarray(grid.values, dtype=_F32)
    if not np.all(np.isfinite(payload)):
        raise DataError("grid values overflow float32")
    pairs = [
        ("width", str(grid.width)),
        ("height", str(grid.height)),
        ("dtype", "f32"),
        ("order", "row-major"),
        ("endianness", "little"),
        ("pixel_size", repr(float(grid.pixel_size))),
    ]
    merged = {**grid.meta, **(extra or {})}
    pairs += [(k, str(v)) for k, v in sorted(merged.items()) if k not in _RESERVED]
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".meta").write_text(_sidecar_text(pairs), encoding="utf-8", newline="\n")
    stem.with_suffix(".raw").write_bytes(payload.tobytes())
    return stem


def read_grid(path) -> Grid2D:
    """Read a grid written by :func:`write_grid` (samples come back float32)."""
    stem = _stem(path)
    meta_path = stem.with_suffix(".meta")
    meta = _parse_sidecar(meta_path)
    width, height = _grid_header(meta, meta_path)
    raw_path = stem.with_suffix(".raw")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing grid payload {raw_path}")
    data = raw_path.read_bytes()
    if len(data) != 4 * width * height:
        raise DataError(
            f"{raw_path}: sample count {len(data) / 4:g} != {width}x{height}={width * height}"
        )
    values = np.frombuffer(data, dtype=_F32).reshape(height, width)
    try:
        pixel_size = float(meta.get("pixel_size", "1.0"))
    except ValueError:
        raise DataError(f"{meta_path}: bad pixel_size") from None
    extra = {k: v for k, v in meta.items() if k not in _RESERVED}
    return Grid2D(values, pixel_size=pixel_size, meta=extra)


def _format_classes(classes: Sequence[str]) -> str:
    return ",".join(f"{i}:{name}" for i, name in enumerate(classes))


def _parse_classes(text: str) -> tuple[str, ...]:
    names = {}
    for item in text.split(","):
        code, _, name = item.partition(":")
        names[int(code)] = name
    if sorted(names) != list(range(len(names))):
        raise DataError(f"class codes must be contiguous from 0: {text!r}")
    return tuple(names[i] for i in range(len(names)))


def write_labeled_slice(sl: LabeledSlice, path) -> Path:
    stem = write_grid(
        sl.image, path, extra={"labels": "u8", "classes": _format_classes(sl.classes)}
    )
    stem.with_suffix(".lab").write_bytes(np.ascontiguousarray(sl.labels).tobytes())
    return stem


def read_labeled_slice(path) -> LabeledSlice:
    grid = read_grid(path)
    stem = _stem(path)
    meta = dict(grid.meta)
    if meta.pop("labels", None) != "u8":
        raise DataError(f"{stem}: not a labelled slice")
    classes = _parse_classes(meta.pop("classes", ""))
    data = stem.with_suffix(".lab").read_bytes()
    if len(data) != grid.width * grid.height:
        raise DataError(f"{stem}.lab: label count mismatch")
    labels = np.frombuffer(data, dtype=np.uint8).reshape(grid.shape)
    image = Grid2D(grid.values, grid.pixel_size, meta)
    return LabeledSlice(image, labels, classes)


# --------------------------------------------------------------------------
# defect tables


def read_defect_table(path, defect_columns: Sequence[str] | None = None) -> DefectTable:
    """Load a comma-separated per-item count table.

    The first column holds item ids. ``defect_columns`` picks and orders the
    defect columns; ``None`` means the four standard defects. Any ``healthy``
    or ``background`` columns present are kept as extras.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8-sig")
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty table")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    wanted = list(DEFECT_CLASSES if defect_columns is None else defect_columns)
    missing = [c for c in wanted if c not in header[1:]]
    if missing:
        raise DataError(f"{path}: unknown column(s) {', '.join(missing)}")
    extras = [c for c in ("healthy", "background") if c in header[1:] and c not in wanted]
    cols = [header.index(c) for c in wanted + extras]

    ids, data = [], []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0].strip())
        vals = []
        for c in cols:
            cell = row[c].strip()
            try:
                v = int(cell)
            except ValueError:
                try:
                    f = float(cell)
                except ValueError:
                    f = float("nan")
                if not f.is_integer():
                    raise DataError(
                        f"{path}:{lineno}: non-integer count {cell!r} in {header[c]!r}"
                    ) from None
                v = int(f)
            if v < 0:
                raise DataError(f"{path}:{lineno}: negative count in {header[c]!r}")
            vals.append(v)
        data.append(vals)
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"{path}: duplicate item id(s) {', '.join(dup)}")
    arr = np.array(data, dtype=np.int64).reshape(len(ids), len(cols))
    k = len(wanted)
    extra = {name: arr[:, k + j] for j, name in enumerate(extras)}
    return DefectTable(ids, wanted, arr[:, :k], extra)


def write_defect_table(table: DefectTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(table.defect_names) + list(table.extra)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["item_id", *names])
    for i, item in enumerate(table.item_ids):
        row = [int(v) for v in table.counts[i]] + [int(table.extra[n][i]) for n in table.extra]
        writer.writerow([item, *row])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    return path


# --------------------------------------------------------------------------
# stack triage


def grey_value_profile(stack: Sequence) -> np.ndarray:
    """Total grey value of every slice in ``stack``."""
    if len(stack) == 0:
        raise DataError("empty stack")
    return np.array([float(np.sum(_slice_values(s), dtype=np.float64)) for s in stack])


def empty_slices(stack: Sequence, threshold: float = EMPTY_SLICE_THRESHOLD) -> np.ndarray:
    """Indices of slices whose total grey value is below ``threshold`` times
    the largest profile entry."""
    profile = grey_value_profile(stack)
    peak = np.max(np.abs(profile))
    if peak == 0:
        return np.arange(len(profile))
    return np.flatnonzero(np.abs(profile) < threshold * peak)


def trim_stack(stack: Sequence, top: int, bottom: int) -> VolumeStack:
    """Drop ``top`` slices from the start and ``bottom`` from the end."""
    if top < 0 or bottom < 0:
        raise DataError("trim counts must be non-negative")
    if top + bottom >= len(stack):
        raise DataError(
            f"cannot trim {top}+{bottom} slices from a stack of {len(stack)}"
        )
    return VolumeStack(tuple(stack)[top : len(stack) - bottom])
