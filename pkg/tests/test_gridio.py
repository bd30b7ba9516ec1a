import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ctbench.errors import DataError
from ctbench.gridio import (
    DefectTable,
    Grid2D,
    LabeledSlice,
    VolumeStack,
    empty_slices,
    grey_value_profile,
    read_defect_table,
    read_grid,
    read_labeled_slice,
    trim_stack,
    write_defect_table,
    write_grid,
    write_labeled_slice,
)


def test_round_trip_enumerated(tmp_path):
    g = Grid2D([[0.0, 1.0], [2.0, 3.0]])
    write_grid(g, tmp_path / "g")
    back = read_grid(tmp_path / "g")
    assert back == g
    assert back.values.ravel().tolist() == [0.0, 1.0, 2.0, 3.0]


def test_write_is_deterministic(tmp_path):
    g = Grid2D(np.arange(12.0).reshape(3, 4) / 7, pixel_size=0.5)
    write_grid(g, tmp_path / "a")
    write_grid(g, tmp_path / "b")
    for ext in (".meta", ".raw"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()


def test_zero_grid_payload_size(tmp_path):
    write_grid(Grid2D(np.zeros((4, 4))), tmp_path / "z")
    payload = (tmp_path / "z.raw").read_bytes()
    assert payload == bytes(64)


def test_sidecar_keys(tmp_path):
    write_grid(Grid2D(np.zeros((2, 3))), tmp_path / "z")
    meta = dict(
        line.split("=", 1) for line in (tmp_path / "z.meta").read_text().splitlines()
    )
    assert meta["width"] == "3" and meta["height"] == "2"
    assert meta["dtype"] == "f32"
    assert meta["order"] == "row-major"
    assert meta["endianness"] == "little"


def test_nan_rejected():
    with pytest.raises(DataError, match="non-finite"):
        Grid2D([[0.0, np.nan]])


def test_sample_count_mismatch(tmp_path):
    write_grid(Grid2D(np.zeros((2, 2))), tmp_path / "g")
    (tmp_path / "g.raw").write_bytes(bytes(12))
    with pytest.raises(DataError, match="sample count"):
        read_grid(tmp_path / "g")


def test_missing_and_malformed(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_grid(tmp_path / "nope")
    (tmp_path / "bad.meta").write_text("width 2\n")
    with pytest.raises(DataError, match="malformed"):
        read_grid(tmp_path / "bad")


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(
        np.float32,
        hnp.array_shapes(min_dims=2, max_dims=2, max_side=9),
        elements=st.floats(width=32, allow_nan=False, allow_infinity=False),
    )
)
def test_round_trip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rt") / "g"
    g = Grid2D(arr)
    write_grid(g, path)
    back = read_grid(path)
    assert back.values.tobytes() == arr.tobytes()


def test_labeled_slice_round_trip(tmp_path):
    img = Grid2D(np.arange(6.0).reshape(2, 3))
    sl = LabeledSlice(img, [[0, 1, 2], [3, 4, 5]])
    write_labeled_slice(sl, tmp_path / "s")
    assert read_labeled_slice(tmp_path / "s") == sl
    assert "classes=0:background,1:healthy" in (tmp_path / "s.meta").read_text()


def test_labeled_slice_shape_check():
    with pytest.raises(DataError):
        LabeledSlice(Grid2D(np.zeros((2, 2))), np.zeros((3, 2)))


def _write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_read_defect_table_94_rows(tmp_path, rng):
    counts = rng.integers(0, 1000, size=(94, 5))
    lines = ["item_id,bitterpit,holes,rot,browning,healthy"]
    lines += [f"{31100 + i}," + ",".join(map(str, row)) for i, row in enumerate(counts)]
    p = _write_csv(tmp_path / "t.csv", "\n".join(lines) + "\n")
    table = read_defect_table(p, ["bitterpit", "holes", "rot", "browning"])
    assert table.counts.shape == (94, 4)
    assert table.item_ids[0] == "31100" and table.item_ids[-1] == "31193"
    np.testing.assert_array_equal(table.counts, counts[:, :4])
    np.testing.assert_array_equal(table.extra["healthy"], counts[:, 4])


def test_read_defect_table_column_order_and_subset(tmp_path):
    p = _write_csv(tmp_path / "t.csv", "item_id,a,b,c\n1,1,2,3\n2,4,5,6\n")
    t = read_defect_table(p, ["c", "a"])
    assert t.defect_names == ("c", "a")
    assert t.counts.tolist() == [[3, 1], [6, 4]]


def test_read_defect_table_all_zero_single_item(tmp_path):
    p = _write_csv(tmp_path / "t.csv", "item_id,bitterpit,holes,rot,browning\n7,0,0,0,0\n")
    t = read_defect_table(p)
    assert t.counts.tolist() == [[0, 0, 0, 0]]


@pytest.mark.parametrize(
    "body, msg",
    [
        ("item_id,holes\n1,3\n", "unknown column"),
        ("item_id,stem\n1,-3\n", "negative"),
        ("item_id,stem\n1,2.5\n", "non-integer"),
        ("item_id,stem\n1,2\n1,3\n", "duplicate item"),
    ],
)
def test_read_defect_table_errors(tmp_path, body, msg):
    p = _write_csv(tmp_path / "t.csv", body)
    with pytest.raises(DataError, match=msg):
        read_defect_table(p, ["stem"])


def test_defect_table_csv_round_trip(tmp_path):
    t = DefectTable(["a", "b"], ["rot", "holes"], [[1, 2], [3, 4]], {"healthy": [9, 8]})
    p = write_defect_table(t, tmp_path / "d.csv")
    assert p.read_text().splitlines()[0] == "item_id,rot,holes,healthy"
    back = read_defect_table(p, ["rot", "holes"])
    assert back.counts.tolist() == [[1, 2], [3, 4]]
    assert back.extra["healthy"].tolist() == [9, 8]


def test_grey_value_profile():
    zeros = [Grid2D(np.zeros((3, 3)))] * 3
    assert grey_value_profile(zeros).tolist() == [0, 0, 0]
    assert grey_value_profile([Grid2D(np.ones((10, 10)))]).tolist() == [100]
    with pytest.raises(DataError):
        grey_value_profile([])


def test_profile_argmax_bright_slice(rng):
    slices = [rng.uniform(0, 1, (8, 8)) for _ in range(7)]
    slices[4] = slices[4] + 5.0
    stack = VolumeStack(Grid2D(s) for s in slices)
    prof = grey_value_profile(stack)
    oracle = [sum(sum(row) for row in s.tolist()) for s in slices]
    np.testing.assert_allclose(prof, oracle, rtol=1e-12)
    assert int(np.argmax(prof)) == 4


def test_profile_additive(rng):
    a = VolumeStack(Grid2D(rng.normal(size=(4, 4))) for _ in range(3))
    b = VolumeStack(Grid2D(rng.normal(size=(4, 4))) for _ in range(2))
    np.testing.assert_array_equal(
        grey_value_profile(a + b),
        np.concatenate([grey_value_profile(a), grey_value_profile(b)]),
    )


def test_empty_slices_relative_threshold():
    stack = [Grid2D(np.full((4, 4), v)) for v in (0.0, 1e-6, 1.0, 2.0)]
    assert empty_slices(stack).tolist() == [0, 1]


def test_trim_stack():
    stack = VolumeStack(Grid2D(np.full((2, 2), float(i))) for i in range(768))
    trimmed = trim_stack(stack, 50, 50)
    assert len(trimmed) == 668
    for j in (0, 100, 667):
        assert trimmed[j] == stack[j + 50]
    assert trim_stack(stack, 0, 0) == stack
    with pytest.raises(DataError):
        trim_stack(stack[:10], 6, 6)


def test_stack_shape_invariant():
    with pytest.raises(DataError):
        VolumeStack([Grid2D(np.zeros((2, 2))), Grid2D(np.zeros((3, 3)))])
