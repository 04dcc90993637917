import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionnet.coordconv import coordconv_apply, make_coord_channels
from lesionnet.tensor import ShapeError


def test_three_by_three_raw():
    row, col = make_coord_channels(3, 3)
    assert row[0, 0].tolist() == [[0, 0, 0], [1, 1, 1], [2, 2, 2]]
    assert col[0, 0].tolist() == [[0, 1, 2], [0, 1, 2], [0, 1, 2]]


def test_single_pixel():
    row, col = make_coord_channels(1, 1)
    assert row.shape == col.shape == (1, 1, 1, 1)
    assert row.item() == 0 and col.item() == 0
    row, col = make_coord_channels(1, 1, scale=True)
    assert row.item() == 0 and col.item() == 0


def test_rectangular_maxima():
    row, col = make_coord_channels(2, 4)
    assert row.max() == 1 and col.max() == 3
    row, col = make_coord_channels(2, 4, scale=True)
    assert row.max() == 1 and col.max() == 1 and col[0, 0, 0].tolist() == pytest.approx([0, 1 / 3, 2 / 3, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40))
def test_channel_invariants(h, w):
    row, col = make_coord_channels(h, w)
    for i in range(h):
        assert np.all(row[0, 0, i] == i)
    for j in range(w):
        assert np.all(col[0, 0, :, j] == j)


def test_apply_shapes():
    x = np.zeros((4, 3, 256, 256), dtype=np.float32)
    assert coordconv_apply(x).shape == (4, 5, 256, 256)
    out = coordconv_apply(np.ones((1, 3, 1, 1), dtype=np.float32))
    assert out.shape == (1, 5, 1, 1) and out[0, 3:].ravel().tolist() == [0, 0]


def test_apply_disabled_passthrough(rng):
    x = rng.random((2, 3, 8, 8)).astype(np.float32)
    assert coordconv_apply(x, enabled=False) is x


def test_apply_order_and_broadcast(rng):
    x = rng.random((3, 3, 5, 6)).astype(np.float32)
    out = coordconv_apply(x, scale=False)
    assert out[:, :3].tobytes() == x.tobytes()
    row, col = make_coord_channels(5, 6)
    for n in range(3):
        assert np.array_equal(out[n, 3], row[0, 0])
        assert np.array_equal(out[n, 4], col[0, 0])


def test_apply_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        coordconv_apply(np.zeros((1, 5, 4, 4)))


def test_channels_depend_only_on_extent(rng):
    a = coordconv_apply(rng.random((1, 3, 7, 9)))
    b = coordconv_apply(rng.random((1, 3, 7, 9)))
    assert np.array_equal(a[:, 3:], b[:, 3:])
