import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from puq.core import (
    ConfigError,
    ImageTensor,
    PatchSpec,
    SeedSpec,
    ShapeError,
    derive_stream,
    extract_patches,
    flatten,
    reassemble,
    tile_batch,
    unflatten,
)


def test_flatten_is_channel_last_row_major():
    assert flatten(ImageTensor(1, 1, 3, [0.1, 0.2, 0.3])).tolist() == [0.1, 0.2, 0.3]
    assert flatten(ImageTensor(2, 1, 1, [5.0, 7.0])).tolist() == [5.0, 7.0]
    img = ImageTensor.from_array(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert flatten(img).tolist() == [1, 2, 3, 4]


def test_image_rejects_wrong_length():
    with pytest.raises(ShapeError):
        ImageTensor(2, 2, 1, [1.0, 2.0, 3.0])
    with pytest.raises(ShapeError):
        ImageTensor(0, 2, 1, [])


def test_image_data_is_read_only():
    img = ImageTensor(1, 2, 1, [1.0, 2.0])
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 3.0


def test_unflatten_length_mismatch():
    with pytest.raises(ShapeError):
        unflatten(np.zeros(5), (2, 2, 1))


def test_patches_hand_enumeration():
    img = ImageTensor.from_array(np.array([[1.0, 2.0], [3.0, 4.0]]))
    tiles = extract_patches(img, PatchSpec(1, 1, "local-tiling"))
    assert [t.tolist() for t in tiles] == [[1.0], [2.0], [3.0], [4.0]]
    (whole,) = extract_patches(img, PatchSpec(2, 2, "local-tiling"))
    assert np.array_equal(whole, flatten(img))
    (glob,) = extract_patches(img, PatchSpec(mode="global"))
    assert np.array_equal(glob, flatten(img))


def test_four_by_four_rgb_in_two_by_two_tiles():
    img = ImageTensor.from_array(np.arange(48, dtype=float).reshape(4, 4, 3))
    tiles = extract_patches(img, PatchSpec(2, 2, "local-tiling"))
    assert len(tiles) == 4 and all(t.size == 12 for t in tiles)
    # top-right tile: rows 0-1, cols 2-3
    assert np.array_equal(tiles[1], img.data[0:2, 2:4].reshape(-1))


def test_tiles_must_divide_image():
    spec = PatchSpec(3, 3, "local-tiling")
    with pytest.raises(ShapeError):
        spec.n_tiles((4, 4, 1))


def test_patch_spec_validation():
    with pytest.raises(ConfigError):
        PatchSpec(0, 1, "local-tiling")
    with pytest.raises(ConfigError):
        PatchSpec(1, 1, "overlapping")


shapes = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**32 - 1))
def test_roundtrip_and_partition(dims, seed):
    gh, gw, ph, pw, c = dims
    shape = (gh * ph, gw * pw, c)
    data = np.random.default_rng(seed).normal(size=shape)
    img = ImageTensor.from_array(data)
    assert unflatten(flatten(img), shape) == img
    spec = PatchSpec(ph, pw, "local-tiling")
    assert reassemble(extract_patches(img, spec), shape, spec) == img


def test_tile_batch_keeps_leading_axes():
    shape, spec = (4, 4, 2), PatchSpec(2, 2, "local-tiling")
    arr = np.random.default_rng(0).normal(size=(3, 5, 32))
    tiles = tile_batch(arr, shape, spec)
    assert tiles.shape == (3, 5, 4, 8)
    assert np.array_equal(tiles[2, 4], np.stack(extract_patches(unflatten(arr[2, 4], shape), spec)))


def test_derive_stream():
    s = SeedSpec(42)
    a = derive_stream(s, 0, "sample").random(5)
    assert np.array_equal(a, derive_stream(s, 0, "sample").random(5))
    assert not np.array_equal(a, derive_stream(s, 1, "sample").random(5))
    assert not np.array_equal(a, derive_stream(s, 0, "split").random(5))
    assert np.array_equal(a, derive_stream(42, 0, "sample").random(5))


def test_seed_range():
    with pytest.raises(ConfigError):
        SeedSpec(-1)
    with pytest.raises(ConfigError):
        SeedSpec(2**64)
