import numpy as np
import pytest

from uvb.imageio import pgm_bytes, read_pgm, square_shape, tile, to_bytes, write_image_grid, write_pgm


def test_to_bytes_clips_and_scales():
    out = to_bytes(np.array([-0.5, 0.0, 0.5, 1.0, 2.0]))
    assert out.tolist() == [0, 0, 128, 255, 255]
    assert to_bytes(np.array([-1.0, 1.0]), (-1.0, 1.0)).tolist() == [0, 255]


def test_tile_geometry():
    grid = np.arange(2 * 3 * 2 * 2, dtype=np.uint8).reshape(2, 3, 2, 2)
    canvas = tile(grid, pad=1)
    assert canvas.shape == (2 * 3 + 1, 3 * 3 + 1)
    np.testing.assert_array_equal(canvas[4:6, 7:9], grid[1, 2])
    assert canvas[0].sum() == 0


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    with pytest.raises(ValueError):
        pgm_bytes(img.astype(float))
    (tmp_path / "b.pgm").write_bytes(b"P5\n7 5\n255\n" + bytes(3))
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "b.pgm")


def test_image_grid(tmp_path):
    rows = [np.zeros((3, 16)), np.ones((3, 16))]
    write_image_grid(tmp_path / "g.pgm", rows, (4, 4))
    img = read_pgm(tmp_path / "g.pgm")
    assert img.shape == (2 * 5 + 1, 3 * 5 + 1)
    assert img[6:10, 1:5].min() == 255 and img[1:5, 1:5].max() == 0


def test_square_shape():
    assert square_shape(784) == (28, 28)
    assert square_shape(2) is None and square_shape(4) is None and square_shape(15) is None
