import numpy as np
import pytest
from PIL import Image

from wmlab.errors import (
    ColorSpaceError,
    CorruptStreamError,
    GeometryError,
    MissingFileError,
    UnsupportedImageError,
)
from wmlab.imagecore import (
    ColorImage,
    RasterPlane,
    channel_stats,
    load_image,
    rgb_to_ycbcr,
    save_image,
    ycbcr_to_rgb,
)


def test_load_single_pixel_scaling(tmp_path):
    path = tmp_path / "one.png"
    Image.fromarray(np.array([[[255, 0, 128]]], dtype=np.uint8)).save(path)
    img = load_image(path)
    assert img.planes[0].data[0, 0] == 1.0
    assert img.planes[1].data[0, 0] == 0.0
    assert img.planes[2].data[0, 0] == 128 / 255


def test_load_all_zero(tmp_path):
    path = tmp_path / "zero.png"
    Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(path)
    img = load_image(path)
    for plane in img.planes:
        assert np.all(plane.data == 0.0)


def test_load_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_image(tmp_path / "nope.png")


def test_load_truncated_stream(tmp_path):
    path = tmp_path / "trunc.png"
    Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptStreamError):
        load_image(path)


def test_load_not_an_image(tmp_path):
    path = tmp_path / "junk.png"
    path.write_bytes(b"definitely not a png")
    with pytest.raises(CorruptStreamError):
        load_image(path)


def test_load_alpha_rejected(tmp_path):
    path = tmp_path / "alpha.png"
    Image.fromarray(np.zeros((4, 4, 4), dtype=np.uint8), mode="RGBA").save(path)
    with pytest.raises(UnsupportedImageError):
        load_image(path)


def test_load_grayscale_rejected(tmp_path):
    path = tmp_path / "gray.png"
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(path)
    with pytest.raises(UnsupportedImageError):
        load_image(path)


def test_save_load_round_trip_exact(tmp_path, rng):
    arr = rng.integers(0, 256, size=(17, 23, 3)).astype(np.float64) / 255.0
    img = ColorImage.from_array(arr)
    path = tmp_path / "rt.png"
    save_image(img, path)
    again = load_image(path)
    assert np.array_equal(again.to_array(), arr)
    # idempotence of save/load on already-quantized data
    save_image(again, path)
    assert np.array_equal(load_image(path).to_array(), arr)


def test_save_clamps(tmp_path):
    img = ColorImage.from_array(np.full((2, 2, 3), 1.2))
    path = tmp_path / "clamp.png"
    save_image(img, path)
    assert np.all(np.asarray(Image.open(path)) == 255)


def test_save_rounds_half_away_from_zero(tmp_path):
    # 0.5/255 scaled values must reproduce their source bytes
    arr = np.array([[[10, 200, 77]]], dtype=np.uint8)
    img = ColorImage.from_array(arr.astype(np.float64) / 255.0)
    path = tmp_path / "bytes.png"
    save_image(img, path)
    assert np.array_equal(np.asarray(Image.open(path)), arr)


def test_save_unwritable(tmp_path):
    from wmlab.errors import UnwritablePathError

    img = ColorImage.from_array(np.zeros((2, 2, 3)))
    with pytest.raises(UnwritablePathError):
        save_image(img, tmp_path / "no" / "dir" / "x.png")


def test_gray_maps_to_achromatic_axis():
    img = ColorImage.from_array(np.full((4, 4, 3), 0.37))
    ycc = rgb_to_ycbcr(img)
    assert np.allclose(ycc.planes[0].data, 0.37, atol=1e-12)
    assert np.allclose(ycc.planes[1].data, 0.5, atol=1e-12)
    assert np.allclose(ycc.planes[2].data, 0.5, atol=1e-12)


def test_pure_red_luminance():
    arr = np.zeros((1, 1, 3))
    arr[0, 0, 0] = 1.0
    ycc = rgb_to_ycbcr(ColorImage.from_array(arr))
    assert ycc.planes[0].data[0, 0] == pytest.approx(0.299, abs=1e-12)


def test_ycbcr_round_trip(rng):
    img = ColorImage.from_array(rng.random((37, 29, 3)))
    back = ycbcr_to_rgb(rgb_to_ycbcr(img))
    assert np.max(np.abs(back.to_array() - img.to_array())) < 1e-6


def test_color_space_tag_enforced(rng):
    img = ColorImage.from_array(rng.random((8, 8, 3)))
    with pytest.raises(ColorSpaceError):
        ycbcr_to_rgb(img)
    with pytest.raises(ColorSpaceError):
        rgb_to_ycbcr(rgb_to_ycbcr(img))


def test_channel_stats_constant():
    img = ColorImage.from_array(np.full((5, 7, 3), 0.25))
    stats = channel_stats(img)
    assert np.allclose(stats.mean, 0.25)
    assert np.allclose(stats.std, 0.0)


def test_channel_stats_two_pixel_population_std():
    arr = np.zeros((1, 2, 3))
    arr[0, 1] = 1.0
    stats = channel_stats(ColorImage.from_array(arr))
    assert np.allclose(stats.mean, 0.5)
    assert np.allclose(stats.std, 0.5)  # population, not sample


def test_channel_stats_matches_two_pass_oracle(rng):
    arr = rng.random((31, 17, 3))
    stats = channel_stats(ColorImage.from_array(arr))
    for c in range(3):
        vals = arr[:, :, c].ravel()
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        assert abs(stats.mean[c] - mean) < 1e-12
        assert abs(stats.std[c] - var**0.5) < 1e-12


def test_plane_validation():
    with pytest.raises(ValueError):
        RasterPlane(np.array([[np.nan, 0.0]]))
    with pytest.raises(GeometryError):
        RasterPlane(np.zeros(4))
    plane = RasterPlane(np.full((2, 2), 2.0))
    with pytest.raises(ValueError):
        plane.validate_range()


def test_mismatched_planes_rejected():
    with pytest.raises(GeometryError):
        ColorImage(
            (RasterPlane(np.zeros((2, 2))), RasterPlane(np.zeros((2, 2))), RasterPlane(np.zeros((3, 2))))
        )
