import numpy as np
from PIL import Image

from appsplat import artifacts as A


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7, 3))
    A.write_ppm(tmp_path / "a.ppm", img, "abc")
    data = (tmp_path / "a.ppm").read_bytes()
    assert data.startswith(b"P6\n# config_hash=abc\n7 5\n255\n")
    np.testing.assert_array_equal(A.read_ppm(tmp_path / "a.ppm"), A.to_uint8(img))


def test_png_carries_hash_and_scale(tmp_path):
    img = np.random.default_rng(1).uniform(size=(4, 3, 3))
    A.write_png(tmp_path / "a.png", img, "h123", scale=4)
    with Image.open(tmp_path / "a.png") as im:
        assert im.text["config_hash"] == "h123" and im.size == (12, 16)
        arr = np.asarray(im)
    np.testing.assert_array_equal(arr[::4, ::4], A.to_uint8(img))


def test_to_uint8_clips_and_rounds():
    np.testing.assert_array_equal(A.to_uint8([-1.0, 0.5, 2.0, 1 / 255]), [0, 128, 255, 1])


def test_contact_sheet_layout():
    a, b = np.zeros((2, 3, 3)), np.full((2, 3, 3), 0.5)
    sheet = A.contact_sheet([[a, b], [b]])
    assert sheet.shape == (7, 9, 3)
    np.testing.assert_array_equal(sheet[1:3, 5:8], b)
    np.testing.assert_array_equal(sheet[4:6, 5:8], 1.0)
    assert A.csv_header("x") == "# config_hash=x"
