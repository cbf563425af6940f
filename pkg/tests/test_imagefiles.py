import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refield.imagefiles import (ImageFormatError, linear_to_srgb, load_image, load_pfm, rgbe_decode,
                                rgbe_encode, save_image, save_pfm, srgb_to_linear)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 31), st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]))
def test_pfm_round_trip_is_bit_exact(tmp_path_factory, seed, h, w, c):
    rng = np.random.default_rng(seed)
    img = (rng.normal(size=(h, w, c)) * 10 ** rng.uniform(-5, 5)).astype(np.float32)
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    save_pfm(path, img)
    back = load_pfm(path)
    assert back.tobytes() == img.reshape(back.shape).tobytes()


def test_pfm_layout(tmp_path):
    img = np.arange(6, dtype=np.float32).reshape(2, 3)
    save_pfm(tmp_path / "a.pfm", img)
    blob = (tmp_path / "a.pfm").read_bytes()
    assert blob.startswith(b"Pf\n3 2\n-1.0\n")
    # bottom row first, little endian
    assert np.frombuffer(blob[-24:], "<f4").tolist() == [3, 4, 5, 0, 1, 2]


def test_pfm_big_endian_is_read(tmp_path):
    img = np.array([[1.5, -2.0]], dtype=">f4")
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + img.tobytes())
    assert load_pfm(tmp_path / "b.pfm").tolist() == [[1.5, -2.0]]


@pytest.mark.parametrize("blob", [b"P6\n2 2\n255\n" + bytes(12), b"PF\n2 2\n-1.0\n" + bytes(10),
                                  b"PF\n2 2\n0\n" + bytes(48)])
def test_pfm_malformed(tmp_path, blob):
    (tmp_path / "bad.pfm").write_bytes(blob)
    with pytest.raises(ImageFormatError):
        load_pfm(tmp_path / "bad.pfm")


def test_rgbe_of_unit_white():
    assert rgbe_encode([1.0, 1.0, 1.0]).tolist() == [128, 128, 128, 129]
    np.testing.assert_allclose(rgbe_decode(rgbe_encode([1.0, 1.0, 1.0])), 1.0, rtol=5e-3)


@given(st.lists(st.floats(1e-3, 1e4), min_size=3, max_size=3))
def test_rgbe_relative_error(rgb):
    rgb = np.array(rgb)
    back = rgbe_decode(rgbe_encode(rgb))
    # 8-bit mantissas: error bounded by one step of the largest channel
    assert np.all(np.abs(back - rgb) <= rgb.max() / 128 + 1e-12)
    assert np.all(back <= rgb * (1 + 1e-6))


def test_rgbe_black():
    assert rgbe_encode(np.zeros(3)).tolist() == [0, 0, 0, 0]
    assert rgbe_decode(np.zeros(4, np.uint8)).tolist() == [0, 0, 0]


def test_hdr_file_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0.01, 20, (5, 7, 3)).astype(np.float32)
    img[0, 0] = [4.0, 0.5, 0.1]  # channel order check
    save_image(tmp_path / "e.hdr", img)
    back = load_image(tmp_path / "e.hdr")
    assert back.shape == img.shape
    assert np.all(np.abs(back - img) <= img.max(axis=2, keepdims=True) / 128)
    assert back[0, 0].argmax() == 0


def test_hdr_rejects_non_radiance(tmp_path):
    (tmp_path / "x.hdr").write_bytes(b"garbage")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "x.hdr")


def test_png_round_trip_of_mid_grey(tmp_path):
    save_image(tmp_path / "g.png", np.full((3, 4, 3), 0.5))
    back = load_image(tmp_path / "g.png")
    assert np.abs(back - 0.5).max() < 1 / 255


@given(st.floats(0, 1))
def test_srgb_transfer_inverts(x):
    assert float(srgb_to_linear(linear_to_srgb(x))) == pytest.approx(x, abs=1e-12)


def test_png_rejects_16_bit(tmp_path):
    from PIL import Image

    Image.fromarray(np.zeros((2, 2), np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "d.png")


def test_unknown_extension(tmp_path):
    with pytest.raises(ImageFormatError, match="extension"):
        save_image(tmp_path / "x.jpg", np.zeros((2, 2, 3)))
