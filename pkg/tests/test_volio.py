import struct

import numpy as np
import pytest

from smokerecon import volio
from smokerecon.grid import GridDims, StaggeredField

from conftest import random_field


def test_volume_header_layout(tmp_path):
    a = np.arange(24, dtype=float).reshape(2, 3, 4)
    p = tmp_path / "a.vol"
    volio.write_volume(p, a, h=0.5)
    buf = p.read_bytes()
    assert len(buf) == 32 + 24 * 4
    assert buf[:8] == b"SFVOL01\0"
    assert struct.unpack_from("<4I", buf, 8) == (2, 3, 4, 1)
    assert struct.unpack_from("<f", buf, 24)[0] == 0.5
    assert buf[28:32] == b"\0\0\0\0"
    # x fastest: second value is a[1, 0, 0], third a[0, 1, 0]
    payload = struct.unpack_from("<24f", buf, 32)
    assert payload[:3] == (a[0, 0, 0], a[1, 0, 0], a[0, 1, 0])


def test_scalar_roundtrip(tmp_path, rng):
    a = rng.random((5, 6, 7)).astype(np.float32).astype(float)
    volio.write_volume(tmp_path / "s.vol", a, 0.25)
    b = volio.read_volume(tmp_path / "s.vol")
    assert np.array_equal(a, b)
    assert volio.read_volume_h(tmp_path / "s.vol") == 0.25


def test_staggered_roundtrip(tmp_path, rng):
    d = GridDims(4, 5, 6, 0.125)
    u = random_field(d, rng).map(lambda c: c.astype(np.float32).astype(float))
    volio.write_volume(tmp_path / "u.vol", u)
    buf = (tmp_path / "u.vol").read_bytes()
    assert struct.unpack_from("<I", buf, 20)[0] == 3
    v = volio.read_volume(tmp_path / "u.vol")
    assert isinstance(v, StaggeredField) and v.dims == d
    assert np.array_equal(u.flat(), v.flat())


def test_bad_magic(tmp_path):
    p = tmp_path / "x.vol"
    p.write_bytes(b"NOTAVOL\0" + bytes(24))
    with pytest.raises(volio.FormatError):
        volio.read_volume(p)
    p.write_bytes(b"SFV")
    with pytest.raises(volio.FormatError):
        volio.read_volume(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.vol"
    volio.write_volume(p, np.ones((4, 4, 4)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(volio.FormatError):
        volio.read_volume(p)


@pytest.mark.parametrize("suffix", [".pfm", ".vol"])
def test_image_roundtrip(tmp_path, rng, suffix):
    img = rng.random((7, 5)).astype(np.float32).astype(float)
    p = tmp_path / f"im{suffix}"
    volio.write_image(p, img)
    assert np.array_equal(volio.read_image(p), img)


def test_pfm_bottom_row_first(tmp_path):
    img = np.zeros((2, 3))
    img[1, 0] = 5.0  # x=1, bottom row
    volio.write_pfm(tmp_path / "a.pfm", img)
    buf = (tmp_path / "a.pfm").read_bytes()
    body = buf.split(b"\n", 3)[3]
    assert struct.unpack_from("<6f", body) == (0.0, 5.0, 0.0, 0.0, 0.0, 0.0)


def test_pgm_preview(tmp_path):
    img = np.array([[0.0, 1.0], [0.5, 0.25]])
    volio.write_pgm(tmp_path / "a.pgm", img)
    back = volio.read_pgm(tmp_path / "a.pgm")
    np.testing.assert_allclose(back, img, atol=1 / 255)


def test_rays_roundtrip(tmp_path, rng):
    o = rng.random((6, 3)).astype(np.float32).astype(float)
    d = rng.random((6, 3)).astype(np.float32).astype(float)
    volio.write_rays(tmp_path / "r.rays", o, d)
    buf = (tmp_path / "r.rays").read_bytes()
    assert buf[:8] == b"SFRAY01\0" and struct.unpack_from("<I", buf, 8)[0] == 6
    assert len(buf) == 12 + 6 * 24
    o2, d2 = volio.read_rays(tmp_path / "r.rays")
    assert np.array_equal(o, o2) and np.array_equal(d, d2)
