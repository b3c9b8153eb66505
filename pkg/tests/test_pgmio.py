"""PGM round-trips against the format definition and a reference parser."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dropsort.pgmio import read_pgm, write_pgm


def test_uint8_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (37, 53), dtype=np.uint8)
    p = tmp_path / "a.pgm"
    write_pgm(p, img)
    back = read_pgm(p)
    assert back.dtype == np.uint8
    assert np.array_equal(back, img)


def test_header_is_canonical_p5(tmp_path):
    p = tmp_path / "b.pgm"
    write_pgm(p, np.zeros((4, 6), dtype=np.uint8))
    blob = p.read_bytes()
    assert blob.startswith(b"P5\n6 4\n255\n")
    assert len(blob) == len(b"P5\n6 4\n255\n") + 24


def test_float_input_rounds_and_clips(tmp_path):
    img = np.array([[-3.0, 0.4, 0.6], [254.5, 255.0, 300.0]])
    p = tmp_path / "c.pgm"
    write_pgm(p, img)
    back = read_pgm(p)
    # np.rint ties to even: 0.4 -> 0, 0.6 -> 1, 254.5 -> 254
    assert back.tolist() == [[0, 0, 1], [254, 255, 255]]


def test_integer_out_of_range_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "d.pgm", np.array([[0, 256]]))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "d.pgm", np.array([[-1, 5]]))


def test_non_2d_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "e.pgm", np.zeros(9))


def test_reads_headers_with_comments(tmp_path):
    p = tmp_path / "f.pgm"
    p.write_bytes(b"P5\n# a comment\n3 2\n# another\n255\n" + bytes(6))
    img = read_pgm(p)
    assert img.shape == (2, 3)
    assert img.sum() == 0


def test_rejects_non_p5(tmp_path):
    p = tmp_path / "g.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(ValueError, match="P5"):
        read_pgm(p)


def test_rejects_16_bit(tmp_path):
    p = tmp_path / "h.pgm"
    p.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(ValueError, match="16-bit"):
        read_pgm(p)


def test_rejects_truncated_raster(tmp_path):
    p = tmp_path / "i.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
    with pytest.raises(ValueError, match="truncated"):
        read_pgm(p)


def test_rewrite_is_byte_identical(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, (16, 16), dtype=np.uint8)
    p1, p2 = tmp_path / "j1.pgm", tmp_path / "j2.pgm"
    write_pgm(p1, img)
    write_pgm(p2, read_pgm(p1))
    assert p1.read_bytes() == p2.read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_round_trip_property(tmp_path_factory, h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w), dtype=np.uint8)
    p = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm(p, img)
    assert np.array_equal(read_pgm(p), img)
