"""SPFB checkpoints, MELS feature files and PGM export."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spoofbench.formats import FormatError, load_mels, load_pgm, load_spfb, save_mels, save_pgm, save_spfb


def test_spfb_layout_by_hand(tmp_path):
    save_spfb(tmp_path / "a.spfb", {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    raw = (tmp_path / "a.spfb").read_bytes()
    expected = b"SPFB" + struct.pack("<III", 1, 1, 1) + b"w" + struct.pack("<III", 2, 1, 2) + \
        struct.pack("<2f", 1.0, 2.0)
    assert raw == expected


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float32, st.tuples(st.integers(0, 3), st.integers(1, 4)),
                              elements=st.floats(-1e6, 1e6, width=32)),
                       max_size=4))
def test_spfb_roundtrip(tmp_path_factory, tensors):
    p = tmp_path_factory.mktemp("s") / "t.spfb"
    save_spfb(p, tensors)
    back = load_spfb(p)
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_spfb_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FormatError):
        load_spfb(tmp_path / "x")
    (tmp_path / "v").write_bytes(b"SPFB" + struct.pack("<II", 9, 0))
    with pytest.raises(FormatError, match="version"):
        load_spfb(tmp_path / "v")
    save_spfb(tmp_path / "t", {"a": np.ones(10)})
    (tmp_path / "t").write_bytes((tmp_path / "t").read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_spfb(tmp_path / "t")


def test_mels_layout_and_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 10, (3, 64, 64)).astype(np.float32)
    save_mels(tmp_path / "a.mels", x, [2, 2, 5])
    raw = (tmp_path / "a.mels").read_bytes()
    assert raw[:4] == b"MELS"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 3, 64, 64)
    assert struct.unpack("<3I", raw[20:32]) == (2, 2, 5)
    assert len(raw) == 32 + 3 * 64 * 64 * 4
    back, labels = load_mels(tmp_path / "a.mels")
    np.testing.assert_array_equal(back, x)
    assert labels.tolist() == [2, 2, 5]


def test_mels_shape_errors(tmp_path):
    with pytest.raises(FormatError):
        save_mels(tmp_path / "a.mels", np.zeros((2, 64)), [0, 0])
    with pytest.raises(FormatError):
        save_mels(tmp_path / "a.mels", np.zeros((2, 4, 4)), [0])


def test_empty_mels(tmp_path):
    save_mels(tmp_path / "e.mels", np.zeros((0, 64, 64)), [])
    x, y = load_mels(tmp_path / "e.mels")
    assert x.shape == (0, 64, 64) and y.shape == (0,)


def test_pgm_export(tmp_path):
    img = np.arange(12, dtype=float).reshape(3, 4)
    save_pgm(tmp_path / "p.pgm", img)
    pix = load_pgm(tmp_path / "p.pgm")
    assert pix.shape == (3, 4)
    # min-max scaled, low mel bands at the bottom
    assert pix[-1, 0] == 0 and pix[0, -1] == 255
    np.testing.assert_array_equal(pix, np.round(np.flipud(img) / 11 * 255).astype(np.uint8))
    save_pgm(tmp_path / "c.pgm", np.full((2, 2), 3.0))
    assert not load_pgm(tmp_path / "c.pgm").any()
