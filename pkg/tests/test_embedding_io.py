import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from monosae import embedding_io as eio
from monosae.errors import (
    DegenerateData,
    DimensionMismatch,
    EmptyHeader,
    MalformedHeader,
    NonBinaryEntry,
    NonFiniteEntry,
    RaggedRow,
    ShapeMismatch,
)


def header(rows, cols, dtype=1, magic=b"SAEM", version=1):
    return struct.pack("<4sHHQQ", magic, version, dtype, rows, cols)


def test_read_hand_built_file(tmp_path):
    path = tmp_path / "m.saem"
    path.write_bytes(header(2, 3) + struct.pack("<6d", 1, 2, 3, 4, 5, 6))
    m = eio.read_matrix(path)
    assert m.shape == (2, 3)
    assert m.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_empty_matrix_is_header_only(tmp_path):
    path = tmp_path / "e.saem"
    eio.write_matrix(np.zeros((0, 0)), path)
    assert path.stat().st_size == 24
    assert eio.read_matrix(path).shape == (0, 0)


def test_single_value_layout(tmp_path):
    path = tmp_path / "one.saem"
    eio.write_matrix(np.array([[3.5]]), path)
    assert path.read_bytes() == header(1, 1) + struct.pack("<d", 3.5)


def test_f32_payload_promoted(tmp_path):
    path = tmp_path / "f32.saem"
    vals = np.array([[0.1, -2.5], [1e-3, 7.0]], dtype=np.float32)
    path.write_bytes(header(2, 2, dtype=0) + vals.astype("<f4").tobytes())
    m = eio.read_matrix(path)
    assert m.dtype == np.float64
    assert np.array_equal(m, vals.astype(np.float64))


def test_f32_writer_roundtrip(tmp_path):
    path = tmp_path / "f32.saem"
    vals = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32).astype(np.float64)
    eio.write_matrix(vals, path, dtype="f32")
    assert path.stat().st_size == 24 + 12 * 4
    assert np.array_equal(eio.read_matrix(path), vals)


@pytest.mark.parametrize(
    "blob, error",
    [
        (header(2, 3) + struct.pack("<5d", 1, 2, 3, 4, 5), ShapeMismatch),
        (header(1, 1) + struct.pack("<2d", 1, 2), ShapeMismatch),
        (header(1, 1, magic=b"SAEX") + struct.pack("<d", 1), MalformedHeader),
        (header(1, 1, version=2) + struct.pack("<d", 1), MalformedHeader),
        (header(1, 1, dtype=7) + struct.pack("<d", 1), MalformedHeader),
        (b"SAEM\x01\x00", MalformedHeader),
        (header(1, 2) + struct.pack("<2d", 1, math.nan), NonFiniteEntry),
        (header(1, 2) + struct.pack("<2d", math.inf, 1), NonFiniteEntry),
    ],
)
def test_corrupt_files(tmp_path, blob, error):
    path = tmp_path / "bad.saem"
    path.write_bytes(blob)
    with pytest.raises(error):
        eio.read_matrix(path)


def test_nonfinite_reports_index(tmp_path):
    path = tmp_path / "nan.saem"
    path.write_bytes(header(2, 2) + struct.pack("<4d", 0, 0, 0, math.nan))
    with pytest.raises(NonFiniteEntry) as info:
        eio.read_matrix(path)
    assert info.value.index == 3


def test_writer_rejects_nonfinite(tmp_path):
    with pytest.raises(NonFiniteEntry):
        eio.write_matrix(np.array([[1.0, np.nan]]), tmp_path / "x.saem")


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 7), st.integers(0, 5)), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_roundtrip_bitwise(m):
    back = eio.decode_matrix(eio.encode_matrix(m))
    assert back.shape == m.shape
    assert back.tobytes() == m.tobytes()


def test_large_roundtrip(tmp_path):
    m = np.random.default_rng(3).standard_normal((100, 512))
    eio.write_matrix(m, tmp_path / "big.saem")
    assert eio.read_matrix(tmp_path / "big.saem").tobytes() == m.tobytes()


def test_concatenated_container(tmp_path):
    mats = [np.arange(6.0).reshape(2, 3), np.ones((1, 4)), np.zeros((0, 2))]
    eio.write_matrices(mats, tmp_path / "c.saem")
    back = eio.read_matrices(tmp_path / "c.saem")
    assert [b.shape for b in back] == [(2, 3), (1, 4), (0, 2)]
    assert all(np.array_equal(a, b) for a, b in zip(mats, back))


# ---- labels ------------------------------------------------------------------


def test_read_labels(tmp_path):
    path = tmp_path / "y.csv"
    path.write_text("edema,effusion\n1,0\n0,1\n")
    y = eio.read_labels(path)
    assert y.names == ("edema", "effusion")
    assert y.values.tolist() == [[1, 0], [0, 1]]


@pytest.mark.parametrize(
    "text, error",
    [
        ("a,b\n1,2\n", NonBinaryEntry),
        ("a,b\n-1,0\n", NonBinaryEntry),
        ("a,b\n1,0,1\n", RaggedRow),
        ("a,b\n1\n", RaggedRow),
        ("", EmptyHeader),
        ("a,,b\n1,0,1\n", EmptyHeader),
        ("a,a\n1,0\n", EmptyHeader),
    ],
)
def test_bad_labels(tmp_path, text, error):
    path = tmp_path / "y.csv"
    path.write_text(text)
    with pytest.raises(error):
        eio.read_labels(path)


def test_balanced_fourteen_class_labels(tmp_path):
    names = [f"finding_{i}" for i in range(14)]
    values = np.repeat(np.eye(14), 200, axis=0)
    np.random.default_rng(0).shuffle(values)
    eio.write_labels(eio.make_labels(values, names), tmp_path / "y.csv")
    y = eio.read_labels(tmp_path / "y.csv")
    assert (y.n, y.k) == (2800, 14)
    assert y.values.sum(axis=0).tolist() == [200.0] * 14


# ---- normalization -----------------------------------------------------------


def test_fit_hand_example():
    stats = eio.fit_normalization(np.array([[1.0, 1.0], [3.0, 3.0]]))
    assert stats.mean.tolist() == [2.0, 2.0]
    assert stats.scale == pytest.approx(1.0, abs=1e-15)


def test_fit_degenerate():
    with pytest.raises(DegenerateData):
        eio.fit_normalization(np.tile([[1.0, 2.0, 3.0]], (5, 1)))


def test_fit_gaussian_hits_sqrt_d():
    x = np.random.default_rng(11).normal(3.0, 2.0, size=(1000, 512))
    stats = eio.fit_normalization(x)
    y = eio.apply_normalization(x, stats)
    # recompute directly, row by row
    mean_norm = sum(math.sqrt(sum(v * v for v in row)) for row in y.tolist()) / len(y)
    assert abs(mean_norm / math.sqrt(512) - 1) < 1e-9
    assert np.abs(y.mean(axis=0)).max() < 1e-9


def test_apply_identity_and_zero_row():
    ident = eio.NormalizationStats(mean=np.zeros(3), scale=1.0)
    x = np.random.default_rng(0).standard_normal((4, 3))
    assert np.array_equal(eio.apply_normalization(x, ident), x)
    stats = eio.NormalizationStats(mean=np.array([1.0, 2.0, 3.0]), scale=2.5)
    assert np.array_equal(eio.apply_normalization(stats.mean[None, :], stats), np.zeros((1, 3)))


def test_apply_inverse():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((50, 8)) * 4 + 1
    stats = eio.fit_normalization(x)
    back = eio.invert_normalization(eio.apply_normalization(x, stats), stats)
    assert np.abs(back - x).max() < 1e-12


def test_apply_dimension_mismatch():
    stats = eio.NormalizationStats(mean=np.zeros(3), scale=1.0)
    with pytest.raises(DimensionMismatch):
        eio.apply_normalization(np.zeros((2, 4)), stats)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10_000))
def test_apply_is_affine(alpha, seed):
    rng = np.random.default_rng(seed)
    stats = eio.NormalizationStats(mean=rng.standard_normal(6), scale=float(rng.uniform(0.1, 5)))
    a, b = rng.standard_normal((2, 6))
    lhs = eio.apply_normalization((alpha * a + (1 - alpha) * b)[None, :], stats)
    rhs = alpha * eio.apply_normalization(a[None, :], stats) + (1 - alpha) * eio.apply_normalization(b[None, :], stats)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_stats_json_roundtrip():
    stats = eio.fit_normalization(np.random.default_rng(1).standard_normal((20, 5)))
    back = eio.NormalizationStats.from_dict(stats.to_dict())
    assert back.scale == stats.scale
    assert back.mean.tobytes() == stats.mean.tobytes()
