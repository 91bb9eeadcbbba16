import json
import struct

import numpy as np
import pytest

from averis_lab.quantizer import QuantConfig, dequantize, quantize
from averis_lab.tensorio import (
    TensorFormatError,
    decode_tensor,
    encode_tensor,
    read_matrix,
    read_quantized,
    read_tensor,
    to_csv,
    to_json,
    write_quantized,
    write_tensor,
)


def test_round_trip_7x5_bits(tmp_path, rng):
    x = rng.standard_normal((7, 5))
    write_tensor(tmp_path / "x.avts", x)
    y = read_tensor(tmp_path / "x.avts")
    assert y.dtype == np.float64
    assert y.tobytes() == x.tobytes()


def test_round_trip_many_shapes_both_dtypes(tmp_path, rng):
    for i in range(100):
        shape = tuple(rng.integers(1, 9, size=rng.integers(1, 3)))
        x = rng.standard_normal(shape) * 10.0 ** rng.integers(-30, 30)
        for dtype in ("float32", "float64"):
            want = x.astype(dtype)
            got = decode_tensor(encode_tensor(x, dtype))
            assert got.dtype == want.dtype and got.tobytes() == want.tobytes()


def test_header_layout_is_little_endian():
    buf = encode_tensor(np.array([[1.0, 2.0]]), "float32")
    assert buf[:4] == b"AVTS"
    assert struct.unpack("<IBB", buf[4:10]) == (1, 0, 2)
    assert struct.unpack("<2Q", buf[10:26]) == (1, 2)
    assert buf[26:] == struct.pack("<2f", 1.0, 2.0)


def test_three_dim_flattens(tmp_path):
    write_tensor(tmp_path / "t.avts", np.arange(24.0).reshape(2, 3, 4))
    x = read_tensor(tmp_path / "t.avts")
    assert x.shape == (6, 4)
    np.testing.assert_array_equal(x[4], [16, 17, 18, 19])
    assert read_tensor(tmp_path / "t.avts", flatten=False).shape == (2, 3, 4)


def test_read_matrix_promotes_vector(tmp_path):
    write_tensor(tmp_path / "v.avts", np.arange(3.0))
    assert read_matrix(tmp_path / "v.avts").shape == (1, 3)


def test_truncated_payload_names_sizes():
    buf = encode_tensor(np.zeros((3, 4)))
    with pytest.raises(TensorFormatError, match=r"expected 96 bytes .* got 90"):
        decode_tensor(buf[:-6])


def test_bad_magic_version_dtype():
    buf = bytearray(encode_tensor(np.zeros(2)))
    with pytest.raises(TensorFormatError, match="magic"):
        decode_tensor(b"NOPE" + bytes(buf[4:]))
    bad_version = bytes(buf[:4]) + struct.pack("<I", 2) + bytes(buf[8:])
    with pytest.raises(TensorFormatError, match="version"):
        decode_tensor(bad_version)
    buf[8] = 7
    with pytest.raises(TensorFormatError, match="dtype"):
        decode_tensor(bytes(buf))
    with pytest.raises(TensorFormatError, match="short"):
        decode_tensor(b"AVT")
    with pytest.raises(TensorFormatError, match="unsupported dtype"):
        encode_tensor(np.zeros(2), "int8")


def test_json_is_stable_and_utf8():
    rep = {"b": np.float64(1.5), "a": [np.int64(2), (3, 4)], "name": "µ-share", "x": float("nan")}
    text = to_json(rep)
    assert text == to_json(rep)
    assert list(json.loads(text)) == ["b", "a", "name", "x"]
    assert "µ" in text and json.loads(text)["x"] is None


def test_csv_quoting():
    text = to_csv([{"a": 1, "b": 'say "hi", ok'}, {"a": 2, "c": [1, 2]}])
    assert text.splitlines()[0] == "a,b,c"
    assert '"say ""hi"", ok"' in text
    assert text.endswith("\r\n")


def test_quantized_tensor_round_trip(tmp_path, rng):
    q = quantize(rng.standard_normal((5, 19)), QuantConfig(seed=2, layout="column"))
    write_quantized(tmp_path / "q", q)
    back = read_quantized(tmp_path / "q")
    assert back.config == q.config and back.shape == q.shape
    np.testing.assert_array_equal(dequantize(back), dequantize(q))
