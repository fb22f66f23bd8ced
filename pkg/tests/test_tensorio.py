"""Binary tensor round trips, CSV precision, PGM golden bytes."""

import numpy as np
import pytest

from puregrad.autodiff import Tensor
from puregrad.errors import ConfigurationError
from puregrad.tensorio import MAGIC, load_tensor, save_tensor, write_csv, write_pgm


@pytest.mark.parametrize("shape", [(), (5,), (3, 4), (2, 3, 4)])
def test_tensor_round_trip_is_bitwise(tmp_path, shape):
    rng = np.random.default_rng(hash(shape) % 2**32)
    a = rng.normal(size=shape)
    p = tmp_path / "t.bin"
    save_tensor(p, Tensor(a))
    back = load_tensor(p)
    assert back.array.shape == a.shape
    assert np.array_equal(back.array, a)
    assert back.array.dtype == np.float64


def test_tensor_file_layout(tmp_path):
    p = tmp_path / "t.bin"
    save_tensor(p, Tensor(np.array([[1.0, 2.0]])))
    raw = p.read_bytes()
    assert raw[:4] == MAGIC
    assert len(raw) == 4 + 8 + 2 * 8 + 2 * 8  # magic, rank, extents, payload
    # identical writes produce identical bytes
    p2 = tmp_path / "t2.bin"
    save_tensor(p2, Tensor(np.array([[1.0, 2.0]])))
    assert p2.read_bytes() == raw


def test_tensor_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ConfigurationError, match="not a tensor file"):
        load_tensor(p)
    q = tmp_path / "short.bin"
    save_tensor(q, Tensor(np.zeros(4)))
    q.write_bytes(q.read_bytes()[:-8])
    with pytest.raises(ConfigurationError, match="truncated"):
        load_tensor(q)


def test_csv_keeps_float_precision(tmp_path):
    p = tmp_path / "t.csv"
    v = 0.1234567890123456789
    write_csv(p, ["a", "b", "c"], [[v, True, "x"], [1, False, "y"]])
    lines = p.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "a,b,c"
    cell = lines[1].split(",")[0]
    assert float(cell) == v
    assert lines[1].split(",")[1] == "1"
    assert lines[2].split(",")[1] == "0"
    # rewriting the same rows gives identical bytes
    raw = p.read_bytes()
    write_csv(p, ["a", "b", "c"], [[v, True, "x"], [1, False, "y"]])
    assert p.read_bytes() == raw


def test_pgm_golden_bytes(tmp_path):
    t = Tensor(np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 2.0]]))
    p = tmp_path / "img.pgm"
    write_pgm(p, t)
    raw = p.read_bytes()
    header = b"P5\n3 2\n255\n"
    assert raw[: len(header)] == header
    assert raw[len(header):] == bytes([0, 128, 255, 64, 191, 255])


def test_pgm_contracts(tmp_path):
    with pytest.raises(ConfigurationError):
        write_pgm(tmp_path / "a.pgm", Tensor(np.zeros(4)))
    with pytest.raises(ConfigurationError):
        write_pgm(tmp_path / "b.pgm", Tensor(np.zeros((2, 2))), lo=1.0, hi=1.0)
