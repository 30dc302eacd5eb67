import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from grushinlab.formats import (
    FormatError,
    csv_text,
    json_text,
    pack_block,
    read_block,
    read_csv,
    read_json,
    unpack_block,
    write_block,
    write_csv,
    write_json,
)
from grushinlab.parallel import parallel_map, worker_count

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite), finite, finite)
def test_block_roundtrip(a, dt, t0):
    b, dt2, t02 = unpack_block(pack_block(a, dt, t0))
    np.testing.assert_array_equal(a, b)
    assert (dt2, t02) == (dt, t0)


def test_block_header_layout():
    buf = pack_block(np.arange(6.0).reshape(2, 3), 0.5, 1.0)
    assert buf[:4] == b"GRSH" and buf[4] == 1 and buf[5] == 2
    assert struct.unpack_from("<2Q", buf, 6) == (2, 3)
    assert struct.unpack_from("<d", buf, 22 + 16)[0] == 0.0  # first payload value
    assert len(buf) == 22 + 16 + 48


def test_block_rejects_corruption():
    buf = pack_block(np.ones(4))
    with pytest.raises(FormatError):
        unpack_block(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        unpack_block(buf[:4] + bytes([9]) + buf[5:])
    with pytest.raises(FormatError):
        unpack_block(buf[:-8])


def test_block_file_roundtrip(tmp_path):
    a = np.random.default_rng(0).standard_normal((5, 4))
    p = write_block(tmp_path / "t.bin", a, 0.1)
    b, dt, t0 = read_block(p)
    np.testing.assert_array_equal(a, b)
    assert dt == 0.1 and t0 == 0.0


def test_csv_roundtrip(tmp_path):
    rows = [(1, 0.1, True), (2, 1e-300, False), (3, None, np.float64(2.5))]
    p = write_csv(tmp_path / "x.csv", ["n", "v", "flag"], rows)
    text = p.read_bytes()
    assert b"\r" not in text and text.startswith(b"n,v,flag\n")
    header, data = read_csv(p)
    assert header == ["n", "v", "flag"]
    assert data[1, 1] == 1e-300 and np.isnan(data[2, 1])


def test_csv_floats_exact():
    x = 0.1 + 0.2
    assert csv_text(["x"], [(x,)]).splitlines()[1] == repr(x)


def test_csv_empty_file_rejected(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(FormatError):
        read_csv(tmp_path / "e.csv")


def test_json_stable_and_plain(tmp_path):
    obj = {"b": np.float64(1.5), "a": [np.int64(2), np.bool_(True)], "c": np.array([1.0, np.inf, np.nan])}
    text = json_text(obj)
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    assert json_text(dict(reversed(list(obj.items())))) == text
    back = read_json(write_json(tmp_path / "o.json", obj))
    assert back == {"a": [2, True], "b": 1.5, "c": [1.0, "inf", None]}


def test_parallel_map_preserves_order():
    items = list(range(20))
    assert parallel_map(lambda i: i * i, items, workers=4) == [i * i for i in items]
    assert parallel_map(lambda i: i, [], workers=4) == []


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("GRUSHIN_WORKERS", "3")
    assert worker_count() == 3
    assert worker_count(0) == 1
