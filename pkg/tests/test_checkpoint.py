import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
import hypothesis.extra.numpy as stnp

from evl import checkpoint as ck
from evl.errors import CorruptionError, FormatError


def random_archive(n, seed=0):
    rng = np.random.default_rng(seed)
    arc = ck.CheckpointArchive()
    for i in range(n):
        rank = int(rng.integers(1, 4))
        shape = tuple(int(d) for d in rng.integers(1, 5, size=rank))
        arc[f"layer{i}.w"] = rng.normal(size=shape)
    return arc


def test_empty_archive_is_12_bytes(tmp_path):
    p = tmp_path / "e.evlt"
    ck.save(ck.CheckpointArchive(), p)
    assert p.read_bytes() == b"EVLT" + struct.pack("<II", 1, 0)


def test_scalar_entry_layout(tmp_path):
    p = tmp_path / "s.evlt"
    arc = ck.CheckpointArchive()
    arc["b"] = 1.0
    ck.save(arc, p)
    blob = p.read_bytes()
    assert len(blob) == 29
    assert blob == (b"EVLT" + struct.pack("<III", 1, 1, 1) + b"b"
                    + struct.pack("<II", 1, 1) + struct.pack("<f", 1.0))


def test_roundtrip_100_entries_byte_identical(tmp_path):
    arc = random_archive(100)
    a, b = tmp_path / "a.evlt", tmp_path / "b.evlt"
    ck.save(arc, a)
    loaded = ck.load(a)
    assert loaded.equals(arc)
    ck.save(loaded, b)
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()


def test_bad_magic(tmp_path):
    p = tmp_path / "x.evlt"
    p.write_bytes(b"XXXX" + struct.pack("<II", 1, 0))
    with pytest.raises(FormatError, match="magic"):
        ck.load(p)


def test_truncated_payload_names_entry(tmp_path):
    arc = ck.CheckpointArchive()
    arc["first"] = np.ones(3)
    arc["second.weight"] = np.ones((4, 4))
    p = tmp_path / "t.evlt"
    ck.save(arc, p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(CorruptionError, match="second.weight"):
        ck.load(p)


def test_duplicate_name_rejected():
    entry = struct.pack("<I", 1) + b"a" + struct.pack("<II", 1, 1) + struct.pack("<f", 0.0)
    blob = b"EVLT" + struct.pack("<II", 1, 2) + entry + entry
    with pytest.raises(FormatError, match="duplicate"):
        ck.from_bytes(blob)


def test_huge_declared_dims_do_not_allocate():
    blob = (b"EVLT" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w"
            + struct.pack("<III", 2, 2**31, 2**31))
    with pytest.raises(CorruptionError):
        ck.from_bytes(blob)


def test_unsupported_version():
    with pytest.raises(FormatError):
        ck.from_bytes(b"EVLT" + struct.pack("<II", 2, 0))


names = st.text(min_size=1, max_size=12)
arrays = stnp.arrays(np.float32, stnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4),
                     elements=st.floats(width=32, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(names, arrays, max_size=6))
def test_save_load_save_idempotent(entries):
    arc = ck.CheckpointArchive()
    for k, v in entries.items():
        arc[k] = v
    blob = ck.to_bytes(arc)
    again = ck.from_bytes(blob)
    assert again.equals(arc)
    assert ck.to_bytes(again) == blob
