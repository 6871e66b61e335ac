import struct
import zlib

import numpy as np
import pytest

from sd3.checkpoint import load_checkpoint, restore_into, save_checkpoint
from sd3.numerics import ParamStore, Rng, normal_init


def small_store(seed=1):
    s = ParamStore()
    init = normal_init(Rng(seed), 0.5)
    s.param("enc.w", (3, 4), init)
    s.param("enc.b", (4,), init)
    s.param("head.w", (4, 2), init)
    return s


def test_round_trip_is_f32_exact(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store)
    entries = load_checkpoint(path)
    assert sorted(entries) == sorted(store.names())
    for name in store.names():
        want = store[name].data.astype(np.float32).astype(np.float64)
        assert np.array_equal(entries[name], want)


def test_restore_into_replaces_values(tmp_path):
    store = small_store(seed=1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store)
    other = small_store(seed=2)
    restore_into(other, load_checkpoint(path))
    for name in store.names():
        assert np.array_equal(other[name].data,
                              store[name].data.astype(np.float32))


def test_empty_store_round_trips(tmp_path):
    path = tmp_path / "empty.ckpt"
    save_checkpoint(path, ParamStore())
    assert load_checkpoint(path) == {}
    raw = path.read_bytes()
    # magic + version + entry count + CRC and nothing else
    assert len(raw) == 4 + 4 + 4 + 4
    assert struct.unpack("<I", raw[8:12])[0] == 0


def test_header_layout(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store)
    raw = path.read_bytes()
    assert raw[:4] == b"SD3C"
    assert struct.unpack("<I", raw[4:8])[0] == 1          # format version
    assert struct.unpack("<I", raw[8:12])[0] == 3         # entry count
    name_len = struct.unpack("<I", raw[12:16])[0]
    assert raw[16:16 + name_len].decode() == sorted(store.names())[0]
    # trailing CRC32 covers everything before it
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_truncated_file_is_corrupt(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store)
    raw = path.read_bytes()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        clipped = tmp_path / f"cut{cut}.ckpt"
        clipped.write_bytes(raw[:cut])
        with pytest.raises(ValueError, match="corrupt checkpoint"):
            load_checkpoint(clipped)


def test_payload_corruption_fails_crc(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store)
    raw = bytearray(path.read_bytes())
    raw[20] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="corrupt checkpoint"):
        load_checkpoint(path)


def test_trailing_garbage_is_corrupt(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, store)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ValueError, match="corrupt checkpoint"):
        load_checkpoint(path)


def test_version_mismatch_names_both_versions(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_store(), version=7)
    with pytest.raises(ValueError) as err:
        load_checkpoint(path)
    assert "7" in str(err.value) and "1" in str(err.value)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_store())
    raw = bytearray(path.read_bytes())
    raw[0] = ord(b"X")
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="corrupt checkpoint"):
        load_checkpoint(path)


def test_restore_unknown_name(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_store())
    entries = load_checkpoint(path)
    entries["ghost.w"] = np.zeros(3)
    with pytest.raises(ValueError, match="ghost.w"):
        restore_into(small_store(), entries)


def test_restore_shape_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_store())
    entries = load_checkpoint(path)
    entries["enc.w"] = np.zeros((2, 2))
    with pytest.raises(ValueError, match="enc.w"):
        restore_into(small_store(), entries)
