import json
import struct
import zlib

import numpy as np
import pytest

from cdlm import checkpoint
from cdlm.data import load_idx
from cdlm.errors import CDLMError, DimensionError, FormatError
from cdlm.io import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, read_idx, read_netpbm, write_idx, write_mosaic, write_netpbm


@pytest.fixture
def three_images():
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(3, 4, 5), dtype=np.uint8), np.array([7, 0, 3], dtype=np.uint8)


def test_idx_round_trip_exact(tmp_path, three_images):
    imgs, labels = three_images
    write_idx(tmp_path / "img.idx", imgs)
    write_idx(tmp_path / "lab.idx", labels)
    np.testing.assert_array_equal(read_idx(tmp_path / "img.idx", IDX_IMAGES_MAGIC), imgs)
    np.testing.assert_array_equal(read_idx(tmp_path / "lab.idx", IDX_LABELS_MAGIC), labels)


def test_load_idx_scales_and_replicates(tmp_path, three_images):
    imgs, labels = three_images
    write_idx(tmp_path / "img.idx", imgs)
    write_idx(tmp_path / "lab.idx", labels)
    batch = load_idx(tmp_path / "img.idx", tmp_path / "lab.idx", channels=3)
    assert batch.images.shape == (3, 3, 4, 5)
    np.testing.assert_array_equal(np.rint(batch.images[:, 0] * 255).astype(np.uint8), imgs)
    np.testing.assert_array_equal(batch.labels, labels)


def _idx_bytes(imgs):
    return struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *imgs.shape) + imgs.tobytes()


IDX_CORRUPTIONS = {
    "empty": lambda raw: b"",
    "short_magic": lambda raw: raw[:3],
    "bad_magic": lambda raw: b"\x00\x00\x09\x03" + raw[4:],
    "truncated_dims": lambda raw: raw[:9],
    "truncated_payload": lambda raw: raw[:-7],
    "trailing_bytes": lambda raw: raw + b"\x00",
    "zero_extent": lambda raw: raw[:4] + struct.pack(">3I", 0, 4, 5),
}


@pytest.mark.parametrize("kind", sorted(IDX_CORRUPTIONS))
def test_corrupt_idx_is_structured_error(tmp_path, three_images, kind):
    path = tmp_path / "bad.idx"
    path.write_bytes(IDX_CORRUPTIONS[kind](_idx_bytes(three_images[0])))
    with pytest.raises(FormatError) as info:
        read_idx(path, IDX_IMAGES_MAGIC)
    assert info.value.offset is not None
    assert str(path) in str(info.value)


def test_missing_idx_file(tmp_path):
    with pytest.raises(FormatError, match="cannot read"):
        read_idx(tmp_path / "nope.idx", IDX_IMAGES_MAGIC)


def test_label_file_offered_as_images(tmp_path, three_images):
    write_idx(tmp_path / "lab.idx", three_images[1])
    with pytest.raises(FormatError, match="magic"):
        read_idx(tmp_path / "lab.idx", IDX_IMAGES_MAGIC)


# -- checkpoint ---------------------------------------------------------------------
@pytest.fixture
def ckpt_bytes():
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5, -2.0])}
    return checkpoint.dumps({"kind": "test", "step": 3}, tensors), tensors


def test_checkpoint_round_trip(tmp_path, ckpt_bytes):
    raw, tensors = ckpt_bytes
    meta, got = checkpoint.loads(raw)
    assert meta == {"kind": "test", "step": 3}
    for k, v in tensors.items():
        assert got[k].dtype == v.dtype
        np.testing.assert_array_equal(got[k], v)
    path = checkpoint.save(tmp_path / "x.cdlm", meta, tensors)
    assert path.read_bytes() == raw
    assert not list(tmp_path.glob("*.tmp"))


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _with_meta(meta_raw: bytes) -> bytes:
    return _reseal(b"CDLM" + struct.pack("<HI", 1, len(meta_raw)) + meta_raw + struct.pack("<I", 0))


CKPT_CORRUPTIONS = {
    "empty": lambda raw: b"",
    "bad_magic": lambda raw: b"XDLM" + raw[4:],
    "future_version": lambda raw: raw[:4] + struct.pack("<H", 99) + raw[6:],
    "truncated_meta": lambda raw: raw[:14],
    "truncated_tensor": lambda raw: raw[:-12],
    "flipped_payload_byte": lambda raw: raw[:-6] + bytes([raw[-6] ^ 0xFF]) + raw[-5:],
    "trailing_bytes": lambda raw: _reseal(raw[:-4] + b"\x00\x00"),
    "bad_json": lambda raw: _with_meta(b"{not json"),
    "unknown_dtype": lambda raw: _reseal(
        b"CDLM" + struct.pack("<HI", 1, 2) + b"{}" + struct.pack("<I", 1) + struct.pack("<HBB", 1, 9, 1) + b"x"
        + struct.pack("<I", 1) + b"\x00" * 4),
}


@pytest.mark.parametrize("kind", sorted(CKPT_CORRUPTIONS))
def test_corrupt_checkpoint_is_structured_error(tmp_path, ckpt_bytes, kind):
    path = tmp_path / "bad.cdlm"
    path.write_bytes(CKPT_CORRUPTIONS[kind](ckpt_bytes[0]))
    with pytest.raises(FormatError):
        checkpoint.load(path)


def test_random_byte_flips_never_crash(ckpt_bytes):
    raw = ckpt_bytes[0]
    rng = np.random.default_rng(0)
    for _ in range(200):
        buf = bytearray(raw)
        pos = int(rng.integers(len(buf)))
        buf[pos] ^= int(rng.integers(1, 256))
        try:
            checkpoint.loads(bytes(buf))
        except CDLMError:
            continue
        pytest.fail(f"flip at byte {pos} was not detected")


def test_metadata_is_json(ckpt_bytes):
    raw = ckpt_bytes[0]
    (meta_len,) = struct.unpack_from("<I", raw, 6)
    assert json.loads(raw[10:10 + meta_len]) == {"kind": "test", "step": 3}


# -- netpbm ---------------------------------------------------------------------------
@pytest.mark.parametrize("channels", [1, 3])
def test_netpbm_round_trip(tmp_path, channels):
    rng = np.random.default_rng(channels)
    img = rng.integers(0, 256, size=(channels, 5, 7)) / 255.0
    write_netpbm(tmp_path / "x.pnm", img)
    np.testing.assert_allclose(read_netpbm(tmp_path / "x.pnm"), img, atol=1e-6)


def test_netpbm_rejects_two_channels(tmp_path):
    with pytest.raises(DimensionError):
        write_netpbm(tmp_path / "x.pnm", np.zeros((2, 3, 3)))


def test_mosaic_dimensions(tmp_path):
    write_mosaic(tmp_path / "m.ppm", np.zeros((10, 3, 4, 4)), cols=4, pad=1)
    img = read_netpbm(tmp_path / "m.ppm")
    assert img.shape == (3, 3 * 5 + 1, 4 * 5 + 1)
