"""Binary file formats: IDX (MNIST family) and binary Netpbm (PGM/PPM)."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read IDX file: {exc.strerror}", path=path) from exc


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError("truncated IDX header", path=path, offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path=path, offset=0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError("truncated IDX dimension table", path=path, offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    if 0 in dims:  # an empty tensor is never a usable dataset
        raise FormatError(f"IDX extent {dims} has a zero dimension", path=path, offset=4 + 4 * dims.index(0))
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header_end + count:
        raise FormatError(f"IDX payload truncated: need {count} bytes after header, have {len(raw) - header_end}",
                          path=path, offset=len(raw))
    if len(raw) > header_end + count:
        raise FormatError("trailing bytes after IDX payload", path=path, offset=header_end + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def write_netpbm(path, image: np.ndarray) -> None:
    """Write a CHW float image in [0, 1] as binary PGM (C=1) or PPM (C=3)."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c not in (1, 3):
        raise DimensionError(f"netpbm needs 1 or 3 channels, got {c}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    tag = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(tag + f"\n{w} {h}\n255\n".encode())
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_netpbm(path) -> np.ndarray:
    """Read binary PGM/PPM into a CHW float32 array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header", path=path, offset=pos)
        tokens.append(raw[start:pos])
    pos += 1
    tag = tokens[0]
    if tag not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm tag {tag!r}", path=path, offset=0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric netpbm header", path=path) from None
    if maxval != 255:
        raise FormatError(f"only 8-bit netpbm supported (maxval {maxval})", path=path)
    c = 1 if tag == b"P5" else 3
    need = w * h * c
    if len(raw) - pos < need:
        raise FormatError("netpbm pixel data truncated", path=path, offset=len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, c)
    return pixels.transpose(2, 0, 1).astype(np.float32) / 255.0


def write_mosaic(path, images: np.ndarray, cols: int = 8, pad: int = 1) -> None:
    """Tile an NCHW batch into one PPM/PGM grid."""
    images = np.asarray(images)
    n, c, h, w = images.shape
    rows = -(-n // cols)
    grid = np.ones((c, rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.float32)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y:y + h, x:x + w] = img
    write_netpbm(path, grid)
