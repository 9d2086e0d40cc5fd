"""Signal file formats.

Images: binary PPM (P6) / PGM (P5), 8-bit.  Audio: little-endian float32
mono with a small fixed header (magic RAF1, sample rate, count).  Generic
signals (video, point sequences): shape-prefixed little-endian float32
(magic RTEN, ndim, dims..., data in C order).
"""

from __future__ import annotations

import re
import struct

import numpy as np


class FileFormatError(ValueError):
    pass


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _pnm_tokens(data: bytes, count: int):
    """First `count` whitespace/comment-delimited tokens; returns (tokens, offset)."""
    off = 0
    toks = []
    for _ in range(count):
        m = _TOKEN.match(data, off)
        if not m:
            raise FileFormatError("truncated PNM header")
        toks.append(m.group(1))
        off = m.end()
    return toks, off


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Reads P5/P6; returns ((H, W) or (H, W, 3) uint8-valued int array, maxval)."""
    data = open(path, "rb").read()
    (magic,), off = _pnm_tokens(data, 1)
    if magic not in (b"P5", b"P6"):
        raise FileFormatError(f"unsupported PNM magic {magic!r}")
    toks, rest = _pnm_tokens(data[off:], 3)
    width, height, maxval = (int(t) for t in toks)
    off += rest + 1  # exactly one whitespace byte separates maxval from pixels
    if maxval <= 0 or maxval > 255:
        raise FileFormatError(f"unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raw = data[off:off + need]
    if len(raw) != need:
        raise FileFormatError("truncated PNM pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return img.reshape(shape), maxval


def write_pnm(path, img: np.ndarray, maxval: int = 255) -> None:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        magic, h, w = b"P6", img.shape[0], img.shape[1]
    elif img.ndim == 2:
        magic, h, w = b"P5", img.shape[0], img.shape[1]
    else:
        raise FileFormatError(f"cannot write shape {img.shape} as PNM")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        f.write(img.astype(np.uint8).tobytes())


AUDIO_MAGIC = b"RAF1"
TENSOR_MAGIC = b"RTEN"


def read_audio(path) -> tuple[np.ndarray, int]:
    """Returns (float64 samples (N,), sample_rate)."""
    data = open(path, "rb").read()
    if data[:4] != AUDIO_MAGIC:
        raise FileFormatError("bad audio magic")
    rate, count = struct.unpack_from("<IQ", data, 4)
    samples = np.frombuffer(data, dtype="<f4", count=count, offset=16)
    if samples.size != count:
        raise FileFormatError("truncated audio data")
    return samples.astype(np.float64), rate


def write_audio(path, samples: np.ndarray, rate: int) -> None:
    samples = np.asarray(samples, dtype=np.float64).ravel()
    with open(path, "wb") as f:
        f.write(AUDIO_MAGIC + struct.pack("<IQ", rate, samples.size))
        f.write(samples.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    data = open(path, "rb").read()
    if data[:4] != TENSOR_MAGIC:
        raise FileFormatError("bad tensor magic")
    (ndim,) = struct.unpack_from("<B", data, 4)
    dims = struct.unpack_from(f"<{ndim}I", data, 5)
    off = 5 + 4 * ndim
    count = int(np.prod(dims))
    values = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    if values.size != count:
        raise FileFormatError("truncated tensor data")
    return values.astype(np.float64).reshape(dims)


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC + struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())
