"""Bitstream container: a fixed-layout uncompressed header followed by the
packed block indices.

All multi-byte integers are little-endian; indices are packed LSB-first at a
fixed width per block.  The header plus the shared trained model is
sufficient to decode: it carries the global seed (permutation plans and
candidate streams are regenerated, never stored) and the per-level block
boundary tables produced by the KL-budgeted cut.  Payload rows are stored
highest hierarchy level first, rows in natural order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"RCBN"
VERSION = 1

MODALITIES = {"image": 0, "audio": 1, "video": 2, "pointseq": 3}
MODALITY_NAMES = {v: k for k, v in MODALITIES.items()}

FLAG_CROSS_PERMUTE = 1


class CorruptStreamError(ValueError):
    """Bitstream bytes do not parse or are internally inconsistent."""


class WrongModelError(ValueError):
    """Bitstream was produced against a different trained model."""


class BitWriter:
    def __init__(self):
        self.buf = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, value: int, bits: int) -> None:
        if not 0 <= value < (1 << bits):
            raise ValueError(f"value {value} does not fit in {bits} bits")
        self.acc |= value << self.nbits
        self.nbits += bits
        while self.nbits >= 8:
            self.buf.append(self.acc & 0xFF)
            self.acc >>= 8
            self.nbits -= 8

    def getvalue(self) -> bytes:
        out = bytes(self.buf)
        if self.nbits:
            out += bytes([self.acc & 0xFF])
        return out


class BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.acc = 0
        self.nbits = 0

    def read(self, bits: int) -> int:
        while self.nbits < bits:
            if self.pos >= len(self.data):
                raise CorruptStreamError("truncated payload")
            self.acc |= self.data[self.pos] << self.nbits
            self.pos += 1
            self.nbits += 8
        value = self.acc & ((1 << bits) - 1)
        self.acc >>= bits
        self.nbits -= bits
        return value


@dataclass
class LevelLayout:
    rows: int
    cols: int
    block_lengths: tuple[int, ...]

    @property
    def block_count(self) -> int:
        return len(self.block_lengths)


@dataclass
class Bitstream:
    """Parsed bitstream; `indices[l]` is an (rows, blocks) int array for
    level l, patch level first (matching the model's level order)."""

    model_hash: int
    modality: str
    out_dim: int
    signal_shape: tuple[int, ...]
    patched: bool
    patch_shape: tuple[int, ...]
    levels: int
    group_shape: tuple[int, ...]
    norm_lo: float
    norm_hi: float
    sample_rate: int
    global_seed: int
    block_bits: int
    flags: int
    layouts: list[LevelLayout] = field(default_factory=list)
    indices: list[np.ndarray] = field(default_factory=list)

    @property
    def cross_permute(self) -> bool:
        return bool(self.flags & FLAG_CROSS_PERMUTE)

    @property
    def total_blocks(self) -> int:
        return sum(l.rows * l.block_count for l in self.layouts)

    @property
    def payload_bits(self) -> int:
        return self.total_blocks * self.block_bits

    def header_bytes(self) -> bytes:
        n = len(self.signal_shape)
        out = bytearray()
        out += MAGIC
        out += struct.pack("<HQ", VERSION, self.model_hash)
        out += struct.pack("<BBB", MODALITIES[self.modality], self.out_dim, n)
        out += struct.pack(f"<{n}I", *self.signal_shape)
        out += struct.pack("<B", 1 if self.patched else 0)
        if self.patched:
            out += struct.pack(f"<{n}I", *self.patch_shape)
            out += struct.pack("<B", self.levels)
            out += struct.pack(f"<{n}I", *self.group_shape)
        out += struct.pack("<ddIQBBB", self.norm_lo, self.norm_hi, self.sample_rate,
                           self.global_seed, self.block_bits, self.flags, len(self.layouts))
        for lay in reversed(self.layouts):  # highest level first on the wire
            out += struct.pack("<III", lay.rows, lay.cols, lay.block_count)
            out += struct.pack(f"<{lay.block_count}H", *lay.block_lengths)
        return bytes(out)

    def to_bytes(self) -> bytes:
        writer = BitWriter()
        for lay, idx in zip(reversed(self.layouts), reversed(self.indices)):
            if idx.shape != (lay.rows, lay.block_count):
                raise CorruptStreamError("index matrix shape mismatch")
            for i in range(lay.rows):
                for k in range(lay.block_count):
                    writer.write(int(idx[i, k]), self.block_bits)
        return self.header_bytes() + writer.getvalue()


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.data):
            raise CorruptStreamError("truncated header")
        out = struct.unpack_from(fmt, self.data, self.off)
        self.off += size
        return out


def parse(data: bytes) -> Bitstream:
    cur = _Cursor(data)
    if cur.take("<4s")[0] != MAGIC:
        raise CorruptStreamError("bad magic")
    version, model_hash = cur.take("<HQ")
    if version != VERSION:
        raise CorruptStreamError(f"unsupported version {version}")
    mod_code, out_dim, n = cur.take("<BBB")
    if mod_code not in MODALITY_NAMES:
        raise CorruptStreamError(f"unknown modality {mod_code}")
    signal_shape = cur.take(f"<{n}I")
    (patched,) = cur.take("<B")
    if patched:
        patch_shape = cur.take(f"<{n}I")
        (levels,) = cur.take("<B")
        group_shape = cur.take(f"<{n}I")
    else:
        patch_shape, levels, group_shape = signal_shape, 1, (1,) * n
    norm_lo, norm_hi, sample_rate, seed, bits, flags, n_levels = cur.take("<ddIQBBB")
    layouts_top_first = []
    for _ in range(n_levels):
        rows, cols, n_blocks = cur.take("<III")
        lengths = cur.take(f"<{n_blocks}H")
        if sum(lengths) != cols:
            raise CorruptStreamError("block lengths do not tile the level")
        layouts_top_first.append(LevelLayout(rows, cols, tuple(lengths)))
    layouts = list(reversed(layouts_top_first))
    bs = Bitstream(model_hash, MODALITY_NAMES[mod_code], out_dim, tuple(signal_shape),
                   bool(patched), tuple(patch_shape), levels, tuple(group_shape),
                   norm_lo, norm_hi, sample_rate, seed, bits, flags, layouts)
    reader = BitReader(data[cur.off:])
    indices_top_first = []
    for lay in layouts_top_first:
        idx = np.zeros((lay.rows, lay.block_count), dtype=np.int64)
        for i in range(lay.rows):
            for k in range(lay.block_count):
                idx[i, k] = reader.read(bits)
        indices_top_first.append(idx)
    bs.indices = list(reversed(indices_top_first))
    return bs
