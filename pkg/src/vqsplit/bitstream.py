"""Wire codec for sparse token payloads, plus bits-per-pixel accounting.

A packet carries the codeword indices a sender kept after top-K selection,
together with a binary mask of which grid positions those indices belong
to. The layout is fixed and bit-exact:

    offset  size                field
    0       4                   magic "CAFC"
    4       1                   version, currently 1
    5       2                   h (u16 LE), token grid rows
    7       2                   w (u16 LE), token grid cols
    9       4                   N (u32 LE), codebook size
    13      4                   K (u32 LE), number of kept tokens
    17      ceil(h*w/8)         mask, row-major, MSB-first, 1 = kept
    ...     ceil(K*b/8)         payload, b = ceil(log2 N) bits per index,
                                MSB-first, ascending spatial order,
                                zero-padded to a byte boundary

Everything here is pure and concurrency-safe.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CAFC"
VERSION = 1
HEADER_LEN = 17
_HEADER = struct.Struct("<4sBHHII")


class PacketFormatError(ValueError):
    """Magic or version bytes do not identify a packet we can read."""


class PacketLengthError(ValueError):
    """Buffer is shorter or longer than the header says it must be."""


class PacketCorruptionError(ValueError):
    """Structurally well-formed buffer with inconsistent contents."""


class EncodeError(ValueError):
    """Inputs cannot be represented in the wire format (index out of range)."""


class ContractError(RuntimeError):
    """Caller broke an encode precondition (mask/K mismatch)."""


def index_bits(n: int) -> int:
    """Bits needed for one codeword index, ceil(log2 n)."""
    if n < 2:
        raise ValueError(f"codebook size must be >= 2, got {n}")
    return (n - 1).bit_length()


@dataclass(frozen=True)
class IndexMap:
    """Row-major grid of codeword indices for one image."""

    h: int
    w: int
    indices: np.ndarray  # shape (h*w,), integer dtype

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if self.h <= 0 or self.w <= 0:
            raise ValueError(f"grid dims must be positive, got {self.h}x{self.w}")
        if idx.shape != (self.h * self.w,):
            raise ValueError(
                f"expected {self.h * self.w} indices, got shape {idx.shape}")
        if idx.size and idx.min() < 0:
            raise ValueError("negative codeword index")
        object.__setattr__(self, "indices", idx)


@dataclass(frozen=True)
class SelectionResult:
    """Which grid positions a sender kept: K, their positions, and the mask.

    kept_positions is strictly ascending and must be exactly the set bits of
    mask_bits; both facts are checked at construction.
    """

    K: int
    kept_positions: np.ndarray  # shape (K,), ascending
    mask_bits: np.ndarray       # shape (h*w,), bool

    def __post_init__(self):
        pos = np.asarray(self.kept_positions, dtype=np.int64)
        mask = np.asarray(self.mask_bits, dtype=bool)
        object.__setattr__(self, "kept_positions", pos)
        object.__setattr__(self, "mask_bits", mask)
        if mask.ndim != 1:
            raise ValueError("mask_bits must be one-dimensional")
        if int(mask.sum()) != self.K:
            raise ValueError(
                f"mask popcount {int(mask.sum())} != K {self.K}")
        if pos.shape != (self.K,):
            raise ValueError(f"expected {self.K} positions, got {pos.shape}")
        if not np.array_equal(pos, np.flatnonzero(mask)):
            raise ValueError("kept_positions must be the ascending set bits of mask_bits")

    @property
    def total(self) -> int:
        return int(self.mask_bits.size)

    @staticmethod
    def from_positions(positions, total: int) -> "SelectionResult":
        pos = np.sort(np.asarray(positions, dtype=np.int64))
        if pos.size and (pos[0] < 0 or pos[-1] >= total):
            raise ValueError("position out of grid range")
        if np.unique(pos).size != pos.size:
            raise ValueError("duplicate positions")
        mask = np.zeros(total, dtype=bool)
        mask[pos] = True
        return SelectionResult(K=int(pos.size), kept_positions=pos, mask_bits=mask)


@dataclass(frozen=True)
class DecodedPacket:
    h: int
    w: int
    N: int
    selection: SelectionResult
    indices: np.ndarray  # shape (K,), kept codeword indices, spatial order


@dataclass(frozen=True)
class RateReport:
    """Raw transmitted bits for one image and the resulting bits per pixel."""

    index_bits: int
    mask_bits: int
    bpp: float
    total_bits: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total_bits", self.index_bits + self.mask_bits)


def packet_byte_length(h: int, w: int, N: int, K: int) -> int:
    """Exact wire size in bytes for the given shape."""
    b = index_bits(N)
    return HEADER_LEN + math.ceil(h * w / 8) + math.ceil(K * b / 8)


def _pack_bits(bits: np.ndarray) -> bytes:
    # MSB-first within each byte; trailing pad bits are zero
    return np.packbits(bits.astype(np.uint8)).tobytes() if bits.size else b""


def encode_packet(index_map: IndexMap, sel: SelectionResult, N: int) -> bytes:
    """Serialize the kept indices of one grid. Deterministic byte-for-byte."""
    h, w = index_map.h, index_map.w
    if sel.total != h * w:
        raise ContractError(
            f"selection covers {sel.total} positions, grid has {h * w}")
    if int(sel.mask_bits.sum()) != sel.K:
        raise ContractError("selection mask popcount disagrees with K")
    if h > 0xFFFF or w > 0xFFFF:
        raise EncodeError("grid dims exceed u16 range")
    b = index_bits(N)
    kept = index_map.indices[sel.kept_positions]
    if kept.size and int(kept.max()) >= N:
        raise EncodeError(
            f"codeword index {int(kept.max())} >= codebook size {N}")

    header = _HEADER.pack(MAGIC, VERSION, h, w, N, sel.K)
    mask_bytes = _pack_bits(sel.mask_bits)
    if kept.size:
        shifts = np.arange(b - 1, -1, -1, dtype=np.int64)
        payload_bits = ((kept[:, None] >> shifts[None, :]) & 1).reshape(-1)
        payload = _pack_bits(payload_bits)
    else:
        payload = b""
    return header + mask_bytes + payload


def decode_packet(buf: bytes) -> DecodedPacket:
    """Exact inverse of encode_packet, with structural corruption checks."""
    if len(buf) < HEADER_LEN:
        raise PacketLengthError(
            f"buffer of {len(buf)} bytes is shorter than the {HEADER_LEN}-byte header")
    magic, version, h, w, n_codes, k = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise PacketFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise PacketFormatError(f"unsupported version {version}")
    if h == 0 or w == 0:
        raise PacketCorruptionError("zero grid dimension")
    if n_codes < 2:
        raise PacketCorruptionError(f"codebook size {n_codes} out of range")
    total = h * w
    if k > total:
        raise PacketCorruptionError(f"K {k} exceeds grid size {total}")

    b = index_bits(n_codes)
    mask_len = math.ceil(total / 8)
    payload_len = math.ceil(k * b / 8)
    expect = HEADER_LEN + mask_len + payload_len
    if len(buf) != expect:
        raise PacketLengthError(
            f"expected {expect} bytes for h={h} w={w} N={n_codes} K={k}, got {len(buf)}")

    mask_all = np.unpackbits(np.frombuffer(buf, np.uint8, mask_len, HEADER_LEN))
    mask = mask_all[:total].astype(bool)
    if mask_all[total:].any():
        raise PacketCorruptionError("nonzero padding bit in mask")
    if int(mask.sum()) != k:
        raise PacketCorruptionError(
            f"mask popcount {int(mask.sum())} != K {k}")

    payload_bits = np.unpackbits(
        np.frombuffer(buf, np.uint8, payload_len, HEADER_LEN + mask_len))
    if payload_bits[k * b:].any():
        raise PacketCorruptionError("nonzero padding bit in payload")
    if k:
        weights = 1 << np.arange(b - 1, -1, -1, dtype=np.int64)
        indices = payload_bits[:k * b].reshape(k, b).astype(np.int64) @ weights
    else:
        indices = np.zeros(0, dtype=np.int64)
    if indices.size and int(indices.max()) >= n_codes:
        raise PacketCorruptionError(
            f"decoded index {int(indices.max())} >= codebook size {n_codes}")

    sel = SelectionResult(K=int(k), kept_positions=np.flatnonzero(mask),
                          mask_bits=mask)
    return DecodedPacket(h=int(h), w=int(w), N=int(n_codes), selection=sel,
                         indices=indices)


def compute_bpp(K: int, N: int, h: int, w: int, H: int, W: int) -> RateReport:
    """Raw rate accounting: index bits plus mask bits over image pixels.

    The fixed 17-byte header is excluded; indices are fixed-length
    ceil(log2 N) bits each, no entropy coding.
    """
    for name, v in (("K", K), ("h", h), ("w", w), ("H", H), ("W", W)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    b = index_bits(N)
    idx_bits = K * b
    mask_bits = h * w
    return RateReport(index_bits=idx_bits, mask_bits=mask_bits,
                      bpp=(idx_bits + mask_bits) / (H * W))
