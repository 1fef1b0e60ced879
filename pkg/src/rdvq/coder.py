"""Range coding of index sequences and the bitstream container.

The coder is a carry-less (Subbotin-style) range coder with a 64-bit state and
byte-wise renormalisation. Probabilities are quantised to integer counts that
sum to ``2**precision`` with every symbol keeping at least one count.

Stream layout (little-endian)::

    magic      4s   b"RDVQ"
    version    u16
    orig_h     u32
    orig_w     u32
    num_scales u8
    scale dims num_scales x (u16 height, u16 width)   token grid of each scale
    prefix_cut u32  first decoding number that is *not* transmitted
    model_hash u64
    payload_len u32
    payload_crc u32 (zlib.crc32)
    payload    payload_len bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

PRECISION = 16
STATE_BITS = 64
MASK = (1 << STATE_BITS) - 1
TOP = 1 << (STATE_BITS - 8)
BOT = 1 << (STATE_BITS - 16)


class DecodeError(ValueError):
    pass


def quantize_probs(probs, precision: int = PRECISION) -> np.ndarray:
    """Integer CDFs for probability rows (``[..., K]`` -> ``[..., K + 1]``).

    Counts are rounded by largest remainder (ties to the lower index); symbols
    left at zero are lifted to one count, paid for by the largest count (one
    count at a time from the running maximum if the largest cannot cover it).
    """
    p = np.asarray(probs, dtype=np.float64)
    lead = p.shape[:-1]
    p = p.reshape(-1, p.shape[-1])
    total = 1 << precision
    K = p.shape[-1]
    if K > total:
        raise ValueError(f"{K} symbols cannot all get a count at precision {precision}")
    p = np.clip(p, 0.0, None)
    p = p / p.sum(-1, keepdims=True)
    scaled = p * total
    counts = np.floor(scaled).astype(np.int64)
    rem = scaled - counts
    deficit = total - counts.sum(-1)
    rank = np.argsort(-rem, axis=-1, kind="stable")
    bump = np.arange(K)[None, :] < deficit[:, None]
    np.put_along_axis(counts, rank, np.take_along_axis(counts, rank, -1) + bump, -1)
    for row in np.nonzero((counts == 0).any(-1))[0]:
        c = counts[row]
        zeros = c == 0
        need = int(zeros.sum())
        c[zeros] = 1
        top = np.argmax(c)
        if c[top] > need:
            c[top] -= need
            continue
        for _ in range(need):
            c[np.argmax(c)] -= 1
    cdf = np.zeros((p.shape[0], K + 1), dtype=np.int64)
    np.cumsum(counts, axis=-1, out=cdf[:, 1:])
    return cdf.reshape(lead + (K + 1,))


def cdf_probabilities(cdf) -> np.ndarray:
    cdf = np.asarray(cdf)
    return np.diff(cdf, axis=-1) / cdf[..., -1:]


def _flush_bytes(rng: int) -> int:
    n = 1
    while (1 << (STATE_BITS - 8 * n)) > rng:
        n += 1
    return n


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.rng = MASK
        self.out = bytearray()
        self.count = 0

    def encode(self, symbol: int, cdf) -> None:
        K = len(cdf) - 1
        if not 0 <= symbol < K:
            raise ValueError(f"symbol {symbol} outside alphabet of size {K}")
        total = int(cdf[-1])
        start, stop = int(cdf[symbol]), int(cdf[symbol + 1])
        if stop <= start:
            raise ValueError(f"symbol {symbol} has zero probability")
        r = self.rng // total
        self.low += r * start
        self.rng = r * (stop - start)
        self._normalize()
        self.count += 1

    def _normalize(self) -> None:
        low, rng, out = self.low, self.rng, self.out
        while True:
            if (low ^ (low + rng)) >= TOP:
                if rng >= BOT:
                    break
                rng = (-low) & (BOT - 1)
            out.append(low >> (STATE_BITS - 8))
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low, self.rng = low, rng

    def finish(self) -> bytes:
        if self.count == 0:
            return b""
        n = _flush_bytes(self.rng)
        unit = 1 << (STATE_BITS - 8 * n)
        v = -(-self.low // unit) * unit  # smallest multiple of unit >= low, inside [low, low + rng)
        self.out.extend(v.to_bytes(8, "big")[:n])
        return bytes(self.out)


class RangeDecoder:
    """Reads a stream produced by :class:`RangeEncoder`; bytes past the end read as zero."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.low = 0
        self.rng = MASK
        self.code = 0
        self.count = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        p = self.pos
        self.pos += 1
        if p < len(self.data):
            return self.data[p]
        if p >= len(self.data) + 8:
            raise DecodeError("stream truncated")
        return 0

    def decode(self, cdf) -> int:
        cdf = np.asarray(cdf)
        total = int(cdf[-1])
        r = self.rng // total
        value = min((self.code - self.low) // r, total - 1)
        symbol = int(np.searchsorted(cdf, value, side="right")) - 1
        start, stop = int(cdf[symbol]), int(cdf[symbol + 1])
        self.low += r * start
        self.rng = r * (stop - start)
        low, rng, code = self.low, self.rng, self.code
        while True:
            if (low ^ (low + rng)) >= TOP:
                if rng >= BOT:
                    break
                rng = (-low) & (BOT - 1)
            code = ((code << 8) | self._byte()) & MASK
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self.low, self.rng, self.code = low, rng, code
        self.count += 1
        return symbol

    def finish(self) -> None:
        """Check that the stream ends with exactly the encoder's canonical flush."""
        if self.count == 0:
            if self.data:
                raise DecodeError("non-empty stream with nothing decoded")
            return
        body = self.pos - 8
        flush = _flush_bytes(self.rng)
        if body + flush != len(self.data):
            raise DecodeError(f"stream length {len(self.data)} does not match decoded content "
                              f"({body + flush} bytes expected)")
        unit = 1 << (STATE_BITS - 8 * flush)
        tail = (-(-self.low // unit) * unit).to_bytes(8, "big")[:flush]
        if self.data[body:] != tail:
            raise DecodeError("stream tail does not match the decoded state")


def encode_sequence(indices: Sequence[int], cdfs) -> bytes:
    cdfs = np.asarray(cdfs)
    if len(indices) != len(cdfs):
        raise ValueError(f"{len(indices)} symbols but {len(cdfs)} CDFs")
    enc = RangeEncoder()
    for s, cdf in zip(indices, cdfs):
        enc.encode(int(s), cdf)
    return enc.finish()


def decode_sequence(data: bytes, cdf_provider: Callable[[int, list[int]], np.ndarray],
                    count: int) -> list[int]:
    """Decode ``count`` symbols; ``cdf_provider(t, decoded)`` yields the t-th CDF."""
    if count == 0:
        if data:
            raise DecodeError("non-empty payload for an empty sequence")
        return []
    dec = RangeDecoder(data)
    out: list[int] = []
    for t in range(count):
        out.append(dec.decode(cdf_provider(t, out)))
    dec.finish()
    return out


def ideal_bits(indices, cdfs) -> float:
    """``-sum log2 p_quantized(index)``."""
    cdfs = np.asarray(cdfs, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    counts = np.take_along_axis(cdfs, idx[:, None] + 1, -1)[:, 0] - np.take_along_axis(cdfs, idx[:, None], -1)[:, 0]
    return float(-np.log2(counts / cdfs[:, -1]).sum())


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

MAGIC = b"RDVQ"
VERSION = 1
_FIXED = struct.Struct("<4sHIIB")
_TAIL = struct.Struct("<IQII")


@dataclass
class Bitstream:
    orig_h: int
    orig_w: int
    scale_dims: list[tuple[int, int]]
    prefix_cut: int
    model_hash: int
    payload: bytes
    version: int = VERSION

    def header_bytes(self) -> bytes:
        parts = [_FIXED.pack(MAGIC, self.version, self.orig_h, self.orig_w, len(self.scale_dims))]
        parts += [struct.pack("<HH", h, w) for h, w in self.scale_dims]
        parts.append(_TAIL.pack(self.prefix_cut, self.model_hash, len(self.payload),
                                zlib.crc32(self.payload)))
        return b"".join(parts)

    def to_bytes(self) -> bytes:
        return self.header_bytes() + self.payload

    def __len__(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _FIXED.size:
            raise DecodeError("stream shorter than its header")
        magic, version, h, w, n = _FIXED.unpack_from(data, 0)
        if magic != MAGIC:
            raise DecodeError(f"bad magic {magic!r}")
        if version != VERSION:
            raise DecodeError(f"unsupported stream version {version}")
        pos = _FIXED.size
        if len(data) < pos + 4 * n + _TAIL.size:
            raise DecodeError("stream shorter than its header")
        dims = [struct.unpack_from("<HH", data, pos + 4 * i) for i in range(n)]
        pos += 4 * n
        cut, mhash, plen, crc = _TAIL.unpack_from(data, pos)
        pos += _TAIL.size
        payload = data[pos:]
        if len(payload) != plen:
            raise DecodeError(f"payload is {len(payload)} bytes, header says {plen}")
        if zlib.crc32(payload) != crc:
            raise DecodeError("payload checksum mismatch")
        return cls(h, w, [tuple(d) for d in dims], cut, mhash, bytes(payload), version)


def bpp_from_bytes(num_bytes: int, h: int, w: int) -> float:
    return 8.0 * num_bytes / (h * w)


def measure_rate(stream: Bitstream | bytes, h: int, w: int) -> float:
    """Bits per pixel of the whole stream (header and payload)."""
    n = len(stream) if isinstance(stream, (bytes, bytearray)) else len(stream.to_bytes())
    return bpp_from_bytes(n, h, w)
