"""Bit-exact latent serialization.

Fixed-rate index packing and prior-driven adaptive arithmetic coding, both
behind a self-describing little-endian header. The arithmetic coder is a
32-bit range coder with pending-bit carry handling; per-symbol probabilities
are quantized to 16-bit cumulative tables with a +1 floor so every symbol
stays decodable.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .prior import PriorKind, PriorModel
from .schemes import CodecModel, LatentConditioner

STREAM_MAGIC = b"FRAEBITS"
STREAM_VERSION = 1

MODE_FIXED = 0
MODE_ARITH = 1

_HEADER_FMT = "<8sHBBBHBIQ"
HEADER_SIZE = struct.calcsize(_HEADER_FMT)

PROB_BITS = 16
PROB_SCALE = 1 << PROB_BITS

_FULL = 1 << 32
_HALF = _FULL >> 1
_QUARTER = _FULL >> 2
_MASK = _FULL - 1

# A healthy decode reads at most the payload plus the 32-bit register
# lookahead and byte padding; far beyond that means the stream was cut short.
_MAX_OVERRUN = 64


class BitstreamError(ValueError):
    """Malformed, truncated, or mismatched bitstream."""


@dataclass
class StreamHeader:
    mode: int
    scheme_id: int
    prior_kind: int
    bottleneck: int
    levels: int
    frame_count: int
    model_hash: int
    version: int = STREAM_VERSION

    def pack(self) -> bytes:
        return struct.pack(_HEADER_FMT, STREAM_MAGIC, self.version, self.mode,
                           self.scheme_id, self.prior_kind, self.bottleneck,
                           self.levels, self.frame_count, self.model_hash)

    @classmethod
    def unpack(cls, data: bytes) -> "StreamHeader":
        if len(data) < HEADER_SIZE:
            raise BitstreamError("stream shorter than its header")
        magic, version, mode, scheme_id, prior_kind, bottleneck, levels, \
            frame_count, model_hash = struct.unpack_from(_HEADER_FMT, data, 0)
        if magic != STREAM_MAGIC:
            raise BitstreamError("not a latent bitstream (bad magic)")
        if version != STREAM_VERSION:
            raise BitstreamError(f"unsupported stream version {version}")
        if mode not in (MODE_FIXED, MODE_ARITH):
            raise BitstreamError(f"unknown stream mode {mode}")
        return cls(mode, scheme_id, prior_kind, bottleneck, levels,
                   frame_count, model_hash, version)


class BitWriter:
    """MSB-first bit sink; tracks the exact bit count before byte padding."""

    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._filled = 0
        self.bit_count = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | (bit & 1)
        self._filled += 1
        self.bit_count += 1
        if self._filled == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._filled = 0

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._filled:
            out.append(self._acc << (8 - self._filled))
        return bytes(out)


class BitReader:
    """MSB-first bit source; reads past the end yield zeros and are counted."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.overrun = 0

    def read(self) -> int:
        byte_idx = self._pos >> 3
        if byte_idx >= len(self._data):
            self._pos += 1
            self.overrun += 1
            return 0
        bit = (self._data[byte_idx] >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit


# ---------------------------------------------------------------------------
# Fixed-rate packing

def _validate_latents(latents: np.ndarray, header: StreamHeader) -> np.ndarray:
    idx = np.asarray(latents, dtype=np.int64)
    if idx.ndim != 2:
        raise BitstreamError(f"latents must be [T, D], got shape {idx.shape}")
    if idx.shape != (header.frame_count, header.bottleneck):
        raise BitstreamError(f"latent shape {idx.shape} does not match header "
                             f"({header.frame_count}, {header.bottleneck})")
    if idx.size and (idx.min() < 0 or idx.max() >= header.levels):
        raise BitstreamError(f"latent index out of range [0, {header.levels})")
    return idx


def pack_fixed(latents: np.ndarray, header: StreamHeader) -> bytes:
    """Header plus log2(K) bits per symbol, row-major over (frame, dim)."""
    if header.mode != MODE_FIXED:
        raise BitstreamError("pack_fixed needs a fixed-mode header")
    levels = header.levels
    if levels < 2 or levels & (levels - 1):
        raise BitstreamError(f"fixed-rate packing needs a power-of-two alphabet, got K={levels}")
    idx = _validate_latents(latents, header)
    bits = levels.bit_length() - 1
    writer = BitWriter()
    for symbol in idx.reshape(-1):
        for shift in range(bits - 1, -1, -1):
            writer.write((int(symbol) >> shift) & 1)
    return header.pack() + writer.getvalue()


def unpack_fixed(data: bytes) -> tuple[StreamHeader, np.ndarray]:
    header = StreamHeader.unpack(data)
    if header.mode != MODE_FIXED:
        raise BitstreamError("not a fixed-rate stream")
    levels = header.levels
    if levels < 2 or levels & (levels - 1):
        raise BitstreamError(f"fixed-rate stream with non-power-of-two K={levels}")
    bits = levels.bit_length() - 1
    n_symbols = header.frame_count * header.bottleneck
    expected = (n_symbols * bits + 7) // 8
    payload = data[HEADER_SIZE:]
    if len(payload) != expected:
        raise BitstreamError(f"fixed payload is {len(payload)} bytes, expected {expected}")
    reader = BitReader(payload)
    symbols = np.empty(n_symbols, dtype=np.int64)
    for i in range(n_symbols):
        value = 0
        for _ in range(bits):
            value = (value << 1) | reader.read()
        symbols[i] = value
    latents = symbols.reshape(header.frame_count, header.bottleneck)
    if latents.size and latents.max() >= levels:
        raise BitstreamError(f"decoded index out of range [0, {levels})")
    return header, latents


# ---------------------------------------------------------------------------
# Probability quantization

def quantize_freqs(probs: np.ndarray) -> np.ndarray:
    """Integer symbol frequencies: each >= 1, total <= 2**16."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 0.0, None)
    total = p.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise BitstreamError("probability vector is not normalizable")
    p = p / total
    return np.floor(p * (PROB_SCALE - p.size)).astype(np.int64) + 1


def _cumulative(freqs: np.ndarray) -> np.ndarray:
    cum = np.zeros(freqs.size + 1, dtype=np.int64)
    np.cumsum(freqs, out=cum[1:])
    return cum


# ---------------------------------------------------------------------------
# Arithmetic coder core (classic low/high range coder with pending bits)

class _ArithEncoder:
    def __init__(self, writer: BitWriter):
        self._writer = writer
        self._low = 0
        self._high = _MASK
        self._pending = 0

    def _emit(self, bit: int) -> None:
        self._writer.write(bit)
        inverse = bit ^ 1
        for _ in range(self._pending):
            self._writer.write(inverse)
        self._pending = 0

    def encode(self, cum: np.ndarray, symbol: int) -> None:
        total = int(cum[-1])
        span = self._high - self._low + 1
        self._high = self._low + span * int(cum[symbol + 1]) // total - 1
        self._low = self._low + span * int(cum[symbol]) // total
        while True:
            if self._high < _HALF:
                self._emit(0)
            elif self._low >= _HALF:
                self._emit(1)
                self._low -= _HALF
                self._high -= _HALF
            elif self._low >= _QUARTER and self._high < 3 * _QUARTER:
                self._pending += 1
                self._low -= _QUARTER
                self._high -= _QUARTER
            else:
                break
            self._low <<= 1
            self._high = (self._high << 1) | 1

    def finish(self) -> None:
        # One final quarter-selection bit pins the code value inside
        # [low, high] once the decoder pads with zeros.
        self._pending += 1
        self._emit(0 if self._low < _QUARTER else 1)


class _ArithDecoder:
    def __init__(self, reader: BitReader):
        self._reader = reader
        self._low = 0
        self._high = _MASK
        self._code = 0
        for _ in range(32):
            self._code = (self._code << 1) | reader.read()

    def decode(self, cum: np.ndarray) -> int:
        total = int(cum[-1])
        span = self._high - self._low + 1
        value = ((self._code - self._low + 1) * total - 1) // span
        symbol = int(np.searchsorted(cum, value, side="right")) - 1
        self._high = self._low + span * int(cum[symbol + 1]) // total - 1
        self._low = self._low + span * int(cum[symbol]) // total
        while True:
            if self._high < _HALF:
                pass
            elif self._low >= _HALF:
                self._low -= _HALF
                self._high -= _HALF
                self._code -= _HALF
            elif self._low >= _QUARTER and self._high < 3 * _QUARTER:
                self._low -= _QUARTER
                self._high -= _QUARTER
                self._code -= _QUARTER
            else:
                break
            self._low <<= 1
            self._high = (self._high << 1) | 1
            self._code = (self._code << 1) | self._reader.read()
        return symbol


# ---------------------------------------------------------------------------
# Prior-driven latent streams

@dataclass
class ArithStats:
    bit_count: int        # exact bits emitted before byte padding
    ideal_bits: float     # NLL of the stream under the quantized tables


class _Conditioner:
    """Minimal protocol the coder needs; see schemes.LatentConditioner."""

    def conditioning(self):
        return None

    def advance(self, indices_row) -> None:
        pass


def encode_arith(latents: np.ndarray, prior: PriorModel,
                 conditioner, header: StreamHeader) -> tuple[bytes, ArithStats]:
    """Arithmetic-code a latent sequence under the prior.

    The conditioner is advanced frame by frame on the already-coded indices,
    mirroring exactly what the decoder can reproduce.
    """
    if header.mode != MODE_ARITH:
        raise BitstreamError("encode_arith needs an arithmetic-mode header")
    idx = _validate_latents(latents, header)
    writer = BitWriter()
    encoder = _ArithEncoder(writer)
    ideal = 0.0
    for t in range(header.frame_count):
        probs = prior.prob_rows(conditioner.conditioning())
        for d in range(header.bottleneck):
            cum = _cumulative(quantize_freqs(probs[d]))
            symbol = int(idx[t, d])
            ideal += math.log2(int(cum[-1]) / int(cum[symbol + 1] - cum[symbol]))
            encoder.encode(cum, symbol)
        conditioner.advance(idx[t])
    encoder.finish()
    payload = writer.getvalue()
    return header.pack() + payload, ArithStats(writer.bit_count, ideal)


def decode_arith(data: bytes, prior: PriorModel,
                 conditioner) -> tuple[StreamHeader, np.ndarray]:
    header = StreamHeader.unpack(data)
    if header.mode != MODE_ARITH:
        raise BitstreamError("not an arithmetic-coded stream")
    reader = BitReader(data[HEADER_SIZE:])
    decoder = _ArithDecoder(reader)
    latents = np.empty((header.frame_count, header.bottleneck), dtype=np.int64)
    for t in range(header.frame_count):
        probs = prior.prob_rows(conditioner.conditioning())
        for d in range(header.bottleneck):
            cum = _cumulative(quantize_freqs(probs[d]))
            latents[t, d] = decoder.decode(cum)
        conditioner.advance(latents[t])
    if reader.overrun > _MAX_OVERRUN:
        raise BitstreamError(
            f"stream exhausted {reader.overrun} bits before the header's "
            f"{header.frame_count} frames were decoded")
    return header, latents


# ---------------------------------------------------------------------------
# Model-aware wrappers

def make_header(model: CodecModel, frame_count: int, mode: int) -> StreamHeader:
    return StreamHeader(mode=mode, scheme_id=int(model.scheme),
                        prior_kind=int(model.prior.kind),
                        bottleneck=model.bottleneck, levels=model.levels,
                        frame_count=frame_count, model_hash=model.hash())


def encode_latents(model: CodecModel, latents: np.ndarray, mode: int
                   ) -> tuple[bytes, ArithStats | None]:
    """Serialize a [T, D] latent sequence under the model's own prior."""
    latents = np.asarray(latents, dtype=np.int64)
    header = make_header(model, latents.shape[0], mode)
    if mode == MODE_FIXED:
        return pack_fixed(latents, header), None
    if mode == MODE_ARITH:
        return encode_arith(latents, model.prior, LatentConditioner(model), header)
    raise BitstreamError(f"unknown stream mode {mode}")


def decode_latents(model: CodecModel, data: bytes) -> tuple[StreamHeader, np.ndarray]:
    """Parse a stream and recover its latents, checking model consistency."""
    header = StreamHeader.unpack(data)
    if header.model_hash != model.hash():
        raise BitstreamError("model hash mismatch: stream was produced by different weights")
    if (header.bottleneck, header.levels) != (model.bottleneck, model.levels):
        raise BitstreamError("stream bottleneck/levels do not match the model")
    if header.scheme_id != int(model.scheme):
        raise BitstreamError("stream scheme does not match the model")
    if header.mode == MODE_FIXED:
        return unpack_fixed(data)
    return decode_arith(data, model.prior, LatentConditioner(model))


def fixed_stream_bits(frame_count: int, bottleneck: int, levels: int) -> int:
    """Exact payload size in bits of a fixed-rate stream (before padding)."""
    return frame_count * bottleneck * (levels.bit_length() - 1)
