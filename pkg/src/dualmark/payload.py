"""Metadata payloads: canonical Huffman coding, CRC-16, and a QR-like bit matrix.

The bit matrix is a deliberately simple stand-in for a standard 2-D barcode:
a B x B cell grid with three solid 3x3 finder blocks (top-left, top-right,
bottom-left), the bit stream placed row-major in the remaining cells, and a
CRC-16 in place of error-correction coding. Orientation is recovered by
scoring the finder blocks over all eight dihedral placements and validating
the checksum.

Bit stream layout inside the matrix:
    [count-1: 8 bits] [count x (symbol: 8, code length: 8)]   Huffman table
    [Huffman-coded record bytes]                              payload
    [CRC-16/CCITT-FALSE of the raw record bytes: 16 bits]
remaining cells padded with an alternating 0/1 pattern.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedPayload, RejectedInput, UnreadableWatermark

# ---------------------------------------------------------------------------
# Metadata record
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetadataRecord:
    """ipv4 (4 bytes) + unix timestamp (u64) + model tag (4 bytes) = 16 bytes."""

    ipv4: bytes
    timestamp: int
    model_id: bytes

    def __post_init__(self):
        if len(self.ipv4) != 4:
            raise RejectedInput(f"ipv4 must be 4 bytes, got {len(self.ipv4)}")
        if len(self.model_id) != 4:
            raise RejectedInput(f"model_id must be 4 bytes, got {len(self.model_id)}")
        if not 0 <= self.timestamp < 2 ** 64:
            raise RejectedInput(f"timestamp {self.timestamp} outside u64 range")

    def to_bytes(self) -> bytes:
        return self.ipv4 + struct.pack(">Q", self.timestamp) + self.model_id

    @staticmethod
    def from_bytes(blob: bytes) -> "MetadataRecord":
        if len(blob) != 16:
            raise MalformedPayload(f"record must be 16 bytes, got {len(blob)}")
        ts, = struct.unpack(">Q", blob[4:12])
        return MetadataRecord(ipv4=blob[:4], timestamp=ts, model_id=blob[12:])

    def to_text(self) -> str:
        ip = ".".join(str(b) for b in self.ipv4)
        return f"ip={ip} ts={self.timestamp} id={self.model_id.hex()}"

    @staticmethod
    def from_text(text: str) -> "MetadataRecord":
        fields = dict(part.split("=", 1) for part in text.split())
        ipv4 = bytes(int(x) for x in fields["ip"].split("."))
        return MetadataRecord(ipv4=ipv4, timestamp=int(fields["ts"]),
                              model_id=bytes.fromhex(fields["id"]))


# ---------------------------------------------------------------------------
# Canonical Huffman
# ---------------------------------------------------------------------------


@dataclass
class HuffmanTable:
    """Canonical code lengths per symbol; codes derived from (length, symbol)."""

    lengths: dict  # symbol (int 0..255) -> code length

    def codes(self) -> dict:
        """symbol -> (code value, length), canonical assignment."""
        ordered = sorted(self.lengths.items(), key=lambda kv: (kv[1], kv[0]))
        out = {}
        code = 0
        prev_len = ordered[0][1]
        for sym, length in ordered:
            code <<= (length - prev_len)
            out[sym] = (code, length)
            code += 1
            prev_len = length
        return out

    def kraft_sum(self) -> float:
        return sum(2.0 ** -l for l in self.lengths.values())

    def to_bits(self) -> np.ndarray:
        entries = sorted(self.lengths.items())
        bits = _int_to_bits(len(entries) - 1, 8)
        for sym, length in entries:
            bits.extend(_int_to_bits(sym, 8))
            bits.extend(_int_to_bits(length, 8))
        return np.array(bits, dtype=np.uint8)

    @staticmethod
    def from_bits(bits: np.ndarray, offset: int = 0):
        """Parse a serialized table; returns (table, next offset)."""
        if offset + 8 > len(bits):
            raise MalformedPayload("bit stream too short for table header")
        count = _bits_to_int(bits[offset:offset + 8]) + 1
        offset += 8
        lengths = {}
        for _ in range(count):
            if offset + 16 > len(bits):
                raise MalformedPayload("bit stream too short for table entries")
            sym = _bits_to_int(bits[offset:offset + 8])
            length = _bits_to_int(bits[offset + 8:offset + 16])
            if length == 0 or sym in lengths:
                raise MalformedPayload("invalid table entry")
            lengths[sym] = length
            offset += 16
        return HuffmanTable(lengths), offset


def _int_to_bits(value: int, width: int) -> list:
    return [(value >> (width - 1 - i)) & 1 for i in range(width)]


def _bits_to_int(bits) -> int:
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


def _huffman_lengths(freqs: dict) -> dict:
    """Code lengths by Huffman's algorithm with deterministic tie-breaking."""
    if len(freqs) == 1:
        return {next(iter(freqs)): 1}
    heap = []
    seq = 0
    for sym in sorted(freqs):
        heapq.heappush(heap, (freqs[sym], seq, [sym]))
        seq += 1
    depths = {sym: 0 for sym in freqs}
    while len(heap) > 1:
        fa, _, syms_a = heapq.heappop(heap)
        fb, _, syms_b = heapq.heappop(heap)
        for sym in syms_a + syms_b:
            depths[sym] += 1
        heapq.heappush(heap, (fa + fb, seq, syms_a + syms_b))
        seq += 1
    return depths


def huffman_encode(data: bytes):
    """Canonical Huffman over byte frequencies; returns (table, payload bits)."""
    if len(data) == 0:
        raise RejectedInput("huffman_encode: empty input")
    freqs = {}
    for byte in data:
        freqs[byte] = freqs.get(byte, 0) + 1
    table = HuffmanTable(_huffman_lengths(freqs))
    codes = table.codes()
    bits = []
    for byte in data:
        code, length = codes[byte]
        bits.extend(_int_to_bits(code, length))
    return table, np.array(bits, dtype=np.uint8)


def huffman_decode(table: HuffmanTable, bits, n_symbols: int | None = None) -> bytes:
    """Exact inverse of huffman_encode.

    Decodes until the bits are exhausted, or until n_symbols bytes when given.
    A stream ending mid-codeword raises MalformedPayload.
    """
    decode_map = {v: sym for sym, v in table.codes().items()}
    max_len = max(table.lengths.values())
    out = bytearray()
    value = 0
    length = 0
    for b in np.asarray(bits, dtype=np.uint8):
        value = (value << 1) | int(b)
        length += 1
        if length > max_len:
            raise MalformedPayload("bit run exceeds longest codeword")
        sym = decode_map.get((value, length))
        if sym is not None:
            out.append(sym)
            value = 0
            length = 0
            if n_symbols is not None and len(out) == n_symbols:
                return bytes(out)
    if length != 0 or (n_symbols is not None and len(out) != n_symbols):
        raise MalformedPayload("bit stream ended mid-codeword")
    return bytes(out)


def huffman_decode_stream(table: HuffmanTable, bits, offset: int, n_symbols: int):
    """Decode exactly n_symbols starting at offset; returns (bytes, next offset)."""
    decode_map = {v: sym for sym, v in table.codes().items()}
    max_len = max(table.lengths.values())
    out = bytearray()
    value = 0
    length = 0
    pos = offset
    total = len(bits)
    while len(out) < n_symbols:
        if pos >= total:
            raise MalformedPayload("bit stream ended mid-codeword")
        value = (value << 1) | int(bits[pos])
        pos += 1
        length += 1
        if length > max_len:
            raise MalformedPayload("bit run exceeds longest codeword")
        sym = decode_map.get((value, length))
        if sym is not None:
            out.append(sym)
            value = 0
            length = 0
    return bytes(out), pos


# ---------------------------------------------------------------------------
# CRC-16/CCITT-FALSE
# ---------------------------------------------------------------------------


def crc16(data: bytes) -> int:
    """Polynomial 0x1021, init 0xFFFF, no reflection, no xorout."""
    crc = 0xFFFF
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            if crc & 0x8000:
                crc = ((crc << 1) ^ 0x1021) & 0xFFFF
            else:
                crc = (crc << 1) & 0xFFFF
    return crc


# ---------------------------------------------------------------------------
# Bit matrix
# ---------------------------------------------------------------------------

FINDER_SIZE = 3
N_FINDER_CELLS = 3 * FINDER_SIZE * FINDER_SIZE


def _finder_mask(B: int) -> np.ndarray:
    mask = np.zeros((B, B), dtype=bool)
    f = FINDER_SIZE
    mask[:f, :f] = True          # top-left
    mask[:f, B - f:] = True      # top-right
    mask[B - f:, :f] = True      # bottom-left
    return mask


@dataclass
class BitMatrix:
    """B x B cell grid; bit 1 renders dark. replication = pixels per cell."""

    B: int
    cells: np.ndarray
    replication: int = 3
    record: MetadataRecord | None = field(default=None, compare=False)

    def render(self) -> np.ndarray:
        """Float image in [0, 1]; dark cells are 0.0, light cells 1.0."""
        img = 1.0 - self.cells.astype(np.float64)
        return np.kron(img, np.ones((self.replication, self.replication)))


def capacity(B: int) -> int:
    return B * B - N_FINDER_CELLS


def min_side_for(n_bits: int) -> int:
    B = FINDER_SIZE * 2 + 1
    while capacity(B) < n_bits:
        B += 1
    return B


def _payload_bits(record: MetadataRecord) -> np.ndarray:
    raw = record.to_bytes()
    table, payload = huffman_encode(raw)
    crc_bits = np.array(_int_to_bits(crc16(raw), 16), dtype=np.uint8)
    return np.concatenate([table.to_bits(), payload, crc_bits])


def encode_payload(record: MetadataRecord, B: int = 16, c: int = 3) -> BitMatrix:
    """Pack a record into a B x B bit matrix with replication c."""
    bits = _payload_bits(record)
    if len(bits) > capacity(B):
        raise RejectedInput(
            f"payload needs {len(bits)} cells but B={B} holds {capacity(B)}; "
            f"minimum B is {min_side_for(len(bits))}")
    cells = np.zeros((B, B), dtype=np.uint8)
    finder = _finder_mask(B)
    cells[finder] = 1
    slots = np.argwhere(~finder)  # row-major data cells
    for idx, (r, col) in enumerate(slots):
        if idx < len(bits):
            cells[r, col] = bits[idx]
        else:
            cells[r, col] = idx & 1  # alternating pad
    return BitMatrix(B=B, cells=cells, replication=c, record=record)


def _parse_cells(cells: np.ndarray) -> MetadataRecord:
    """Table + 16 record bytes + CRC out of a cell grid; raises on mismatch."""
    finder = _finder_mask(cells.shape[0])
    bits = cells[~finder].astype(np.uint8)
    table, offset = HuffmanTable.from_bits(bits, 0)
    raw, offset = huffman_decode_stream(table, bits, offset, 16)
    if offset + 16 > len(bits):
        raise MalformedPayload("bit stream too short for checksum")
    crc_stored = _bits_to_int(bits[offset:offset + 16])
    if crc16(raw) != crc_stored:
        raise MalformedPayload("checksum mismatch")
    return MetadataRecord.from_bytes(raw)


def _orientations(cells: np.ndarray):
    """All eight dihedral placements, fixed order: 4 rotations, then flipped."""
    out = []
    for flip in (False, True):
        grid = np.fliplr(cells) if flip else cells
        for k in range(4):
            out.append(np.rot90(grid, k))
    return out


def _finder_score(cells: np.ndarray) -> float:
    """Fraction of expected finder cells dark minus darkness of the free corner."""
    B = cells.shape[0]
    f = FINDER_SIZE
    expected = (cells[:f, :f].mean() + cells[:f, B - f:].mean()
                + cells[B - f:, :f].mean()) / 3.0
    free = cells[B - f:, B - f:].mean()
    return float(expected - free)


def cells_from_image(image: np.ndarray, B: int, c: int) -> np.ndarray:
    """Binarize at the midpoint of the image's own range, then majority-vote cells."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise RejectedInput(f"expected a grayscale image, got shape {img.shape}")
    side = B * c
    if img.shape != (side, side):
        img = _aligned_views(img, B, c)[0]
    lo, hi = img.min(), img.max()
    dark = img < (lo + hi) / 2.0 if hi > lo else np.zeros_like(img, dtype=bool)
    blocks = dark.reshape(B, c, B, c).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.uint8)


def _aligned_views(img: np.ndarray, B: int, c: int):
    """All side x side crops of an image whose size is off by up to one cell.

    Sizes beyond the slack are rejected; undersized images are padded with a
    neutral 0.5 before cropping.
    """
    side = B * c
    h, w = img.shape
    if abs(h - side) > c or abs(w - side) > c:
        raise RejectedInput(
            f"image shape {img.shape} too far from {side}x{side} "
            f"for replication {c} to absorb")
    if (h, w) == (side, side):
        return [img]
    big = np.pad(img, ((0, max(0, side - h)), (0, max(0, side - w))),
                 constant_values=0.5)
    return [big[dy:dy + side, dx:dx + side]
            for dy in range(big.shape[0] - side + 1)
            for dx in range(big.shape[1] - side + 1)]


def decode_payload(image: np.ndarray, B: int = 16, c: int = 3) -> MetadataRecord:
    """Decode a rendered bit matrix back to its record.

    Tries all eight dihedral placements ordered by finder-block agreement and
    accepts the first whose CRC validates. If none validates directly, a
    single-cell repair pass retries with each data cell flipped (the CRC is
    the arbiter); this stands in for real error-correction coding.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise RejectedInput(f"expected a grayscale image, got shape {img.shape}")
    views = (_aligned_views(img, B, c) if img.shape != (B * c, B * c) else [img])
    candidates = []
    for view in views:
        candidates.extend(_orientations(cells_from_image(view, B, c)))
    order = sorted(range(len(candidates)),
                   key=lambda i: -_finder_score(candidates[i]))
    for i in order:
        try:
            return _parse_cells(candidates[i])
        except MalformedPayload:
            continue
    finder = _finder_mask(B)
    slots = np.argwhere(~finder)
    for i in order[:2]:  # repair only the plausible placements
        grid = candidates[i]
        for r, col in slots:
            flipped = grid.copy()
            flipped[r, col] ^= 1
            try:
                return _parse_cells(flipped)
            except MalformedPayload:
                continue
    best = max(_finder_score(candidates[i]) for i in range(len(candidates)))
    raise UnreadableWatermark(
        f"no orientation produced a valid checksum (best finder agreement "
        f"{best:.3f})", best_bit_accuracy=max(0.0, min(1.0, (best + 1) / 2)))
