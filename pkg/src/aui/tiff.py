"""Minimal TIFF codec for 16-bit unsigned scene bands.

Supported on read: classic (non-Big) TIFF, either byte order, strip- or
tile-organized, uncompressed or deflate-compressed (Compression 8 or the
legacy 32946), PlanarConfiguration 1, horizontal-differencing predictor,
and the GDAL nodata tag. Anything else raises UnsupportedFormatError
naming the offending tag so callers know exactly what the file used.

The writer emits the same subset and exists for fixture generation and the
synthetic scene generator; it is not a general-purpose TIFF library.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError, UnsupportedFormatError

TAG_IMAGE_WIDTH = 256
TAG_IMAGE_LENGTH = 257
TAG_BITS_PER_SAMPLE = 258
TAG_COMPRESSION = 259
TAG_PHOTOMETRIC = 262
TAG_STRIP_OFFSETS = 273
TAG_SAMPLES_PER_PIXEL = 277
TAG_ROWS_PER_STRIP = 278
TAG_STRIP_BYTE_COUNTS = 279
TAG_PLANAR_CONFIG = 284
TAG_PREDICTOR = 317
TAG_TILE_WIDTH = 322
TAG_TILE_LENGTH = 323
TAG_TILE_OFFSETS = 324
TAG_TILE_BYTE_COUNTS = 325
TAG_SAMPLE_FORMAT = 339
TAG_GDAL_NODATA = 42113

COMPRESSION_NONE = 1
COMPRESSION_DEFLATE = 8
COMPRESSION_DEFLATE_LEGACY = 32946

_TYPE_SIZES = {1: 1, 2: 1, 3: 2, 4: 4, 5: 8}
_TYPE_BYTE = 1
_TYPE_ASCII = 2
_TYPE_SHORT = 3
_TYPE_LONG = 4


@dataclass
class TiffImage:
    """Decoded pixel grid: (height, width) or (height, width, samples) uint16."""

    values: np.ndarray
    byte_order: str  # "<" little-endian, ">" big-endian
    nodata: int | None


def _require(cond, message):
    if not cond:
        raise ParseError(message)


class _Entry:
    __slots__ = ("tag", "type", "count", "raw")

    def __init__(self, tag, type_, count, raw):
        self.tag = tag
        self.type = type_
        self.count = count
        self.raw = raw


def _read_entries(data, ifd_offset, bo):
    _require(ifd_offset + 2 <= len(data), "truncated TIFF: IFD offset past end")
    (n_entries,) = struct.unpack_from(bo + "H", data, ifd_offset)
    end = ifd_offset + 2 + 12 * n_entries + 4
    _require(end <= len(data), "truncated TIFF: IFD overruns file")
    entries = {}
    for i in range(n_entries):
        off = ifd_offset + 2 + 12 * i
        tag, type_, count = struct.unpack_from(bo + "HHL", data, off)
        size = _TYPE_SIZES.get(type_)
        if size is None:
            # Unknown field type: ignore the entry (per the TIFF spec).
            continue
        nbytes = size * count
        if nbytes <= 4:
            raw = data[off + 8 : off + 8 + nbytes]
        else:
            (value_off,) = struct.unpack_from(bo + "L", data, off + 8)
            _require(
                value_off + nbytes <= len(data),
                f"truncated TIFF: value of tag {tag} past end",
            )
            raw = data[value_off : value_off + nbytes]
        entries[tag] = _Entry(tag, type_, count, raw)
    return entries


def _ints(entry, bo):
    if entry.type == _TYPE_SHORT:
        return list(struct.unpack(bo + "H" * entry.count, entry.raw))
    if entry.type == _TYPE_LONG:
        return list(struct.unpack(bo + "L" * entry.count, entry.raw))
    if entry.type == _TYPE_BYTE:
        return list(entry.raw)
    raise ParseError(f"tag {entry.tag}: expected integer type, got {entry.type}")


def _int1(entries, tag, bo, default=None):
    entry = entries.get(tag)
    if entry is None:
        if default is None:
            raise ParseError(f"required TIFF tag {tag} missing")
        return default
    values = _ints(entry, bo)
    _require(len(values) >= 1, f"tag {tag}: empty value")
    return values[0]


def _undo_predictor(arr):
    # Horizontal differencing accumulates along the row, modulo 2**16.
    acc = np.cumsum(arr.astype(np.uint32), axis=1, dtype=np.uint64)
    return (acc & 0xFFFF).astype(np.uint16)


def _decode_segment(raw, compression, expected_bytes, bo, shape, predictor, what):
    if compression in (COMPRESSION_DEFLATE, COMPRESSION_DEFLATE_LEGACY):
        try:
            raw = zlib.decompress(raw)
        except zlib.error as exc:
            raise ParseError(f"corrupt deflate stream in {what}: {exc}") from exc
    _require(
        len(raw) == expected_bytes,
        f"{what}: expected {expected_bytes} bytes, got {len(raw)}",
    )
    arr = np.frombuffer(raw, dtype=bo + "u2").reshape(shape)
    if predictor == 2:
        arr = _undo_predictor(arr)
    return arr


def read_tiff(src):
    """Decode a TIFF file (path, Path, or raw bytes) into a TiffImage."""
    if isinstance(src, (str, Path)):
        data = Path(src).read_bytes()
    else:
        data = bytes(src)

    _require(len(data) >= 8, "truncated TIFF: missing header")
    if data[:2] == b"II":
        bo = "<"
    elif data[:2] == b"MM":
        bo = ">"
    else:
        raise ParseError("not a TIFF file (bad byte-order mark)")
    magic, ifd_offset = struct.unpack_from(bo + "HL", data, 2)
    _require(magic == 42, "not a TIFF file (bad magic number)")

    entries = _read_entries(data, ifd_offset, bo)

    width = _int1(entries, TAG_IMAGE_WIDTH, bo)
    height = _int1(entries, TAG_IMAGE_LENGTH, bo)
    _require(width > 0 and height > 0, "degenerate image dimensions")
    spp = _int1(entries, TAG_SAMPLES_PER_PIXEL, bo, default=1)

    bits = _ints(entries[TAG_BITS_PER_SAMPLE], bo) if TAG_BITS_PER_SAMPLE in entries else [1]
    if any(b != 16 for b in bits):
        raise UnsupportedFormatError(
            f"BitsPerSample={bits} (only 16-bit unsigned samples supported)"
        )
    compression = _int1(entries, TAG_COMPRESSION, bo, default=COMPRESSION_NONE)
    if compression not in (
        COMPRESSION_NONE,
        COMPRESSION_DEFLATE,
        COMPRESSION_DEFLATE_LEGACY,
    ):
        raise UnsupportedFormatError(f"Compression={compression}")
    planar = _int1(entries, TAG_PLANAR_CONFIG, bo, default=1)
    if planar != 1:
        raise UnsupportedFormatError(f"PlanarConfiguration={planar}")
    if TAG_SAMPLE_FORMAT in entries:
        formats = _ints(entries[TAG_SAMPLE_FORMAT], bo)
        if any(f != 1 for f in formats):
            raise UnsupportedFormatError(f"SampleFormat={formats}")
    predictor = _int1(entries, TAG_PREDICTOR, bo, default=1)
    if predictor not in (1, 2):
        raise UnsupportedFormatError(f"Predictor={predictor}")

    has_strips = TAG_STRIP_OFFSETS in entries
    has_tiles = TAG_TILE_OFFSETS in entries
    _require(not (has_strips and has_tiles), "file mixes strip and tile layout tags")
    _require(has_strips or has_tiles, "no strip or tile layout tags present")

    if has_strips:
        values = _read_strips(data, entries, bo, width, height, spp, compression, predictor)
    else:
        values = _read_tiles(data, entries, bo, width, height, spp, compression, predictor)

    nodata = None
    if TAG_GDAL_NODATA in entries:
        text = entries[TAG_GDAL_NODATA].raw.split(b"\x00")[0].strip()
        try:
            nodata = int(round(float(text)))
        except ValueError:
            raise ParseError(f"unparseable nodata tag value {text!r}") from None

    if spp == 1:
        values = values.reshape(height, width)
    return TiffImage(values=values, byte_order=bo, nodata=nodata)


def _segment(data, offset, count, what):
    _require(offset + count <= len(data), f"truncated TIFF: {what} past end of file")
    return data[offset : offset + count]


def _read_strips(data, entries, bo, width, height, spp, compression, predictor):
    offsets = _ints(entries[TAG_STRIP_OFFSETS], bo)
    _require(TAG_STRIP_BYTE_COUNTS in entries, "StripByteCounts missing")
    counts = _ints(entries[TAG_STRIP_BYTE_COUNTS], bo)
    rows_per_strip = _int1(entries, TAG_ROWS_PER_STRIP, bo, default=height)
    rows_per_strip = min(rows_per_strip, height)
    n_strips = math.ceil(height / rows_per_strip)
    _require(
        len(offsets) == n_strips and len(counts) == n_strips,
        f"expected {n_strips} strips, found {len(offsets)} offsets / {len(counts)} counts",
    )
    parts = []
    for i, (off, cnt) in enumerate(zip(offsets, counts)):
        rows = min(rows_per_strip, height - i * rows_per_strip)
        raw = _segment(data, off, cnt, f"strip {i}")
        parts.append(
            _decode_segment(
                raw, compression, rows * width * spp * 2, bo,
                (rows, width, spp), predictor, f"strip {i}",
            )
        )
    return np.vstack(parts)


def _read_tiles(data, entries, bo, width, height, spp, compression, predictor):
    tile_w = _int1(entries, TAG_TILE_WIDTH, bo)
    tile_l = _int1(entries, TAG_TILE_LENGTH, bo)
    _require(tile_w > 0 and tile_l > 0, "degenerate tile dimensions")
    offsets = _ints(entries[TAG_TILE_OFFSETS], bo)
    _require(TAG_TILE_BYTE_COUNTS in entries, "TileByteCounts missing")
    counts = _ints(entries[TAG_TILE_BYTE_COUNTS], bo)
    across = math.ceil(width / tile_w)
    down = math.ceil(height / tile_l)
    _require(
        len(offsets) == across * down and len(counts) == across * down,
        f"expected {across * down} tiles, found {len(offsets)}",
    )
    out = np.zeros((height, width, spp), dtype=np.uint16)
    for idx, (off, cnt) in enumerate(zip(offsets, counts)):
        raw = _segment(data, off, cnt, f"tile {idx}")
        tile = _decode_segment(
            raw, compression, tile_l * tile_w * spp * 2, bo,
            (tile_l, tile_w, spp), predictor, f"tile {idx}",
        )
        y0 = (idx // across) * tile_l
        x0 = (idx % across) * tile_w
        y1 = min(y0 + tile_l, height)
        x1 = min(x0 + tile_w, width)
        out[y0:y1, x0:x1] = tile[: y1 - y0, : x1 - x0]
    return out


def write_tiff(
    path,
    values,
    *,
    byte_order="<",
    layout="strip",
    compression="none",
    rows_per_strip=16,
    tile_width=32,
    tile_length=32,
    nodata=0,
):
    """Write a uint16 grid as a classic TIFF using the supported subset.

    ``values`` is (height, width) or (height, width, samples); multi-sample
    data is written chunky (PlanarConfiguration 1). Tiles must be multiples
    of 16 per the TIFF specification.
    """
    arr = np.asarray(values)
    if arr.dtype != np.uint16:
        raise InputError(f"values must be uint16, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    if arr.ndim != 3:
        raise InputError("values must be a 2-D or 3-D array")
    height, width, spp = arr.shape
    if height == 0 or width == 0:
        raise InputError("cannot write an empty image")
    if byte_order not in ("<", ">"):
        raise InputError("byte_order must be '<' or '>'")
    if layout not in ("strip", "tile"):
        raise InputError("layout must be 'strip' or 'tile'")
    if compression not in ("none", "deflate"):
        raise InputError("compression must be 'none' or 'deflate'")
    if layout == "tile" and (tile_width % 16 or tile_length % 16):
        raise InputError("tile dimensions must be multiples of 16")

    arr = arr.astype(byte_order + "u2")
    deflate = compression == "deflate"

    segments = []
    if layout == "strip":
        rows_per_strip = max(1, min(rows_per_strip, height))
        for y0 in range(0, height, rows_per_strip):
            seg = arr[y0 : y0 + rows_per_strip].tobytes()
            segments.append(zlib.compress(seg) if deflate else seg)
    else:
        for y0 in range(0, height, tile_length):
            for x0 in range(0, width, tile_width):
                block = np.zeros((tile_length, tile_width, spp), dtype=arr.dtype)
                part = arr[y0 : y0 + tile_length, x0 : x0 + tile_width]
                block[: part.shape[0], : part.shape[1]] = part
                seg = block.tobytes()
                segments.append(zlib.compress(seg) if deflate else seg)

    # Data segments first (even-aligned), then the IFD, then external values.
    seg_offsets = []
    pos = 8
    blob = bytearray()
    for seg in segments:
        if pos % 2:
            blob += b"\x00"
            pos += 1
        seg_offsets.append(pos)
        blob += seg
        pos += len(seg)
    if pos % 2:
        blob += b"\x00"
        pos += 1
    ifd_offset = pos

    comp_code = COMPRESSION_DEFLATE if deflate else COMPRESSION_NONE
    nodata_ascii = (str(int(nodata)).encode("ascii") + b"\x00") if nodata is not None else None

    fields = [
        (TAG_IMAGE_WIDTH, _TYPE_LONG, [width]),
        (TAG_IMAGE_LENGTH, _TYPE_LONG, [height]),
        (TAG_BITS_PER_SAMPLE, _TYPE_SHORT, [16] * spp),
        (TAG_COMPRESSION, _TYPE_SHORT, [comp_code]),
        (TAG_PHOTOMETRIC, _TYPE_SHORT, [1]),
        (TAG_SAMPLES_PER_PIXEL, _TYPE_SHORT, [spp]),
        (TAG_PLANAR_CONFIG, _TYPE_SHORT, [1]),
        (TAG_SAMPLE_FORMAT, _TYPE_SHORT, [1] * spp),
    ]
    if layout == "strip":
        fields.append((TAG_STRIP_OFFSETS, _TYPE_LONG, seg_offsets))
        fields.append((TAG_ROWS_PER_STRIP, _TYPE_LONG, [rows_per_strip]))
        fields.append((TAG_STRIP_BYTE_COUNTS, _TYPE_LONG, [len(s) for s in segments]))
    else:
        fields.append((TAG_TILE_WIDTH, _TYPE_LONG, [tile_width]))
        fields.append((TAG_TILE_LENGTH, _TYPE_LONG, [tile_length]))
        fields.append((TAG_TILE_OFFSETS, _TYPE_LONG, seg_offsets))
        fields.append((TAG_TILE_BYTE_COUNTS, _TYPE_LONG, [len(s) for s in segments]))
    if nodata_ascii is not None:
        fields.append((TAG_GDAL_NODATA, _TYPE_ASCII, nodata_ascii))
    fields.sort(key=lambda f: f[0])

    def pack_value(type_, value):
        if type_ == _TYPE_ASCII:
            return bytes(value)
        fmt = "H" if type_ == _TYPE_SHORT else "L"
        return struct.pack(byte_order + fmt * len(value), *value)

    ifd_size = 2 + 12 * len(fields) + 4
    extern_pos = ifd_offset + ifd_size
    ifd = bytearray(struct.pack(byte_order + "H", len(fields)))
    extern = bytearray()
    for tag, type_, value in fields:
        raw = pack_value(type_, value)
        count = len(value) if type_ == _TYPE_ASCII else len(value)
        entry = struct.pack(byte_order + "HHL", tag, type_, count)
        if len(raw) <= 4:
            entry += raw.ljust(4, b"\x00")
        else:
            if extern_pos % 2:
                extern += b"\x00"
                extern_pos += 1
            entry += struct.pack(byte_order + "L", extern_pos)
            extern += raw
            extern_pos += len(raw)
        ifd += entry
    ifd += struct.pack(byte_order + "L", 0)  # no next IFD

    header = (b"II" if byte_order == "<" else b"MM") + struct.pack(
        byte_order + "HL", 42, ifd_offset
    )
    out = header + bytes(blob) + bytes(ifd) + bytes(extern)
    Path(path).write_bytes(out)
    return Path(path)
