"""HDR/LDR image containers, Radiance-HDR and PFM codecs, and tone mapping.

All decoded rasters are normalized to a top-left origin, row-major layout.
RGBE texels decode as ``channel = mantissa * 2**(exponent - 136)`` (zero when
the exponent byte is zero); encoding uses a shared exponent with
round-to-nearest mantissas, so a decode/encode round trip is exact to one
mantissa step (2^-8 relative to the pixel's dominant channel).
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import FormatError, TruncatedDataError, UnsupportedFormatError, ValidationError

_HDR_MAGICS = (b"#?RADIANCE", b"#?RGBE")
_RESOLUTION_RE = re.compile(rb"^([+-][XY]) (\d+) ([+-][XY]) (\d+)$")

# Luminance weights for grayscale conversion (Rec. 709 primaries).
LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)


@dataclass(frozen=True)
class HdrImage:
    """Linear scene-referred radiance raster, W x H x 3, float32 storage."""

    width: int
    height: int
    data: np.ndarray  # shape (height, width, 3), float32

    def __post_init__(self):
        d = self.data
        if d.shape != (self.height, self.width, 3):
            raise ValidationError(
                f"data shape {d.shape} does not match {self.height}x{self.width}x3"
            )
        if d.dtype != np.float32:
            raise ValidationError(f"radiance storage must be float32, got {d.dtype}")
        if not np.all(np.isfinite(d)):
            raise ValidationError("radiance values must be finite")
        if np.any(d < 0):
            raise ValidationError("radiance values must be non-negative")

    @classmethod
    def from_array(cls, arr) -> "HdrImage":
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValidationError(f"expected an HxWx3 array, got shape {a.shape}")
        return cls(width=a.shape[1], height=a.shape[0], data=a)

    def luminance(self) -> np.ndarray:
        """Rec. 709 luma, shape (H, W), float32."""
        r, g, b = LUMA_WEIGHTS
        return (r * self.data[..., 0] + g * self.data[..., 1] + b * self.data[..., 2]).astype(
            np.float32
        )


@dataclass(frozen=True)
class LdrImage:
    """Display-referred 8-bit raster, W x H x 3."""

    width: int
    height: int
    data: np.ndarray  # shape (height, width, 3), uint8

    def __post_init__(self):
        if self.data.shape != (self.height, self.width, 3):
            raise ValidationError(
                f"data shape {self.data.shape} does not match {self.height}x{self.width}x3"
            )
        if self.data.dtype != np.uint8:
            raise ValidationError(f"LDR storage must be uint8, got {self.data.dtype}")


@dataclass(frozen=True)
class ToneMapParams:
    """Exposure in stops (applied as 2**stops) and display gamma."""

    exposure: float = 0.0
    gamma: float = 2.2

    def __post_init__(self):
        if not math.isfinite(self.exposure):
            raise ValidationError("exposure must be finite")
        if not (self.gamma > 0):
            raise ValidationError("gamma must be > 0")


# ---------------------------------------------------------------------------
# Radiance HDR (RGBE)
# ---------------------------------------------------------------------------


def _rgbe_to_float(rgbe: np.ndarray) -> np.ndarray:
    """uint8 (..., 4) -> float32 (..., 3) using m * 2^(e-136), zero when e == 0."""
    m = rgbe[..., :3].astype(np.float32)
    e = rgbe[..., 3].astype(np.int32)
    out = np.ldexp(m, (e - 136)[..., None])
    out[e == 0] = 0.0
    return out


def _float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    """float (..., 3) -> uint8 (..., 4) shared-exponent, round-to-nearest mantissa."""
    rgb = np.asarray(rgb, dtype=np.float64)
    vmax = rgb.max(axis=-1)
    _, exp = np.frexp(vmax)  # vmax = f * 2^exp, f in [0.5, 1)
    e = exp + 128
    # Round-to-nearest can carry the top mantissa to 256; bump the exponent once.
    mant_max = np.floor(np.ldexp(vmax, 136 - e) + 0.5)
    e = np.where(mant_max >= 256, e + 1, e)
    if np.any(e > 255):
        raise ValidationError("radiance too large for the RGBE exponent range")
    mant = np.floor(np.ldexp(rgb, (136 - e)[..., None]) + 0.5)
    zero = (vmax <= 0) | (e < 1) | (mant.max(axis=-1) < 1)
    out = np.empty(rgb.shape[:-1] + (4,), dtype=np.uint8)
    out[..., :3] = np.where(zero[..., None], 0, mant).astype(np.uint8)
    out[..., 3] = np.where(zero, 0, e).astype(np.uint8)
    return out


class _ByteCursor:
    """Sequential reader over a bytes object that reports offsets on truncation."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def read_line(self) -> bytes:
        end = self.data.find(b"\n", self.offset)
        if end < 0:
            raise TruncatedDataError("unterminated header line", self.offset)
        line = self.data[self.offset : end]
        self.offset = end + 1
        return line

    def read(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedDataError(f"expected {n} more bytes", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def peek(self, n: int) -> bytes:
        return self.data[self.offset : self.offset + n]


class _StreamCursor:
    """Chunk-buffered sequential reader over a binary stream.

    Keeps only a small window resident so scanlines can be decoded from
    arbitrarily large files without loading them whole.
    """

    def __init__(self, stream, chunk: int = 1 << 16):
        self._stream = stream
        self._chunk = chunk
        self._buf = bytearray()
        self._pos = 0
        self._base = 0  # absolute offset of _buf[0]

    @property
    def offset(self) -> int:
        return self._base + self._pos

    def _fill(self, n: int) -> None:
        if self._pos > self._chunk:
            self._base += self._pos
            del self._buf[: self._pos]
            self._pos = 0
        while len(self._buf) - self._pos < n:
            data = self._stream.read(max(self._chunk, n))
            if not data:
                raise TruncatedDataError("unexpected end of stream", self._base + len(self._buf))
            self._buf += data

    def read(self, n: int) -> bytes:
        self._fill(n)
        out = bytes(self._buf[self._pos : self._pos + n])
        self._pos += n
        return out

    def peek(self, n: int) -> bytes:
        try:
            self._fill(n)
        except TruncatedDataError:
            pass
        return bytes(self._buf[self._pos : self._pos + n])

    def read_line(self) -> bytes:
        while True:
            idx = self._buf.find(b"\n", self._pos)
            if idx >= 0:
                break
            data = self._stream.read(self._chunk)
            if not data:
                raise TruncatedDataError("unterminated header line", self._base + len(self._buf))
            self._buf += data
        line = bytes(self._buf[self._pos : idx])
        self._pos = idx + 1
        return line


def _parse_hdr_header(cur: _ByteCursor):
    magic = cur.read_line()
    if magic not in _HDR_MAGICS:
        raise FormatError(f"not a Radiance HDR stream (magic {magic!r})")
    fmt_ok = False
    while True:
        line = cur.read_line()
        if line == b"":
            break
        if line.startswith(b"FORMAT="):
            if line != b"FORMAT=32-bit_rle_rgbe":
                raise UnsupportedFormatError(f"unsupported FORMAT line {line!r}")
            fmt_ok = True
        # other header variables (EXPOSURE, comments) are carried but ignored
    if not fmt_ok:
        raise FormatError("missing FORMAT=32-bit_rle_rgbe header line")
    res = cur.read_line()
    m = _RESOLUTION_RE.match(res)
    if not m:
        raise FormatError(f"malformed resolution line {res!r}")
    ax1, n1, ax2, n2 = m.group(1).decode(), int(m.group(2)), m.group(3).decode(), int(m.group(4))
    if n1 < 1 or n2 < 1:
        raise FormatError(f"degenerate resolution {res!r}")
    if ax1[1] == ax2[1]:
        raise FormatError(f"resolution line repeats an axis: {res!r}")
    return ax1, n1, ax2, n2


def _decode_scanline(cur, width: int) -> np.ndarray:
    """One scanline -> uint8 (width, 4). Handles new-style RLE and flat texels."""
    head = cur.peek(4)
    if len(head) < 4:
        raise TruncatedDataError("scanline header truncated", cur.offset)
    if head[0] == 2 and head[1] == 2 and ((head[2] << 8) | head[3]) == width and 8 <= width < 32768:
        cur.read(4)
        out = np.empty((width, 4), dtype=np.uint8)
        for c in range(4):
            filled = 0
            while filled < width:
                code = cur.read(1)[0]
                if code > 128:  # run
                    count = code - 128
                    if filled + count > width:
                        raise TruncatedDataError("RLE run overflows scanline", cur.offset)
                    out[filled : filled + count, c] = cur.read(1)[0]
                else:  # literals
                    count = code
                    if count == 0 or filled + count > width:
                        raise TruncatedDataError("bad RLE literal count", cur.offset)
                    out[filled : filled + count, c] = np.frombuffer(cur.read(count), np.uint8)
                filled += count
        return out
    raw = cur.read(width * 4)
    return np.frombuffer(raw, dtype=np.uint8).reshape(width, 4)


def _encode_scanline(row: np.ndarray) -> bytes:
    """uint8 (W, 4) -> new-style RLE when 8 <= W < 32768, flat texels otherwise."""
    width = row.shape[0]
    if not (8 <= width < 32768):
        return row.tobytes()
    parts = [bytes((2, 2, width >> 8, width & 0xFF))]
    for c in range(4):
        comp = row[:, c]
        i = 0
        while i < width:
            run = 1
            while i + run < width and run < 127 and comp[i + run] == comp[i]:
                run += 1
            if run >= 4:
                parts.append(bytes((128 + run, comp[i])))
                i += run
            else:
                j = i
                # literal block: stop at 128 texels or where a run of >= 4 begins
                while j < width:
                    r = 1
                    while j + r < width and r < 4 and comp[j + r] == comp[j]:
                        r += 1
                    if r >= 4 or j - i + r > 128:
                        break
                    j += r
                parts.append(bytes((j - i,)) + comp[i:j].tobytes())
                i = j
    return b"".join(parts)


def _normalize_orientation(arr: np.ndarray, ax1: str, ax2: str) -> np.ndarray:
    """Reorder a decoded (n1, n2, 3) buffer into -Y +X top-left row-major."""
    if ax1[1] == "Y":
        if ax1 == "+Y":
            arr = arr[::-1]
        if ax2 == "-X":
            arr = arr[:, ::-1]
    else:  # scanlines run along X: transpose to row-major first
        arr = arr.transpose(1, 0, 2)
        if ax2 == "+Y":
            arr = arr[::-1]
        if ax1 == "-X":
            arr = arr[:, ::-1]
    return np.ascontiguousarray(arr)


def decode_hdr(data: bytes) -> HdrImage:
    """Decode a Radiance .hdr byte stream (flat or new-style RLE scanlines)."""
    cur = _ByteCursor(data)
    ax1, n1, ax2, n2 = _parse_hdr_header(cur)
    rows = np.empty((n1, n2, 4), dtype=np.uint8)
    for i in range(n1):
        rows[i] = _decode_scanline(cur, n2)
    rgb = _rgbe_to_float(rows)
    return HdrImage.from_array(_normalize_orientation(rgb, ax1, ax2))


def encode_hdr(img: HdrImage) -> bytes:
    """Encode to Radiance .hdr with a canonical header and -Y +X orientation."""
    if not np.all(np.isfinite(img.data)):
        raise ValidationError("cannot encode non-finite radiance")
    rgbe = _float_to_rgbe(img.data)
    out = io.BytesIO()
    out.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
    out.write(f"-Y {img.height} +X {img.width}\n".encode())
    for i in range(img.height):
        out.write(_encode_scanline(rgbe[i]))
    return out.getvalue()


class HdrRowReader:
    """Incremental scanline decoder for memory-bounded streaming.

    Holds only a small byte window of the source. Only the native -Y +X
    orientation is streamable; other orientations require whole-image decode
    via :func:`decode_hdr`.
    """

    def __init__(self, source, close_source: bool = False):
        if isinstance(source, (bytes, bytearray)):
            source = io.BytesIO(bytes(source))
        self._stream = source
        self._close_source = close_source
        self._cur = _StreamCursor(source)
        ax1, n1, ax2, n2 = _parse_hdr_header(self._cur)
        if (ax1, ax2) != ("-Y", "+X"):
            raise UnsupportedFormatError(
                f"row streaming requires -Y +X orientation, got {ax1} {ax2}"
            )
        self.height = n1
        self.width = n2
        self._row = 0

    @property
    def rows_remaining(self) -> int:
        return self.height - self._row

    def read_rows(self, n: int) -> np.ndarray:
        """Decode the next min(n, remaining) scanlines to float32 (n, W, 3)."""
        n = min(n, self.rows_remaining)
        out = np.empty((n, self.width, 4), dtype=np.uint8)
        for i in range(n):
            out[i] = _decode_scanline(self._cur, self.width)
        self._row += n
        return _rgbe_to_float(out)

    def close(self) -> None:
        if self._close_source:
            self._stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_hdr(path) -> HdrImage:
    with open(path, "rb") as f:
        return decode_hdr(f.read())


def save_hdr(path, img: HdrImage) -> None:
    with open(path, "wb") as f:
        f.write(encode_hdr(img))


# ---------------------------------------------------------------------------
# PFM (lossless float interchange)
# ---------------------------------------------------------------------------


def decode_pfm(data: bytes) -> HdrImage:
    """Decode a 3-channel PFM. Rows are stored bottom-up per the PFM convention."""
    cur = _ByteCursor(data)
    ident = cur.read_line().strip()
    if ident == b"Pf":
        raise UnsupportedFormatError("grayscale 'Pf' PFM is not supported")
    if ident != b"PF":
        raise FormatError(f"not a PFM stream (identifier {ident!r})")
    dims = cur.read_line().split()
    if len(dims) != 2:
        raise FormatError("malformed PFM dimensions line")
    width, height = int(dims[0]), int(dims[1])
    scale = float(cur.read_line())
    if scale == 0:
        raise FormatError("PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    raw = cur.read(width * height * 3 * 4)
    arr = np.frombuffer(raw, dtype=dtype).reshape(height, width, 3)
    return HdrImage.from_array(arr[::-1])  # bottom-up -> top-left origin


def encode_pfm(img: HdrImage) -> bytes:
    """Encode 3-channel PFM, little-endian (scale -1.0), bit-exact round trip."""
    header = f"PF\n{img.width} {img.height}\n-1.0\n".encode()
    return header + img.data[::-1].astype("<f4").tobytes()


def load_pfm(path) -> HdrImage:
    with open(path, "rb") as f:
        return decode_pfm(f.read())


def save_pfm(path, img: HdrImage) -> None:
    with open(path, "wb") as f:
        f.write(encode_pfm(img))


# ---------------------------------------------------------------------------
# Tone mapping and PNG export
# ---------------------------------------------------------------------------


def tone_map(img: HdrImage, params: ToneMapParams = ToneMapParams()) -> LdrImage:
    """clamp(floor(255 * (2^stops * v)^(1/gamma) + 0.5), 0, 255) per channel."""
    scaled = np.float64(2.0**params.exposure) * img.data.astype(np.float64)
    coded = np.power(scaled, 1.0 / params.gamma)
    out = np.clip(np.floor(255.0 * coded + 0.5), 0.0, 255.0).astype(np.uint8)
    return LdrImage(width=img.width, height=img.height, data=out)


def encode_png(img: LdrImage) -> bytes:
    """Deterministic 8-bit RGB PNG bytes (fixed zlib level, no optimizer)."""
    buf = io.BytesIO()
    Image.fromarray(img.data, mode="RGB").save(buf, format="PNG", compress_level=6, optimize=False)
    return buf.getvalue()


def save_png(path, img: LdrImage) -> None:
    with open(path, "wb") as f:
        f.write(encode_png(img))
