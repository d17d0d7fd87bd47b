"""Image decoding, geometric/photometric transforms, and integral images.

Images are float32 arrays of shape (height, width, channels) with samples in
[0, 1]. All operations are pure: they never mutate their inputs and the
returned arrays are marked read-only, so values are safe to share across
threads.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError


class ImagingError(Exception):
    """Base class for errors raised by this module."""


class MalformedFileError(ImagingError):
    pass


class UnsupportedFormatError(ImagingError):
    pass


class WrongChannelCountError(ImagingError):
    pass


class ZeroDimensionError(ImagingError):
    pass


class EmptyIntersectionError(ImagingError):
    pass


class NegativeSigmaError(ImagingError):
    pass


class OutOfBoundsError(ImagingError):
    pass


_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Image:
    """A decoded raster image: float32 samples in [0,1], shape (h, w, c)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("image data must have shape (height, width, channels)")
        if self.data.shape[2] not in (1, 3):
            raise WrongChannelCountError(
                f"expected 1 or 3 channels, got {self.data.shape[2]}"
            )
        if self.data.dtype != np.float32:
            raise ValueError("image data must be float32")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @staticmethod
    def from_array(arr: np.ndarray) -> "Image":
        """Wrap an array, clipping to [0,1] and converting to float32."""
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[:, :, None]
        a = np.clip(a, 0.0, 1.0).astype(np.float32, copy=True)
        return Image(_freeze(a))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left (x, y) plus positive width/height, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not math.isfinite(v):
                raise ValueError("box coordinates must be finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h


@dataclass(frozen=True)
class IntegralImage:
    """Prefix-sum tables of a grayscale image.

    ``sums[i][j]`` is the sum of all pixels above and left of (i, j), so
    ``sums`` has shape (h+1, w+1) with a zero first row and column.
    ``squared_sums`` is the same structure over squared pixel values; both are
    kept in float64 so rectangle sums stay exact for 8-bit-derived images.
    """

    width: int
    height: int
    sums: np.ndarray
    squared_sums: np.ndarray


def decode_image(data: bytes, fmt: str | None = None) -> Image:
    """Decode PNG or binary PPM (P6) bytes into an Image.

    8-bit sample v maps to v/255 exactly. RGBA alpha is dropped; 16-bit
    depths are rejected with UnsupportedFormatError.
    """
    if fmt is None:
        if data[:8] == b"\x89PNG\r\n\x1a\n":
            fmt = "png"
        elif data[:2] == b"P6":
            fmt = "ppm"
        else:
            raise UnsupportedFormatError("not a PNG or binary PPM file")
    fmt = fmt.lower()
    if fmt == "png":
        return _decode_png(data)
    if fmt == "ppm":
        return _decode_ppm(data)
    raise UnsupportedFormatError(f"unknown format {fmt!r}")


def _decode_png(data: bytes) -> Image:
    if len(data) < 8 or data[:8] != b"\x89PNG\r\n\x1a\n":
        raise MalformedFileError("missing PNG signature")
    if len(data) > 24 and data[12:16] == b"IHDR":
        bit_depth = data[24]
        if bit_depth not in (1, 2, 4, 8):
            raise UnsupportedFormatError(f"unsupported PNG bit depth {bit_depth}")
    try:
        with PILImage.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("LA", "1"):
                im = im.convert("L")
            elif im.mode in ("RGBA", "P", "PA"):
                im = im.convert("RGB")  # drops alpha, expands palettes
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.uint8)[:, :, None]
            elif im.mode == "RGB":
                arr = np.asarray(im, dtype=np.uint8)
            else:
                raise UnsupportedFormatError(f"unsupported PNG mode {im.mode}")
    except UnidentifiedImageError as exc:
        raise MalformedFileError("invalid PNG data") from exc
    except OSError as exc:
        raise MalformedFileError(f"truncated or corrupt PNG: {exc}") from exc
    return Image(_freeze((arr.astype(np.float32) / 255.0)))


def _decode_ppm(data: bytes) -> Image:
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedFileError("truncated PPM header")
        return data[start:pos]

    magic = token()
    if magic != b"P6":
        raise MalformedFileError(f"expected P6 magic, got {magic!r}")
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError as exc:
        raise MalformedFileError("non-numeric PPM header field") from exc
    if width <= 0 or height <= 0:
        raise MalformedFileError("non-positive PPM dimensions")
    if maxval != 255:
        raise UnsupportedFormatError(f"only 8-bit PPM supported, maxval={maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height * 3]
    if len(raster) < width * height * 3:
        raise MalformedFileError("truncated PPM raster")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return Image(_freeze(arr.astype(np.float32) / 255.0))


def encode_png(img: Image) -> bytes:
    """Encode an Image as 8-bit PNG (values rounded from [0,1] to 0..255)."""
    arr = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if img.channels == 1 else "RGB"
    pil = PILImage.fromarray(arr[:, :, 0] if img.channels == 1 else arr, mode=mode)
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def to_grayscale(img: Image) -> Image:
    """Combine RGB into luminance: 0.299 R + 0.587 G + 0.114 B."""
    if img.channels != 3:
        raise WrongChannelCountError(f"need 3 channels, got {img.channels}")
    gray = img.data @ _LUMA_WEIGHTS
    return Image(_freeze(np.clip(gray, 0.0, 1.0)[:, :, None].astype(np.float32)))


def resize_bilinear(img: Image, out_w: int, out_h: int) -> Image:
    """Resize with bilinear interpolation, center-aligned sample positions.

    Source coordinate of output pixel d is (d + 0.5) * in/out - 0.5, clamped
    to the image, which makes same-size resizing a bit-exact identity.
    """
    if out_w < 1 or out_h < 1:
        raise ZeroDimensionError(f"output size must be >= 1, got {out_w}x{out_h}")
    in_h, in_w = img.height, img.width
    src_x = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5, 0, in_w - 1)
    src_y = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5, 0, in_h - 1)
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    fx = (src_x - x0)[None, :, None]
    fy = (src_y - y0)[:, None, None]
    d = img.data.astype(np.float64)
    top = d[y0[:, None], x0[None, :]] * (1.0 - fx) + d[y0[:, None], x1[None, :]] * fx
    bot = d[y1[:, None], x0[None, :]] * (1.0 - fx) + d[y1[:, None], x1[None, :]] * fx
    out = top * (1.0 - fy) + bot * fy
    return Image(_freeze(np.clip(out, 0.0, 1.0).astype(np.float32)))


def crop(img: Image, box: BBox) -> Image:
    """Extract box ∩ image, snapped outward to the integer pixel grid."""
    x0 = max(0, math.floor(max(box.x, 0.0)))
    y0 = max(0, math.floor(max(box.y, 0.0)))
    x1 = min(img.width, math.ceil(min(box.x2, float(img.width))))
    y1 = min(img.height, math.ceil(min(box.y2, float(img.height))))
    if x1 <= x0 or y1 <= y0:
        raise EmptyIntersectionError(f"box {box} does not intersect {img.width}x{img.height} image")
    return Image(_freeze(img.data[y0:y1, x0:x1].copy()))


def flip(img: Image, axis: str) -> Image:
    """Mirror the image; axis is 'horizontal' (left-right) or 'vertical'."""
    if axis == "horizontal":
        out = img.data[:, ::-1]
    elif axis == "vertical":
        out = img.data[::-1, :]
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    return Image(_freeze(np.ascontiguousarray(out)))


# Exact sin/cos for right angles so multiples of 90° are lossless index maps.
_EXACT_ANGLES = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}


def rotate(img: Image, degrees: float) -> Image:
    """Rotate about the image center, bilinear resampling, zero fill outside.

    Output has the same dimensions as the input; |degrees| must be <= 180.
    """
    if abs(degrees) > 180:
        raise ValueError(f"|degrees| must be <= 180, got {degrees}")
    key = degrees % 360.0
    if key in _EXACT_ANGLES:
        cos_t, sin_t = _EXACT_ANGLES[key]
    else:
        theta = math.radians(degrees)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
    h, w = img.height, img.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx = np.arange(w, dtype=np.float64)[None, :] - cx
    dy = np.arange(h, dtype=np.float64)[:, None] - cy
    src_x = cos_t * dx - sin_t * dy + cx
    src_y = sin_t * dx + cos_t * dy + cy

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = (src_x - x0)[:, :, None]
    fy = (src_y - y0)[:, :, None]
    d = img.data.astype(np.float64)

    def sample(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = d[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(inside[:, :, None], vals, 0.0)

    out = (
        sample(y0, x0) * (1 - fx) * (1 - fy)
        + sample(y0, x0 + 1) * fx * (1 - fy)
        + sample(y0 + 1, x0) * (1 - fx) * fy
        + sample(y0 + 1, x0 + 1) * fx * fy
    )
    return Image(_freeze(np.clip(out, 0.0, 1.0).astype(np.float32)))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian kernel, radius ceil(3*sigma), normalized to sum 1."""
    if sigma < 0:
        raise NegativeSigmaError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array([1.0])
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: Image, sigma: float) -> Image:
    """Separable Gaussian blur with edge clamping; sigma=0 returns the input."""
    if sigma < 0:
        raise NegativeSigmaError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    k = gaussian_kernel(sigma)
    radius = (len(k) - 1) // 2
    d = img.data.astype(np.float64)
    padded = np.pad(d, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    rows = np.zeros_like(d)
    for i, kv in enumerate(k):
        rows += kv * padded[:, i : i + img.width]
    padded = np.pad(rows, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(d)
    for i, kv in enumerate(k):
        out += kv * padded[i : i + img.height]
    return Image(_freeze(np.clip(out, 0.0, 1.0).astype(np.float32)))


def integral_image(gray: Image) -> IntegralImage:
    """Build prefix-sum tables for constant-time rectangle sums."""
    if gray.channels != 1:
        raise WrongChannelCountError(f"need 1 channel, got {gray.channels}")
    d = gray.data[:, :, 0].astype(np.float64)
    sums = np.zeros((gray.height + 1, gray.width + 1), dtype=np.float64)
    sq = np.zeros_like(sums)
    np.cumsum(np.cumsum(d, axis=0), axis=1, out=sums[1:, 1:])
    np.cumsum(np.cumsum(d * d, axis=0), axis=1, out=sq[1:, 1:])
    return IntegralImage(gray.width, gray.height, _freeze(sums), _freeze(sq))


def rect_sum(ii: IntegralImage, x: int, y: int, w: int, h: int) -> float:
    """Sum of the w x h pixel rectangle at (x, y), via 4 corner lookups."""
    if x < 0 or y < 0 or w < 0 or h < 0 or x + w > ii.width or y + h > ii.height:
        raise OutOfBoundsError(f"rect ({x},{y},{w},{h}) outside {ii.width}x{ii.height}")
    s = ii.sums
    return float(s[y + h, x + w] - s[y, x + w] - s[y + h, x] + s[y, x])


def rect_sum_squared(ii: IntegralImage, x: int, y: int, w: int, h: int) -> float:
    """Like rect_sum but over squared pixel values."""
    if x < 0 or y < 0 or w < 0 or h < 0 or x + w > ii.width or y + h > ii.height:
        raise OutOfBoundsError(f"rect ({x},{y},{w},{h}) outside {ii.width}x{ii.height}")
    s = ii.squared_sums
    return float(s[y + h, x + w] - s[y, x + w] - s[y + h, x] + s[y, x])
