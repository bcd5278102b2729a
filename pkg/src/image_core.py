"""
Image container, colour conversion, resampling, quality metrics and PNG I/O
used by every stage of the super-resolution pipeline.

Contents:
- Image: immutable planar raster (channels x height x width) with samples in [0,1]
- rgb_to_ycbcr / ycbcr_to_rgb: full-range BT.601 conversion
- to_luma, center_crop_to_multiple: ingestion helpers
- bicubic_resize: separable Keys (a = -0.5) interpolation, whole-sample reflected edges
- symmetric_indices, pad_symmetric, fold_symmetric: half-sample symmetric
  boundary extension and its exact adjoint
- psnr, isnr: quality metrics (Y channel with border crop by default)
- load_png / save_png: 8 and 16 bit gray or RGB PNG via OpenCV
"""
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np

COLORSPACES = {"Gray": 1, "RGB": 3, "YCbCr": 3}

# Full-range BT.601, rows give Y, Cb, Cr from R, G, B
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)
CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])

KEYS_A = -0.5


@dataclass(frozen=True, eq=False)
class Image:
    """Planar floating-point raster. ``data`` has shape (channels, height, width)."""

    data: np.ndarray
    colorspace: str = "Gray"

    def __post_init__(self):
        if self.colorspace not in COLORSPACES:
            raise ValueError(f"Unknown colorspace tag: {self.colorspace}")
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"Image data must be (channels, height, width), got shape {data.shape}")
        if data.shape[0] != COLORSPACES[self.colorspace]:
            raise ValueError(
                f"{self.colorspace} image needs {COLORSPACES[self.colorspace]} channels, got {data.shape[0]}"
            )
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise ValueError(f"Image dimensions must be positive, got {data.shape[1:]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("Image samples must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array, colorspace=None):
        """Build an image from a 2D plane or a (channels, height, width) stack."""
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 2:
            array = array[np.newaxis]
        if colorspace is None:
            colorspace = "Gray" if array.shape[0] == 1 else "RGB"
        return cls(array, colorspace)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        """(height, width)"""
        return self.data.shape[1], self.data.shape[2]

    def plane(self, index: int = 0) -> np.ndarray:
        return self.data[index]

    def as_array(self) -> np.ndarray:
        """Writable copy of the samples: 2D for single-channel images, else (C, H, W)."""
        if self.channels == 1:
            return self.data[0].copy()
        return self.data.copy()


def as_plane(img) -> np.ndarray:
    """Return the single plane of a Gray image (or a 2D array) as float64."""
    if isinstance(img, Image):
        if img.channels != 1:
            raise ValueError(f"Expected a single-channel image, got {img.channels} channels ({img.colorspace})")
        return img.data[0]
    plane = np.asarray(img, dtype=np.float64)
    if plane.ndim != 2:
        raise ValueError(f"Expected a 2D plane, got shape {plane.shape}")
    return plane


# --- Colour ---


def _convert(data, matrix, offset_in, offset_out):
    flat = data.reshape(3, -1) - offset_in[:, None]
    out = matrix @ flat + offset_out[:, None]
    return out.reshape(data.shape)


def rgb_to_ycbcr(img: Image) -> Image:
    """Full-range BT.601 RGB -> YCbCr (Cb, Cr centred on 0.5)."""
    if img.colorspace != "RGB":
        raise ValueError(f"rgb_to_ycbcr expects an RGB image, got {img.colorspace}")
    return Image(_convert(img.data, RGB_TO_YCBCR, np.zeros(3), CHROMA_OFFSET), "YCbCr")


def ycbcr_to_rgb(img: Image) -> Image:
    """Inverse of rgb_to_ycbcr."""
    if img.colorspace != "YCbCr":
        raise ValueError(f"ycbcr_to_rgb expects a YCbCr image, got {img.colorspace}")
    return Image(_convert(img.data, YCBCR_TO_RGB, CHROMA_OFFSET, np.zeros(3)), "RGB")


def to_luma(img: Image) -> Image:
    """Y plane of any image as a Gray image."""
    if img.colorspace == "Gray":
        return img
    if img.colorspace == "RGB":
        img = rgb_to_ycbcr(img)
    return Image(img.data[:1], "Gray")


def center_crop_to_multiple(img: Image, multiple: int) -> Image:
    """Centre-crop so that height and width are divisible by ``multiple``."""
    h = img.height - img.height % multiple
    w = img.width - img.width % multiple
    if h < 1 or w < 1:
        raise ValueError(f"Image {img.shape} is smaller than the scale factor {multiple}")
    top = (img.height - h) // 2
    left = (img.width - w) // 2
    return Image(img.data[:, top : top + h, left : left + w], img.colorspace)


# --- Boundary extension ---


def symmetric_indices(n: int, before: int, after: int) -> np.ndarray:
    """Source index of each sample of a half-sample symmetric extension (edge repeated)."""
    j = np.arange(-before, n + after) % (2 * n)
    return np.where(j < n, j, 2 * n - 1 - j)


def reflect_indices(j, n: int) -> np.ndarray:
    """Whole-sample reflection of indices ``j`` into [0, n): the edge sample is not repeated."""
    j = np.asarray(j)
    if n == 1:
        return np.zeros_like(j)
    period = 2 * (n - 1)
    j = j % period
    return np.where(j < n, j, period - j)


def pad_symmetric(array: np.ndarray, axis: int, before: int, after: int) -> np.ndarray:
    n = array.shape[axis]
    return np.take(array, symmetric_indices(n, before, after), axis=axis)


def fold_symmetric(array: np.ndarray, axis: int, before: int, after: int) -> np.ndarray:
    """Adjoint of pad_symmetric: fold the extension back onto the n interior samples."""
    n = array.shape[axis] - before - after
    idx = symmetric_indices(n, before, after)
    moved = np.moveaxis(array, axis, 0)
    out = moved[before : before + n].copy()
    outside = np.r_[0:before, before + n : before + n + after]
    # sequential accumulation keeps the summation order fixed
    for j in outside:
        out[idx[j]] += moved[j]
    return np.moveaxis(out, 0, axis)


# --- Resampling ---


def keys_cubic(x, a=KEYS_A):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2 = x * x
    x3 = x2 * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _output_length(n, factor):
    out = math.floor(n * factor + Fraction(1, 2))
    if out < 1:
        raise ValueError(f"Resize of length {n} by {factor} gives a degenerate size")
    return out


def resize_weights(n_in: int, factor, n_out: int = None, origin=None) -> np.ndarray:
    """Dense (n_out x n_in) bicubic interpolation matrix for one axis.

    ``origin=None`` uses the pixel-centre convention; otherwise output sample x
    reads input coordinate (x - origin) / factor.
    """
    factor = Fraction(factor).limit_denominator(10_000)
    if factor <= 0:
        raise ValueError(f"Resize factor must be positive, got {factor}")
    if n_out is None:
        n_out = _output_length(n_in, factor)
    f = float(factor)
    x_out = np.arange(n_out, dtype=np.float64)
    if origin is None:
        u = (x_out + 0.5) / f - 0.5
    else:
        u = (x_out - origin) / f
    # antialias on downscale by stretching the kernel
    stretch = min(f, 1.0)
    support = 2.0 / stretch
    left = np.floor(u - support).astype(int) + 1
    taps = int(math.ceil(2 * support)) + 1
    cols = left[:, None] + np.arange(taps)[None, :]
    weights = keys_cubic((u[:, None] - cols) * stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    folded = reflect_indices(cols, n_in)
    matrix = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for t in range(taps):
        matrix[rows, folded[:, t]] += weights[:, t]
    return matrix


def bicubic_resize(img, factor, origin=None):
    """Separable bicubic resize of every plane of ``img`` by a rational factor.

    Accepts an Image (returns an Image) or a 2D array (returns an array).
    """
    is_image = isinstance(img, Image)
    data = img.data if is_image else np.asarray(img, dtype=np.float64)[np.newaxis]
    _, h, w = data.shape
    wy = resize_weights(h, factor, origin=origin)
    wx = resize_weights(w, factor, origin=origin)
    out = np.stack([wy @ plane @ wx.T for plane in data])
    if is_image:
        return Image(out, img.colorspace)
    return out[0]


# --- Metrics ---


@dataclass(frozen=True)
class PsnrReport:
    value: float
    channel: str
    border_crop: int

    @property
    def identical(self) -> bool:
        return math.isinf(self.value)

    def __str__(self):
        if self.identical:
            return "identical"
        return f"{self.value:.4f} dB"


def _metric_planes(img: Image, channel: str) -> np.ndarray:
    if channel == "Y":
        return to_luma(img).data
    if channel == "all":
        return img.data
    raise ValueError(f"Unknown PSNR channel tag: {channel}")


def psnr(a: Image, b: Image, channel: str = "Y", border_crop: int = 0) -> PsnrReport:
    """10 log10(1 / MSE) on [0,1] samples; an infinite value marks identical inputs."""
    if a.shape != b.shape:
        raise ValueError(f"PSNR dimension mismatch: {a.shape} vs {b.shape}")
    pa = _metric_planes(a, channel)
    pb = _metric_planes(b, channel)
    if pa.shape != pb.shape:
        raise ValueError(f"PSNR channel mismatch: {a.colorspace} vs {b.colorspace}")
    c = int(border_crop)
    if c < 0 or 2 * c >= min(a.shape):
        raise ValueError(f"Border crop {c} leaves no pixels in a {a.shape} image")
    if c:
        pa = pa[:, c:-c, c:-c]
        pb = pb[:, c:-c, c:-c]
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return PsnrReport(math.inf, channel, c)
    return PsnrReport(10.0 * math.log10(1.0 / mse), channel, c)


def isnr(estimate: Image, initial: Image, reference: Image, channel="Y", border_crop=0) -> float:
    """PSNR gain of ``estimate`` over ``initial`` against ``reference``."""
    return (
        psnr(estimate, reference, channel, border_crop).value
        - psnr(initial, reference, channel, border_crop).value
    )


# --- PNG I/O ---


def load_png(path) -> Image:
    """Read an 8 or 16 bit gray/RGB PNG into [0,1] samples."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such image: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"Unreadable image file: {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"Unsupported bit depth ({raw.dtype}) in {path}")
    if raw.ndim == 2:
        return Image(raw[np.newaxis] / scale, "Gray")
    if raw.ndim == 3 and raw.shape[2] == 3:
        rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
        return Image(np.transpose(rgb, (2, 0, 1)) / scale, "RGB")
    raise ValueError(f"Unsupported channel layout {raw.shape} in {path} (alpha is not supported)")


def save_png(img: Image, path, bit_depth: int = 8):
    """Clamp to [0,1], quantize with round-half-up and write a PNG."""
    if bit_depth == 8:
        maxval, dtype = 255.0, np.uint8
    elif bit_depth == 16:
        maxval, dtype = 65535.0, np.uint16
    else:
        raise ValueError(f"Unsupported bit depth: {bit_depth}")
    if img.colorspace == "YCbCr":
        img = ycbcr_to_rgb(img)
    q = np.floor(np.clip(img.data, 0.0, 1.0) * maxval + 0.5).astype(dtype)
    if img.colorspace == "Gray":
        out = q[0]
    else:
        out = cv2.cvtColor(np.ascontiguousarray(np.transpose(q, (1, 2, 0))), cv2.COLOR_RGB2BGR)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise OSError(f"Could not write image to {path}")
    return path
