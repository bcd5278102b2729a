"""
Degradation operator H (blur then decimate), its exact adjoint, and the
back-projection onto {z : Hz = y} solved matrix-free with conjugate gradients.

Contents:
- Kernel2D, make_bicubic_kernel, make_gaussian_kernel, make_identity_kernel
- load_kernel / save_kernel (plain-text kernel files), parse_kernel_spec
- DegradationOperator, apply_H, apply_Ht, synthesize_lr
- CgConfig, CgResult, cg_solve
- ProjectionResult, project_onto_constraint
- build_dense_operator (small-image oracle)

Conventions: blurred[p] = sum_u taps[u] * x_ext[p - u + anchor] with a
half-sample symmetric extension x_ext, then y[i] = blurred[s*i + phase].
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from image_core import Image, as_plane, fold_symmetric, keys_cubic, pad_symmetric

logger = logging.getLogger(__name__)

MAX_DENSE_PIXELS = 32 * 32


@dataclass(frozen=True, eq=False)
class Kernel2D:
    taps: np.ndarray
    anchor: tuple = None

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.size == 0:
            raise ValueError(f"Kernel taps must be a non-empty 2D array, got shape {taps.shape}")
        if not np.all(np.isfinite(taps)):
            raise ValueError("Kernel taps must be finite")
        anchor = self.anchor
        if anchor is None:
            anchor = (taps.shape[0] // 2, taps.shape[1] // 2)
        anchor = (int(anchor[0]), int(anchor[1]))
        if not (0 <= anchor[0] < taps.shape[0] and 0 <= anchor[1] < taps.shape[1]):
            raise ValueError(f"Kernel anchor {anchor} lies outside taps of shape {taps.shape}")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "_factors", _separable_factors(taps))

    @property
    def shape(self):
        return self.taps.shape

    def describe(self):
        return f"{self.shape[0]}x{self.shape[1]} kernel, anchor {self.anchor}, sum {self.taps.sum():.12f}"


def _separable_factors(taps):
    """Column/row vectors with outer product == taps, or None when not rank one."""
    u, s, vt = np.linalg.svd(taps)
    if s[0] == 0.0 or (len(s) > 1 and s[1] > 1e-13 * s[0]):
        return None
    col = u[:, 0] * math.sqrt(s[0])
    row = vt[0] * math.sqrt(s[0])
    if np.max(np.abs(np.outer(col, row) - taps)) > 1e-15:
        return None
    return col[:, None], row[None, :]


def make_bicubic_kernel(scale: int) -> Kernel2D:
    """Antialiasing bicubic decimation kernel: Keys (a=-0.5) stretched by s, normalized."""
    if scale not in (2, 3, 4):
        raise ValueError(f"Bicubic kernel supports scales 2, 3 and 4, got {scale}")
    radius = 2 * scale - 1
    offsets = np.arange(-radius, radius + 1)
    taps_1d = keys_cubic(offsets / scale)
    taps_1d /= taps_1d.sum()
    return Kernel2D(np.outer(taps_1d, taps_1d), (radius, radius))


def make_gaussian_kernel(size: int = 7, sigma: float = 1.6) -> Kernel2D:
    """Sampled isotropic Gaussian normalized to sum 1."""
    if size < 3 or size % 2 == 0:
        raise ValueError(f"Gaussian kernel size must be odd and >= 3, got {size}")
    if sigma <= 0:
        raise ValueError(f"Gaussian sigma must be positive, got {sigma}")
    r = size // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2.0 * sigma * sigma))
    g /= g.sum()
    return Kernel2D(np.outer(g, g), (r, r))


def make_identity_kernel() -> Kernel2D:
    return Kernel2D(np.ones((1, 1)), (0, 0))


def load_kernel(path, normalize=True) -> Kernel2D:
    """Read a kernel file: header "rows cols anchor_r anchor_c", then one row of taps per line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Kernel file not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"Kernel file {path} is empty")
    header = lines[0].split()
    try:
        rows, cols, ar, ac = (int(v) for v in header)
    except ValueError as e:
        raise ValueError(f"Malformed kernel header in {path}: {lines[0]!r}") from e
    if rows < 1 or cols < 1:
        raise ValueError(f"Kernel dimensions must be positive in {path}")
    body = lines[1:]
    if len(body) != rows:
        raise ValueError(f"Kernel file {path} declares {rows} rows but has {len(body)}")
    try:
        taps = np.array([[float(v) for v in ln.split()] for ln in body])
    except ValueError as e:
        raise ValueError(f"Non-numeric kernel tap in {path}") from e
    if taps.shape != (rows, cols):
        raise ValueError(f"Kernel file {path} declares {rows}x{cols} taps, found ragged or {taps.shape}")
    if normalize:
        total = taps.sum()
        if total <= 0:
            raise ValueError(f"Kernel in {path} cannot be normalized (sum {total})")
        taps = taps / total
    return Kernel2D(taps, (ar, ac))


def save_kernel(kernel: Kernel2D, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = kernel.shape
    lines = [f"{rows} {cols} {kernel.anchor[0]} {kernel.anchor[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in kernel.taps]
    path.write_text("\n".join(lines) + "\n")
    return path


def parse_kernel_spec(spec: str, scale: int) -> Kernel2D:
    """Kernel from ``bicubic``, ``gaussian[:size,sigma]``, ``identity`` or ``file:path``."""
    name, _, arg = spec.strip().partition(":")
    if name == "bicubic":
        return make_bicubic_kernel(scale)
    if name == "gaussian":
        if not arg:
            return make_gaussian_kernel()
        try:
            size, sigma = arg.split(",")
            return make_gaussian_kernel(int(size), float(sigma))
        except ValueError as e:
            raise ValueError(f"Gaussian kernel spec must be gaussian:size,sigma, got {spec!r}") from e
    if name == "identity":
        return make_identity_kernel()
    if name == "file":
        return load_kernel(arg)
    raise ValueError(f"Unknown kernel spec: {spec!r}")


# --- Operator ---


@dataclass(frozen=True)
class DegradationOperator:
    kernel: Kernel2D
    scale: int = 1
    boundary: str = "symmetric"
    phase: int = 0

    def __post_init__(self):
        if int(self.scale) != self.scale or self.scale < 1:
            raise ValueError(f"Scale must be an integer >= 1, got {self.scale}")
        if self.boundary != "symmetric":
            raise ValueError(f"Only the symmetric boundary rule is supported, got {self.boundary}")
        if not 0 <= self.phase < self.scale:
            raise ValueError(f"Phase must lie in [0, scale), got {self.phase}")

    def lr_shape(self, hr_shape):
        return tuple(math.ceil((n - self.phase) / self.scale) for n in hr_shape)

    def hr_shape(self, lr_shape):
        return tuple(n * self.scale for n in lr_shape)

    def _pads(self):
        kh, kw = self.kernel.shape
        ar, ac = self.kernel.anchor
        return (kh - 1 - ar, ar), (kw - 1 - ac, ac)


def _valid_convolve(padded, kernel):
    factors = kernel._factors
    if factors is None:
        return convolve2d(padded, kernel.taps, mode="valid")
    col, row = factors
    return convolve2d(convolve2d(padded, col, mode="valid"), row, mode="valid")


def _full_correlate(g, kernel):
    factors = kernel._factors
    if factors is None:
        return convolve2d(g, kernel.taps[::-1, ::-1], mode="full")
    col, row = factors
    return convolve2d(convolve2d(g, row[:, ::-1], mode="full"), col[::-1], mode="full")


def _blur_decimate(op, x):
    (rb, ra), (cb, ca) = op._pads()
    padded = pad_symmetric(pad_symmetric(x, 0, rb, ra), 1, cb, ca)
    blurred = _valid_convolve(padded, op.kernel)
    s, p = op.scale, op.phase
    return blurred[p::s, p::s]


def _adjoint(op, v, hr_shape):
    s, p = op.scale, op.phase
    h, w = hr_shape
    if v.shape != op.lr_shape(hr_shape):
        raise ValueError(f"Low-resolution shape {v.shape} does not match HR shape {hr_shape} at scale {s}")
    upsampled = np.zeros((h, w))
    upsampled[p::s, p::s] = v
    (rb, ra), (cb, ca) = op._pads()
    extended = _full_correlate(upsampled, op.kernel)
    return fold_symmetric(fold_symmetric(extended, 1, cb, ca), 0, rb, ra)


def _check_support(op, shape):
    kh, kw = op.kernel.shape
    if shape[0] < max(kh // 2, 1) or shape[1] < max(kw // 2, 1):
        raise ValueError(f"Image of shape {shape} is smaller than the kernel support {op.kernel.shape}")


def apply_H(op: DegradationOperator, x):
    """Blur with symmetric boundary, then decimate. Image in, Image out (or plane in, plane out)."""
    plane = as_plane(x)
    _check_support(op, plane.shape)
    out = _blur_decimate(op, plane)
    return Image.from_array(out) if isinstance(x, Image) else out


def apply_Ht(op: DegradationOperator, v, hr_shape=None):
    """Exact adjoint of apply_H: zero insertion, correlation, fold of the boundary extension."""
    plane = as_plane(v)
    if hr_shape is None:
        hr_shape = op.hr_shape(plane.shape)
    out = _adjoint(op, plane, tuple(hr_shape))
    return Image.from_array(out) if isinstance(v, Image) else out


def synthesize_lr(op: DegradationOperator, x, sigma_e: float = 0.0, rng=None):
    """y = Hx + e with e ~ N(0, (sigma_e/255)^2)."""
    y = apply_H(op, as_plane(x))
    if sigma_e > 0:
        rng = np.random.default_rng(rng)
        y = y + rng.normal(0.0, sigma_e / 255.0, size=y.shape)
    return Image.from_array(y) if isinstance(x, Image) else y


# --- Conjugate gradients ---


@dataclass(frozen=True)
class CgConfig:
    tolerance: float = 1e-6
    max_iters: int = 100

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError(f"CG tolerance must be positive, got {self.tolerance}")
        if self.max_iters < 1:
            raise ValueError(f"CG max_iters must be >= 1, got {self.max_iters}")


@dataclass
class CgResult:
    solution: np.ndarray
    iterations: int
    residual: float
    converged: bool
    residual_history: list = field(default_factory=list)


def cg_solve(apply_A, b, cfg: CgConfig = CgConfig(), x0=None, callback=None) -> CgResult:
    """Conjugate gradients for A a = b with A symmetric positive semi-definite.

    Stops when ||A a - b|| / ||b|| <= tolerance. Hitting max_iters is reported
    through ``converged`` and the best iterate seen is returned. ``callback(a)``
    is called with every iterate.
    """
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if not math.isfinite(b_norm):
        raise FloatingPointError("Non-finite right-hand side in CG")
    if b_norm == 0.0:
        return CgResult(np.zeros_like(b), 0, 0.0, True, [0.0])

    a = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply_A(a) if x0 is not None else b.copy()
    d = r.copy()
    rr = float(np.vdot(r, r))
    history = [math.sqrt(rr) / b_norm]
    best, best_res = a.copy(), history[0]
    if history[0] <= cfg.tolerance:
        return CgResult(a, 0, history[0], True, history)

    for it in range(1, cfg.max_iters + 1):
        Ad = apply_A(d)
        dAd = float(np.vdot(d, Ad))
        if not math.isfinite(dAd):
            raise FloatingPointError(f"Non-finite curvature at CG iteration {it}")
        if dAd <= 0.0:
            # direction in the null space: nothing left to reduce
            logger.warning("CG stopped on non-positive curvature at iteration %d", it)
            return CgResult(best, it - 1, best_res, best_res <= cfg.tolerance, history)
        alpha = rr / dAd
        a = a + alpha * d
        if callback is not None:
            callback(a)
        r = r - alpha * Ad
        rr_new = float(np.vdot(r, r))
        if not math.isfinite(rr_new):
            raise FloatingPointError(f"Non-finite residual at CG iteration {it}")
        res = math.sqrt(rr_new) / b_norm
        history.append(res)
        if res < best_res:
            best, best_res = a, res
        if res <= cfg.tolerance:
            return CgResult(a, it, res, True, history)
        d = r + (rr_new / rr) * d
        rr = rr_new

    return CgResult(best, cfg.max_iters, best_res, False, history)


# --- Back-projection ---


@dataclass
class ProjectionResult:
    z: np.ndarray
    converged: bool
    cg_iterations: int
    constraint_residual: float

    def as_image(self) -> Image:
        return Image.from_array(self.z)


def project_onto_constraint(op: DegradationOperator, x_tilde, y, cfg: CgConfig = CgConfig()) -> ProjectionResult:
    """z = H^T a + x_tilde with (H H^T) a = y - H x_tilde, so that H z = y."""
    x = as_plane(x_tilde)
    y_plane = as_plane(y)
    hr_shape = x.shape
    if op.lr_shape(hr_shape) != y_plane.shape:
        raise ValueError(f"LR shape {y_plane.shape} is inconsistent with HR shape {hr_shape} at scale {op.scale}")

    def apply_HHt(a):
        return _blur_decimate(op, _adjoint(op, a, hr_shape))

    rhs = y_plane - _blur_decimate(op, x)
    cg = cg_solve(apply_HHt, rhs, cfg)
    if not cg.converged:
        logger.warning(
            "Projection CG did not converge in %d iterations (relative residual %.3e)", cg.iterations, cg.residual
        )
    z = x + _adjoint(op, cg.solution, hr_shape)
    y_norm = float(np.linalg.norm(y_plane))
    defect = float(np.linalg.norm(_blur_decimate(op, z) - y_plane))
    constraint_residual = defect / y_norm if y_norm > 0 else defect
    return ProjectionResult(z, cg.converged, cg.iterations, constraint_residual)


def build_dense_operator(op: DegradationOperator, hr_dims) -> np.ndarray:
    """Explicit matrix of apply_H on row-major flattened images, one unit impulse per column."""
    h, w = hr_dims
    if h * w > MAX_DENSE_PIXELS:
        raise ValueError(f"Dense operator limited to {MAX_DENSE_PIXELS} pixels, got {h}x{w}")
    lh, lw = op.lr_shape((h, w))
    matrix = np.zeros((lh * lw, h * w))
    impulse = np.zeros((h, w))
    for j in range(h * w):
        impulse.flat[j] = 1.0
        matrix[:, j] = _blur_decimate(op, impulse).ravel()
        impulse.flat[j] = 0.0
    return matrix
