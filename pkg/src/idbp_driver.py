"""
Iterative denoising and backward projection for single-image super-resolution.

Each iteration projects the current estimate onto {z : Hz = y} and then
denoises the projection with the bank denoiser nearest to sigma_e + delta_k,
where delta decays geometrically from 12s to s over the iterations (optionally
floored). With image adaptation, the trailing schedule denoisers are
fine-tuned on the input before their first use.
"""
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

import ia_adapt
from denoiser_bank import DenoiserBank, NoiseLevel, denoise, select_denoiser
from image_core import Image, as_plane, bicubic_resize, psnr, rgb_to_ycbcr, to_luma, ycbcr_to_rgb
from linops import CgConfig, DegradationOperator, project_onto_constraint

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iter", "delta", "sigma_total", "bank_level", "constraint_residual", "psnr", "adapted"]


@dataclass(frozen=True)
class DeltaSchedule:
    scale_s: int
    n_iters: int = 30
    floor: float = None

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.scale_s < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale_s}")

    def values(self):
        return [delta_at(self, k) for k in range(self.n_iters)]


def delta_at(sched: DeltaSchedule, k: int) -> float:
    """s * 12^((K-1-k)/(K-1)): exactly 12s at k=0 and s at k=K-1, then the floor."""
    if not 0 <= k < sched.n_iters:
        raise IndexError(f"Schedule index {k} outside [0, {sched.n_iters})")
    s, last = sched.scale_s, sched.n_iters - 1
    delta = 12.0 * s if last == 0 else s * 12.0 ** ((last - k) / last)
    if sched.floor is not None:
        delta = max(delta, float(sched.floor))
    return delta


def first_floor_index(sched: DeltaSchedule):
    """First iteration whose delta is held at the floor (None if it never binds)."""
    if sched.floor is None:
        return None
    for k, delta in enumerate(sched.values()):
        if delta == sched.floor:
            return k
    return None


@dataclass(frozen=True)
class IDBPConfig:
    sigma_e: float = 0.0
    n_iters: int = 30
    cg: CgConfig = CgConfig()
    adapt: ia_adapt.AdaptConfig = None
    delta_floor: float = None
    seed: int = 0

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")
        NoiseLevel(self.sigma_e)

    def schedule(self, scale):
        return DeltaSchedule(scale, self.n_iters, self.delta_floor)


@dataclass
class IterationRecord:
    iter: int
    delta: float
    sigma_total: float
    bank_level: float
    constraint_residual: float
    psnr: float = None
    adapted: bool = False


@dataclass
class IDBPState:
    x_tilde: np.ndarray
    z_tilde: np.ndarray = None
    k: int = 0
    trace: list = field(default_factory=list)


@dataclass
class SRResult:
    output: Image
    trace: list
    adapted_levels: list
    initial: Image = None
    init_record: IterationRecord = None
    cg_failures: int = 0
    overlay: dict = None


def _trace_psnr(estimate, ground_truth, border):
    if ground_truth is None:
        return None
    return psnr(Image.from_array(estimate), ground_truth, "Y", border).value


def idbp_superresolve(
    y, op: DegradationOperator, bank: DenoiserBank, cfg: IDBPConfig = IDBPConfig(), ground_truth=None, adapt_source=None
) -> SRResult:
    """Super-resolve the luma image ``y`` observed through ``op``."""
    y_plane = as_plane(y)
    s = op.scale
    hr_shape = op.hr_shape(y_plane.shape)
    if ground_truth is not None and ground_truth.shape != hr_shape:
        raise ValueError(f"Ground truth {ground_truth.shape} does not match output shape {hr_shape}")
    border = s if s > 1 else 0
    sched = cfg.schedule(s)
    deltas = sched.values()
    selections = [select_denoiser(bank, cfg.sigma_e + d)[1] for d in deltas]

    adapt_targets = []
    if cfg.adapt is not None:
        adapt_targets = ia_adapt.adaptation_levels(bank, sched, cfg.sigma_e, cfg.adapt.n_levels)
    overlay = {}

    x0 = bicubic_resize(y_plane, s, origin=op.phase)
    state = IDBPState(x_tilde=x0)
    init_record = IterationRecord(0, math.nan, math.nan, math.nan, math.nan, _trace_psnr(x0, ground_truth, border))
    failures = 0

    for k in range(1, cfg.n_iters + 1):
        proj = project_onto_constraint(op, state.x_tilde, y_plane, cfg.cg)
        failures += not proj.converged
        state.z_tilde = proj.z
        level = selections[k - 1]
        if level in adapt_targets and not overlay:
            source = y_plane if adapt_source is None else as_plane(to_luma(adapt_source) if isinstance(adapt_source, Image) else adapt_source)
            adapt_cfg = replace(cfg.adapt, seed=cfg.seed)
            overlay = ia_adapt.adapt_for_schedule(bank, sched, cfg.sigma_e, source, adapt_cfg)
        net, _ = select_denoiser(bank, cfg.sigma_e + deltas[k - 1], overlay)
        state.x_tilde = denoise(net, proj.z)
        state.k = k
        estimate = proj.z if cfg.sigma_e == 0 else state.x_tilde
        state.trace.append(
            IterationRecord(
                k,
                deltas[k - 1],
                cfg.sigma_e + deltas[k - 1],
                level.sigma255,
                proj.constraint_residual,
                _trace_psnr(estimate, ground_truth, border),
                level in overlay,
            )
        )
        if k % 10 == 0 or k == cfg.n_iters:
            logger.info("iteration %d/%d  delta %.3f  level %g", k, cfg.n_iters, deltas[k - 1], level.sigma255)

    if cfg.sigma_e == 0:
        final = project_onto_constraint(op, state.x_tilde, y_plane, cfg.cg)
        failures += not final.converged
        output = final.z
    else:
        output = state.x_tilde
    if failures:
        logger.warning("%d projections finished without CG convergence", failures)
    return SRResult(
        Image.from_array(output),
        state.trace,
        [lvl.sigma255 for lvl in sorted(overlay)],
        Image.from_array(x0),
        init_record,
        failures,
        overlay,
    )


def superresolve_color(y_rgb: Image, op: DegradationOperator, bank: DenoiserBank, cfg: IDBPConfig = IDBPConfig(), ground_truth=None, adapt_source=None):
    """IDBP on the luma plane, bicubic upsampling of the chroma planes. Returns (RGB image, luma SRResult)."""
    if y_rgb.colorspace != "RGB":
        raise ValueError(f"superresolve_color expects an RGB image, got {y_rgb.colorspace}")
    ycc = rgb_to_ycbcr(y_rgb)
    gt_luma = None
    if ground_truth is not None:
        gt_luma = to_luma(ground_truth)
    result = idbp_superresolve(Image(ycc.data[:1]), op, bank, cfg, gt_luma, adapt_source)
    chroma = [bicubic_resize(ycc.plane(c), op.scale, origin=op.phase) for c in (1, 2)]
    merged = Image(np.stack([result.output.plane(0), *chroma]), "YCbCr")
    return ycbcr_to_rgb(merged), result


def trace_to_frame(result: SRResult) -> pd.DataFrame:
    """Trace as a DataFrame, the initialization (iter 0) first, then one row per iteration."""
    records = ([result.init_record] if result.init_record is not None else []) + list(result.trace)
    return pd.DataFrame([vars(r) for r in records], columns=TRACE_COLUMNS)


def write_trace_csv(result: SRResult, path):
    df = trace_to_frame(result)
    df.to_csv(path, index=False)
    return path
