"""
Image-adaptive fine-tuning of bank denoisers at test time.

Clean patches are cut from the low-resolution input (or an enhanced version
of it), augmented, corrupted with Gaussian noise at the denoiser's own level,
and used for a short ADAM run on a clone of the offline network.

Augmentation order: optional 0.9 bicubic downscale, vertical flip, horizontal
flip, one of four rotations, then a uniformly placed square crop.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

import nn_engine as nn
from denoiser_bank import BankEntry, NoiseLevel, nearest_level
from image_core import Image, as_plane, bicubic_resize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    patch_sizes: tuple = (34, 40, 50)
    batch: int = 32
    steps: int = 320
    lr: float = 3e-4
    downscale_prob: float = 0.5
    downscale_factor: float = 0.9
    mirror_prob: float = 0.5
    rotations: tuple = (0, 1, 2, 3)
    n_levels: int = 2
    seed: int = 0
    workers: int = 1
    persist_dir: Path = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"Fine-tuning steps must be >= 1, got {self.steps}")
        if self.batch < 1:
            raise ValueError(f"Batch size must be >= 1, got {self.batch}")
        if not self.patch_sizes or min(self.patch_sizes) < 3:
            raise ValueError(f"Patch sizes must be >= 3, got {self.patch_sizes}")
        if self.n_levels < 1:
            raise ValueError(f"n_levels must be >= 1, got {self.n_levels}")


@dataclass(frozen=True, eq=False)
class AdaptSource:
    """Source of clean training patches: the LR input or an enhanced version of it."""

    image: np.ndarray
    downscale_factor: float = 0.9

    def __post_init__(self):
        plane = np.array(as_plane(self.image), dtype=np.float64)
        if not np.all(np.isfinite(plane)):
            raise ValueError("Adaptation source must be finite")
        plane.setflags(write=False)
        object.__setattr__(self, "image", plane)

    @classmethod
    def of(cls, value, downscale_factor=0.9):
        if isinstance(value, AdaptSource):
            return value
        return cls(as_plane(value) if isinstance(value, Image) else value, downscale_factor)

    @cached_property
    def downscaled(self) -> np.ndarray:
        return bicubic_resize(self.image, self.downscale_factor)


def feasible_sizes(shape, cfg: AdaptConfig):
    return [p for p in cfg.patch_sizes if p <= min(shape)]


def draw_base(src: AdaptSource, cfg: AdaptConfig, rng) -> np.ndarray:
    """The source, downscaled with probability downscale_prob.

    A downscaled source that no patch size fits is replaced by the original.
    """
    if rng.random() < cfg.downscale_prob:
        down = src.downscaled
        if feasible_sizes(down.shape, cfg):
            return down
    return src.image


def mirror_rotate_crop(img, size, cfg: AdaptConfig, rng) -> np.ndarray:
    if rng.random() < cfg.mirror_prob:
        img = img[::-1, :]
    if rng.random() < cfg.mirror_prob:
        img = img[:, ::-1]
    img = np.rot90(img, cfg.rotations[rng.integers(len(cfg.rotations))])
    r = rng.integers(img.shape[0] - size + 1)
    c = rng.integers(img.shape[1] - size + 1)
    return np.ascontiguousarray(img[r : r + size, c : c + size])


def _require_feasible(src: AdaptSource, cfg: AdaptConfig):
    if not feasible_sizes(src.image.shape, cfg):
        raise ValueError(f"Source of shape {src.image.shape} is smaller than every patch size {cfg.patch_sizes}")


def sample_patch(src, cfg: AdaptConfig, rng, size=None) -> np.ndarray:
    """Augmented square patch: downscale, mirror, rotate, then crop.

    The size is drawn uniformly from the sizes that fit the augmented source,
    unless ``size`` is given; a fixed size that the downscaled source cannot
    hold is cropped from the original.
    """
    src = AdaptSource.of(src, cfg.downscale_factor)
    _require_feasible(src, cfg)
    img = draw_base(src, cfg, rng)
    if size is None:
        sizes = feasible_sizes(img.shape, cfg)
        size = sizes[rng.integers(len(sizes))]
    elif size > min(img.shape):
        if size > min(src.image.shape):
            raise ValueError(f"Patch size {size} does not fit a source of shape {src.image.shape}")
        img = src.image
    return mirror_rotate_crop(img, size, cfg, rng)


def make_pair(patch, sigma, rng):
    """(input, target) with input = patch + n and target = n, n ~ N(0, (sigma/255)^2)."""
    sigma = NoiseLevel.of(sigma)
    noise = rng.normal(0.0, sigma.unit, size=np.shape(patch))
    return patch + noise, noise


def make_adapt_batch(src: AdaptSource, cfg: AdaptConfig, level, rng, dtype=np.float32) -> nn.TrainBatch:
    """One minibatch; the downscale draw and the patch size are shared by all its patches."""
    src = AdaptSource.of(src, cfg.downscale_factor)
    _require_feasible(src, cfg)
    base = draw_base(src, cfg, rng)
    sizes = feasible_sizes(base.shape, cfg)
    size = sizes[rng.integers(len(sizes))]
    inputs = np.empty((cfg.batch, 1, size, size), dtype=dtype)
    targets = np.empty_like(inputs)
    for k in range(cfg.batch):
        noisy, noise = make_pair(mirror_rotate_crop(base, size, cfg, rng), level, rng)
        inputs[k, 0] = noisy
        targets[k, 0] = noise
    return nn.TrainBatch(inputs, targets)


def fine_tune(net: nn.ConvNet, src, level, cfg: AdaptConfig = AdaptConfig(), seed=None) -> nn.ConvNet:
    """Warm-started clone of ``net`` trained on pairs synthesized from ``src``."""
    level = NoiseLevel.of(level)
    src = AdaptSource.of(src, cfg.downscale_factor)
    clone = net.clone()
    adam = nn.AdamState.for_params(clone.parameters(), lr=cfg.lr)
    seed = cfg.seed if seed is None else seed
    logger.info("Fine-tuning level %s on a %dx%d source for %d steps", level, *src.image.shape, cfg.steps)
    nn.train(clone, lambda rng: make_adapt_batch(src, cfg, level, rng, clone.dtype), cfg.steps, adam, seed=seed)
    return clone


def adaptation_levels(bank, sched, sigma_e=0.0, n_levels=2):
    """The n smallest distinct bank levels selected along the schedule, ascending.

    A binding floor holds the tail of the schedule on one denoiser, and only
    that denoiser is adapted.
    """
    deltas = sched.values()
    if sched.floor is not None and sched.floor > sched.scale_s:
        return [nearest_level(bank.levels, sigma_e + deltas[-1])]
    selected = {nearest_level(bank.levels, sigma_e + delta) for delta in deltas}
    return sorted(selected)[:n_levels]


def _fine_tune_job(args):
    net, src, level, cfg, seed = args
    return fine_tune(net, src, level, cfg, seed)


def adapt_for_schedule(bank, sched, sigma_e, src, cfg: AdaptConfig = AdaptConfig()) -> dict:
    """Fine-tune the trailing schedule levels; returns an overlay {NoiseLevel: ConvNet}."""
    src = AdaptSource.of(src, cfg.downscale_factor)
    targets = adaptation_levels(bank, sched, sigma_e, cfg.n_levels)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(targets))
    jobs = [(bank.entry(level).net, src, level, cfg, seeds[i]) for i, level in enumerate(targets)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            nets = list(pool.map(_fine_tune_job, jobs))
    else:
        nets = [_fine_tune_job(job) for job in jobs]
    overlay = dict(zip(targets, nets))
    if cfg.persist_dir is not None:
        persist_overlay(overlay, cfg.persist_dir, cfg)
    return overlay


def persist_overlay(overlay, out_dir, cfg: AdaptConfig):
    out_dir = Path(out_dir)
    for level, net in overlay.items():
        entry = BankEntry(level, net, "fine_tuned")
        nn.save_net(
            entry.net,
            out_dir / f"adapted_s{level.sigma255:05.1f}.idbpnn",
            {"sigma255": level.sigma255, "provenance": entry.provenance, "steps": cfg.steps, "seed": cfg.seed},
        )
    return out_dir


def heldout_self_denoising(net: nn.ConvNet, src, level, seed=0, n_patches=200, cfg: AdaptConfig = AdaptConfig()):
    """Mean PSNR of ``net`` on noisy patches of ``src`` drawn from a held-out seed stream."""
    src = AdaptSource.of(src, cfg.downscale_factor)
    level = NoiseLevel.of(level)
    # [seed, 2] never coincides with the training streams spawned from cfg.seed
    rng = np.random.default_rng([seed, 2])
    size = min(feasible_sizes(src.image.shape, cfg))
    scores = []
    for _ in range(n_patches):
        patch = sample_patch(src, cfg, rng, size=size)
        noisy, _ = make_pair(patch, level, rng)
        denoised = net(noisy[np.newaxis, np.newaxis])[0, 0].astype(np.float64)
        mse = max(float(np.mean((denoised - patch) ** 2)), 1e-20)
        scores.append(10.0 * np.log10(1.0 / mse))
    return float(np.mean(scores))
