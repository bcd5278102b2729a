"""
Bank of Gaussian denoisers indexed by noise level (0-255 scale).

Contents:
- NoiseLevel, BankEntry, DenoiserBank
- denoise: residual inference on a single-channel image
- select_denoiser: nearest level, ties broken upward, optional fine-tuned overlay
- OfflineTrainConfig, load_corpus, sample_clean_patches, train_bank
- heldout_gains: per-level PSNR of noisy vs denoised held-out patches
- save_bank / load_bank / bank_hash: directory format with a "sigma255 filename" manifest
"""
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

import nn_engine as nn
from image_core import Image, as_plane, load_png, to_luma

logger = logging.getLogger(__name__)

MAX_BANK_SIGMA = 50.0
MANIFEST_NAME = "manifest.txt"

BANK_PROFILES = {
    "full": tuple(float(s) for s in range(2, 51, 2)),
    "desk": (2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 40.0, 50.0),
}


@dataclass(frozen=True, order=True)
class NoiseLevel:
    sigma255: float

    def __post_init__(self):
        value = float(self.sigma255)
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"Noise level must be finite and >= 0, got {self.sigma255}")
        object.__setattr__(self, "sigma255", value)

    @classmethod
    def of(cls, value):
        return value if isinstance(value, NoiseLevel) else cls(value)

    @property
    def unit(self) -> float:
        """Standard deviation on the [0,1] sample scale."""
        return self.sigma255 / 255.0

    def __str__(self):
        return f"{self.sigma255:g}"


@dataclass(eq=False)
class BankEntry:
    level: NoiseLevel
    net: nn.ConvNet
    provenance: str = "offline"

    def __post_init__(self):
        if self.provenance not in ("offline", "fine_tuned"):
            raise ValueError(f"Unknown provenance tag: {self.provenance}")


@dataclass(eq=False)
class DenoiserBank:
    entries: tuple

    def __post_init__(self):
        self.entries = tuple(self.entries)
        if len(self.entries) < 2:
            raise ValueError(f"A denoiser bank needs at least 2 levels, got {len(self.entries)}")
        levels = [e.level.sigma255 for e in self.entries]
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError(f"Bank levels must be strictly increasing, got {levels}")
        if levels[-1] > MAX_BANK_SIGMA:
            raise ValueError(f"Bank levels must not exceed {MAX_BANK_SIGMA}, got {levels[-1]}")

    @property
    def levels(self):
        return [e.level for e in self.entries]

    def entry(self, level) -> BankEntry:
        level = NoiseLevel.of(level)
        for e in self.entries:
            if e.level == level:
                return e
        raise KeyError(f"No bank entry at level {level}")

    def __len__(self):
        return len(self.entries)


def denoise(net: nn.ConvNet, img):
    """Residual inference: input - net(input). No clamping."""
    plane = as_plane(img)
    out = net(plane[np.newaxis, np.newaxis])[0, 0].astype(np.float64)
    return Image.from_array(out) if isinstance(img, Image) else out


def nearest_level(levels, sigma: float) -> NoiseLevel:
    """Level nearest to sigma; an exact tie picks the larger level."""
    best = None
    for level in levels:
        gap = abs(level.sigma255 - sigma)
        if best is None or gap <= best[0]:
            best = (gap, level)
    return best[1]


def select_denoiser(bank: DenoiserBank, sigma, overlay=None):
    """(net, level) for the bank entry nearest to sigma; ``overlay`` maps levels to
    fine-tuned nets that take precedence over the offline entry."""
    sigma = NoiseLevel.of(sigma).sigma255
    level = nearest_level(bank.levels, sigma)
    if overlay and level in overlay:
        return overlay[level], level
    return bank.entry(level).net, level


def check_coverage(bank: DenoiserBank, sigmas):
    """Raise ValueError unless the bank spans the requested noise levels (capped at 50)."""
    sigmas = [NoiseLevel.of(s).sigma255 for s in sigmas]
    lo, hi = min(sigmas), min(max(sigmas), MAX_BANK_SIGMA)
    levels = [lvl.sigma255 for lvl in bank.levels]
    if levels[0] > lo or levels[-1] < hi:
        raise ValueError(
            f"Bank levels {levels[0]:g}..{levels[-1]:g} do not cover the required range {lo:g}..{hi:g}"
        )


# --- Offline training ---


@dataclass(frozen=True)
class OfflineTrainConfig:
    patch_size: int = 40
    steps: int = 2000
    batch: int = 32
    lr: float = 3e-4
    width: int = 32
    depth: int = 6
    heldout_patches: int = 200
    workers: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1 or self.patch_size < 3:
            raise ValueError("batch must be >= 1 and patch_size >= 3")


def load_corpus(corpus_dir) -> list:
    """Luma planes of every PNG in corpus_dir (sorted by name)."""
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"Corpus directory not found: {corpus_dir}")
    paths = sorted(corpus_dir.glob("*.png"))
    if not paths:
        raise ValueError(f"Empty corpus: no PNG images in {corpus_dir}")
    return [to_luma(load_png(p)).as_array() for p in paths]


def sample_clean_patches(corpus, n, size, rng) -> np.ndarray:
    """(n, 1, size, size) clean patches, image chosen uniformly then a uniform crop."""
    usable = [img for img in corpus if min(img.shape) >= size]
    if not usable:
        raise ValueError(f"No corpus image is at least {size}x{size}")
    out = np.empty((n, 1, size, size))
    for k in range(n):
        img = usable[rng.integers(len(usable))]
        r = rng.integers(img.shape[0] - size + 1)
        c = rng.integers(img.shape[1] - size + 1)
        out[k, 0] = img[r : r + size, c : c + size]
    return out


def noisy_batch(clean, sigma255, rng, dtype=np.float32) -> nn.TrainBatch:
    noise = rng.normal(0.0, sigma255 / 255.0, size=clean.shape)
    return nn.TrainBatch((clean + noise).astype(dtype), noise.astype(dtype))


def level_seeds(seed, n):
    """Independent per-level seed sequences derived from the master seed by index."""
    return np.random.SeedSequence(seed).spawn(n)


def _train_level(args):
    level, corpus, cfg, seed_seq = args
    init_seq, data_seq = seed_seq.spawn(2)
    net = nn.build_denoiser_net(cfg.width, cfg.depth, np.float32, np.random.default_rng(init_seq))

    def make_batch(rng):
        return noisy_batch(sample_clean_patches(corpus, cfg.batch, cfg.patch_size, rng), level, rng)

    logger.info("Training level %g for %d steps", level, cfg.steps)
    adam = nn.AdamState.for_params(net.parameters(), lr=cfg.lr)
    result = nn.train(net, make_batch, cfg.steps, adam, seed=data_seq)
    return level, result.net, result.losses[-1]


def train_bank(levels, corpus_dir, cfg: OfflineTrainConfig = OfflineTrainConfig(), seed=0, out_dir=None) -> DenoiserBank:
    """Train one residual denoiser per level on noisy patches of the corpus."""
    levels = sorted(NoiseLevel.of(v).sigma255 for v in levels)
    if len(levels) < 2:
        raise ValueError(f"A denoiser bank needs at least 2 levels, got {levels}")
    corpus = load_corpus(corpus_dir)
    seeds = level_seeds(seed, len(levels))
    jobs = [(level, corpus, cfg, seeds[i]) for i, level in enumerate(levels)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            trained = list(pool.map(_train_level, jobs))
    else:
        trained = [_train_level(job) for job in jobs]
    bank = DenoiserBank([BankEntry(NoiseLevel(level), net) for level, net, _ in trained])
    if out_dir is not None:
        meta = {
            float(level): {"sigma255": level, "steps": cfg.steps, "seed": seed, "final_loss": f"{loss:.6f}"}
            for level, _, loss in trained
        }
        save_bank(bank, out_dir, meta)
    return bank


def heldout_gains(bank: DenoiserBank, corpus, cfg: OfflineTrainConfig = OfflineTrainConfig(), seed=0) -> pd.DataFrame:
    """PSNR of noisy and denoised held-out patches at each level's own noise level.

    Held-out patches come from a seed stream disjoint from every training stream.
    """
    rows = []
    heldout_seqs = np.random.SeedSequence([seed, 1]).spawn(len(bank))
    for entry, seq in zip(bank.entries, heldout_seqs):
        rng = np.random.default_rng(seq)
        clean = sample_clean_patches(corpus, cfg.heldout_patches, cfg.patch_size, rng)
        batch = noisy_batch(clean, entry.level.sigma255, rng, dtype=np.float64)
        denoised = entry.net(batch.inputs).astype(np.float64)
        psnr_noisy = _batch_psnr(batch.inputs, clean)
        psnr_denoised = _batch_psnr(denoised, clean)
        rows.append(
            {
                "sigma255": entry.level.sigma255,
                "psnr_noisy": psnr_noisy,
                "psnr_denoised": psnr_denoised,
                "gain_db": psnr_denoised - psnr_noisy,
            }
        )
    return pd.DataFrame(rows)


def _batch_psnr(estimate, clean):
    """Mean per-patch PSNR."""
    mse = np.mean((estimate - clean) ** 2, axis=(1, 2, 3))
    return float(np.mean(10.0 * np.log10(1.0 / np.maximum(mse, 1e-20))))


# --- Persistence ---


def _weight_name(level):
    return f"denoiser_s{level.sigma255:05.1f}.idbpnn"


def save_bank(bank: DenoiserBank, path, metadata=None):
    """One weight file + metadata per level, plus manifest.txt ("sigma255 filename" lines)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    metadata = metadata or {}
    lines = []
    for entry in bank.entries:
        name = _weight_name(entry.level)
        meta = {"sigma255": entry.level.sigma255, "provenance": entry.provenance}
        meta.update(metadata.get(entry.level.sigma255, {}))
        nn.save_net(entry.net, path / name, meta)
        lines.append(f"{entry.level.sigma255:g} {name}")
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return path


def load_bank(path) -> DenoiserBank:
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"Bank manifest not found: {manifest}")
    entries = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        try:
            sigma, name = line.split()
            level = NoiseLevel(float(sigma))
        except ValueError as e:
            raise ValueError(f"Malformed manifest line in {manifest}: {line!r}") from e
        if entries and level.sigma255 <= entries[-1].level.sigma255:
            raise ValueError(f"Manifest {manifest} lists level {sigma} out of order or duplicated")
        weight_path = path / name
        net = nn.load_net(weight_path)
        meta = nn.load_metadata(weight_path)
        if "sigma255" in meta and float(meta["sigma255"]) != level.sigma255:
            raise ValueError(f"Manifest level {sigma} does not match metadata level {meta['sigma255']} of {name}")
        entries.append(BankEntry(level, net, meta.get("provenance", "offline")))
    return DenoiserBank(entries)


def bank_hash(path) -> str:
    """SHA-256 over the manifest and every weight file, in manifest order."""
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"Bank manifest not found: {manifest}")
    digest = hashlib.sha256(manifest.read_bytes())
    for line in manifest.read_text().splitlines():
        if line.strip():
            digest.update((path / line.split()[1]).read_bytes())
    return digest.hexdigest()
