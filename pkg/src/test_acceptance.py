"""
Acceptance checks on the artifacts of the full pipeline (``doit``).

Tests:
- offline bank: held-out gain of at least 3 dB at levels 15, 25 and 40
- low-level denoisers leave clean benchmark images nearly unchanged
- x2 bicubic benchmark: IDBP-CNN beats bicubic upsampling by at least 1 dB
- image adaptation: IDBP-CNN-IA is no worse than IDBP-CNN (0.05 dB slack), per-image self-denoising too
- kernel mismatch: the correct Gaussian H beats the assumed bicubic H by at least 1.5 dB
- determinism: re-running one benchmark job reproduces the saved image bytes and PSNRs

Each test is skipped when the artifact it reads has not been produced yet.
"""
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import benchmark
from cli_bench import RUN_CONFIG_NAME, RunConfig, read_run_config
from denoiser_bank import denoise, load_bank
from settings import config

BANK_DIR = Path(config("BANK_DIR"))
BENCHMARK_OUT = Path(config("OUTPUT_DIR")) / "benchmark"


def _require(path):
    if not Path(path).exists():
        pytest.skip(f"{path} not found; run the pipeline with `doit` first")
    return Path(path)


def _summary():
    summary = pd.read_csv(_require(BENCHMARK_OUT / "benchmark_summary.csv"))
    return summary.set_index(["protocol", "method"])["psnr"]


def _mean_psnr(protocol, method):
    summary = _summary()
    if (protocol, method) not in summary.index:
        pytest.skip(f"{protocol}/{method} was not part of the benchmark run")
    return summary[(protocol, method)]


def test_offline_bank_gains():
    """Levels 15, 25 and 40 each improve held-out PSNR by at least 3 dB"""
    gains = pd.read_csv(_require(BANK_DIR / "heldout_gains.csv")).set_index("sigma255")["gain_db"]
    for level in (15.0, 25.0, 40.0):
        assert gains[level] >= 3.0, f"level {level:g}: {gains[level]:.2f} dB"


def test_low_level_denoisers_preserve_clean_images():
    """Denoisers at levels <= 5 change clean images by at most 2/255 RMS"""
    bank = load_bank(_require(BANK_DIR / "manifest.txt").parent)
    images = benchmark.load_dataset(_require(Path(config("BENCHMARK_DIR"))))
    for entry in bank.entries:
        if entry.level.sigma255 > 5.0:
            continue
        for name, img in images:
            plane = img.plane(0)
            rms = float(np.sqrt(np.mean((denoise(entry.net, plane) - plane) ** 2)))
            assert rms <= 2.0 / 255.0, f"{name} at level {entry.level}: {rms * 255:.2f}/255"


def test_idbp_beats_bicubic_x2():
    """Mean Y-PSNR gain of IDBP-CNN over bicubic upsampling is at least 1 dB"""
    gain = _mean_psnr("bicubic_x2", "idbp_cnn") - _mean_psnr("bicubic_x2", "bicubic")
    assert gain >= 1.0


def test_adaptation_does_not_hurt():
    """IDBP-CNN-IA stays within 0.05 dB of IDBP-CNN or above"""
    delta = _mean_psnr("bicubic_x2", "idbp_cnn_ia") - _mean_psnr("bicubic_x2", "idbp_cnn")
    print(f"IDBP-CNN-IA minus IDBP-CNN: {delta:+.3f} dB")
    assert delta >= -0.05


def test_adapted_denoisers_self_denoise_better():
    """Per image, the adapted denoisers score at least the offline ones minus 0.05 dB on held-out patches"""
    adaptation = pd.read_csv(_require(BENCHMARK_OUT / "benchmark_adaptation.csv"))
    if adaptation.empty:
        pytest.skip("the benchmark run did not include image adaptation")
    per_image = adaptation.groupby(["image", "protocol"])["delta_db"].mean()
    assert (per_image >= -0.05).all(), per_image[per_image < -0.05].to_dict()


def test_correct_kernel_beats_assumed_bicubic():
    """Reconstructing Gaussian x3 inputs with the Gaussian H gains at least 1.5 dB over assuming bicubic"""
    correct = _mean_psnr("gaussian_x3", "idbp_cnn")
    assumed = _mean_psnr("gaussian_x3_assume_bicubic", "idbp_cnn")
    assert correct - assumed >= 1.5


def test_benchmark_job_is_reproducible(tmp_path):
    """Re-running the first image on the first protocol reproduces the saved PNGs and PSNRs"""
    cfg = RunConfig(**read_run_config(_require(BENCHMARK_OUT / RUN_CONFIG_NAME)))
    rows = pd.read_csv(_require(BENCHMARK_OUT / "benchmark_rows.csv"))
    dataset = benchmark.load_dataset(cfg.dataset)
    protocols = benchmark.resolve_protocols(cfg.protocols, cfg.sigma_e)
    name, image = dataset[0]
    protocol = protocols[0]
    methods = tuple(m for m in cfg.methods if m != "idbp_cnn_ia")
    idbp = replace(cfg.idbp_config(), adapt=None)
    job = benchmark.BenchmarkJob(
        name, image, protocol, idbp, cfg.adapt_config(), cfg.bank, methods, (cfg.seed, 0, 0), tmp_path
    )
    result = benchmark.run_job(job)
    saved = rows[(rows["image"] == name) & (rows["protocol"] == protocol.name)].set_index("method")["psnr"]
    for row in result["rows"]:
        assert row["psnr"] == pytest.approx(saved[row["method"]], abs=1e-9)
        png = f"{name}_{protocol.name}_{row['method']}.png"
        original = BENCHMARK_OUT / "images" / png
        if original.exists():
            assert (tmp_path / png).read_bytes() == original.read_bytes()
