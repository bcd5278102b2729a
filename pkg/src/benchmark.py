"""
Benchmark harness: synthesize low-resolution inputs from ground-truth images
with the operator's own H, reconstruct them with the bicubic baseline,
IDBP-CNN and IDBP-CNN-IA, and tabulate Y-channel PSNR.

Protocols:
- bicubic_x2, bicubic_x3: bicubic decimation kernel
- gaussian_x3: 7x7 Gaussian, sigma 1.6
- gaussian_x3_assume_bicubic: Gaussian synthesis, bicubic reconstruction (kernel mismatch)

Outputs (written by write_report):
- benchmark_rows.csv        one row per image / protocol / method
- benchmark_summary.csv     per protocol / method means of the rows
- benchmark_curves.csv      PSNR per iteration (iters + 1 rows per image / method)
- benchmark_adaptation.csv  held-out self-denoising PSNR, offline vs adapted
- benchmark_timings.csv     wall-clock seconds per stage
- benchmark_table.txt       text table of the summary
"""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

import ia_adapt
from denoiser_bank import load_bank
from idbp_driver import IDBPConfig, idbp_superresolve, trace_to_frame
from image_core import (
    Image,
    bicubic_resize,
    center_crop_to_multiple,
    isnr,
    load_png,
    psnr,
    save_png,
    to_luma,
)
from linops import DegradationOperator, parse_kernel_spec, synthesize_lr

logger = logging.getLogger(__name__)

METHODS = ("bicubic", "idbp_cnn", "idbp_cnn_ia")
METHOD_DISPLAY = {
    "bicubic": "Bicubic",
    "idbp_cnn": "IDBP-CNN",
    "idbp_cnn_ia": "IDBP-CNN-IA",
}


@dataclass(frozen=True)
class Protocol:
    name: str
    scale: int
    synth_kernel: str
    recon_kernel: str
    sigma_e: float = 0.0

    def operators(self):
        synth = DegradationOperator(parse_kernel_spec(self.synth_kernel, self.scale), self.scale)
        if self.recon_kernel == self.synth_kernel:
            return synth, synth
        return synth, DegradationOperator(parse_kernel_spec(self.recon_kernel, self.scale), self.scale)


PROTOCOLS = {
    "bicubic_x2": Protocol("bicubic_x2", 2, "bicubic", "bicubic"),
    "bicubic_x3": Protocol("bicubic_x3", 3, "bicubic", "bicubic"),
    "gaussian_x3": Protocol("gaussian_x3", 3, "gaussian:7,1.6", "gaussian:7,1.6"),
    "gaussian_x3_assume_bicubic": Protocol("gaussian_x3_assume_bicubic", 3, "gaussian:7,1.6", "bicubic"),
}


def resolve_protocols(names, sigma_e=0.0):
    """Protocol records for the given names; a positive sigma_e makes every protocol noisy."""
    out = []
    for name in names:
        if name not in PROTOCOLS:
            raise ValueError(f"Unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}")
        p = PROTOCOLS[name]
        out.append(replace(p, sigma_e=float(sigma_e)) if sigma_e else p)
    return out


def load_dataset(dataset_dir):
    """(name, luma image) for every PNG in dataset_dir, sorted by name."""
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {dataset_dir}")
    paths = sorted(dataset_dir.glob("*.png"))
    if not paths:
        raise ValueError(f"Empty dataset: no PNG images in {dataset_dir}")
    return [(p.stem, to_luma(load_png(p))) for p in paths]


@dataclass(frozen=True)
class BenchmarkJob:
    image_name: str
    image: Image
    protocol: Protocol
    idbp: IDBPConfig
    adapt: ia_adapt.AdaptConfig
    bank_path: Path
    methods: tuple
    seed_key: tuple
    image_dir: Path = None


def _curve_rows(job, method, frame):
    frame = frame[["iter", "psnr"]].copy()
    frame.insert(0, "method", method)
    frame.insert(0, "protocol", job.protocol.name)
    frame.insert(0, "image", job.image_name)
    return frame


def run_job(job: BenchmarkJob) -> dict:
    """All methods of one protocol on one image."""
    p = job.protocol
    s = p.scale
    gt = center_crop_to_multiple(job.image, s)
    synth_op, recon_op = p.operators()
    rng = np.random.default_rng(np.random.SeedSequence(job.seed_key))
    y = synthesize_lr(synth_op, gt, p.sigma_e, rng)
    bank = load_bank(job.bank_path)
    idbp = replace(job.idbp, sigma_e=p.sigma_e)

    rows, curves, timings, adaptation = [], [], [], []
    outputs = {}
    for method in job.methods:
        start = time.perf_counter()
        trace_frame, cg_failures = None, 0
        if method == "bicubic":
            out = Image.from_array(bicubic_resize(y.plane(0), s, origin=recon_op.phase))
        elif method in ("idbp_cnn", "idbp_cnn_ia"):
            cfg = idbp if method == "idbp_cnn" else replace(idbp, adapt=job.adapt)
            result = idbp_superresolve(y, recon_op, bank, cfg, ground_truth=gt)
            out, cg_failures = result.output, result.cg_failures
            trace_frame = trace_to_frame(result)
            if method == "idbp_cnn_ia" and result.overlay:
                adaptation.extend(_adaptation_rows(job, bank, result.overlay, y))
        else:
            raise ValueError(f"Unknown method {method!r}")
        elapsed = time.perf_counter() - start
        value = psnr(out, gt, "Y", s).value
        if method == "bicubic":
            n_iters = idbp.n_iters
            trace_frame = pd.DataFrame({"iter": np.arange(n_iters + 1), "psnr": value})
        outputs[method] = out
        rows.append(
            {
                "image": job.image_name,
                "protocol": p.name,
                "method": method,
                "scale": s,
                "synth_kernel": p.synth_kernel,
                "recon_kernel": p.recon_kernel,
                "sigma_e": p.sigma_e,
                "psnr": value,
                "cg_failures": cg_failures,
            }
        )
        curves.append(_curve_rows(job, method, trace_frame))
        timings.append({"image": job.image_name, "protocol": p.name, "stage": method, "seconds": elapsed})
        logger.info("%s %s %s: %.3f dB (%.1fs)", job.image_name, p.name, method, value, elapsed)

    for row in rows:
        row["isnr"] = isnr(outputs[row["method"]], outputs["bicubic"], gt, "Y", s) if "bicubic" in outputs else np.nan
    if job.image_dir is not None:
        for method, out in outputs.items():
            save_png(out, Path(job.image_dir) / f"{job.image_name}_{p.name}_{method}.png")
    return {"rows": rows, "curves": curves, "timings": timings, "adaptation": adaptation}


def _adaptation_rows(job, bank, overlay, y):
    rows = []
    for level, adapted in sorted(overlay.items()):
        offline = bank.entry(level).net
        seed = job.seed_key[0]
        before = ia_adapt.heldout_self_denoising(offline, y, level, seed=seed, cfg=job.adapt)
        after = ia_adapt.heldout_self_denoising(adapted, y, level, seed=seed, cfg=job.adapt)
        rows.append(
            {
                "image": job.image_name,
                "protocol": job.protocol.name,
                "sigma255": level.sigma255,
                "psnr_offline": before,
                "psnr_adapted": after,
                "delta_db": after - before,
            }
        )
    return rows


@dataclass
class BenchmarkReport:
    rows: pd.DataFrame
    summary: pd.DataFrame
    curves: pd.DataFrame
    timings: pd.DataFrame
    adaptation: pd.DataFrame
    protocols: list


def summarize_rows(rows: pd.DataFrame) -> pd.DataFrame:
    """Per protocol / method means, recomputed purely from the rows."""
    summary = (
        rows.groupby(["protocol", "method"], sort=False)[["psnr", "isnr"]]
        .mean()
        .reset_index()
    )
    counts = rows.groupby(["protocol", "method"], sort=False).size().reset_index(name="n_images")
    return summary.merge(counts, on=["protocol", "method"])


def run_benchmark(dataset_dir, protocols, bank_path, idbp: IDBPConfig, adapt: ia_adapt.AdaptConfig, methods=METHODS, workers=1, image_dir=None) -> BenchmarkReport:
    dataset = load_dataset(dataset_dir)
    jobs = []
    for i, (name, image) in enumerate(dataset):
        for j, protocol in enumerate(protocols):
            jobs.append(
                BenchmarkJob(name, image, protocol, idbp, adapt, Path(bank_path), tuple(methods), (idbp.seed, i, j), image_dir)
            )
    logger.info("Benchmark: %d images x %d protocols on %d workers", len(dataset), len(protocols), workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_job, jobs))
    else:
        results = [run_job(job) for job in jobs]
    return assemble_report(results, protocols)


def assemble_report(results, protocols) -> BenchmarkReport:
    rows = pd.DataFrame([r for res in results for r in res["rows"]])
    curves = pd.concat([c for res in results for c in res["curves"]], ignore_index=True)
    timings = pd.DataFrame([t for res in results for t in res["timings"]])
    adaptation = pd.DataFrame(
        [a for res in results for a in res["adaptation"]],
        columns=["image", "protocol", "sigma255", "psnr_offline", "psnr_adapted", "delta_db"],
    )
    return BenchmarkReport(rows, summarize_rows(rows), curves, timings, adaptation, list(protocols))


def format_table(report: BenchmarkReport) -> str:
    """Plain-text table: protocols as rows, methods as columns (mean Y-PSNR, dB)."""
    lines = ["Mean Y-PSNR (dB), border crop = scale", ""]
    for p in report.protocols:
        synth, recon = p.operators()
        lines.append(
            f"{p.name}: x{p.scale}, synthesis {p.synth_kernel} ({synth.kernel.describe()}), "
            f"reconstruction {p.recon_kernel}, sigma_e {p.sigma_e:g}"
        )
    table = report.summary.pivot(index="protocol", columns="method", values="psnr")
    table = table.reindex(index=[p.name for p in report.protocols])
    table = table[[m for m in METHODS if m in table.columns]].rename(columns=METHOD_DISPLAY)
    lines += ["", table.to_string(float_format=lambda v: f"{v:.2f}")]
    if {"IDBP-CNN", "IDBP-CNN-IA"} <= set(table.columns):
        lines.append("")
        for name, row in table.iterrows():
            lines.append(f"{name}: IDBP-CNN-IA minus IDBP-CNN = {row['IDBP-CNN-IA'] - row['IDBP-CNN']:+.3f} dB")
    return "\n".join(lines) + "\n"


def write_report(report: BenchmarkReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.rows.to_csv(out_dir / "benchmark_rows.csv", index=False)
    report.summary.to_csv(out_dir / "benchmark_summary.csv", index=False)
    report.curves.to_csv(out_dir / "benchmark_curves.csv", index=False)
    report.adaptation.to_csv(out_dir / "benchmark_adaptation.csv", index=False)
    report.timings.to_csv(out_dir / "benchmark_timings.csv", index=False)
    (out_dir / "benchmark_table.txt").write_text(format_table(report))
    return out_dir
