"""
Command-line surface of the super-resolution engine.

Commands:
- train-bank:   train the offline denoiser bank and print held-out PSNR gains
- superresolve: super-resolve one PNG with IDBP-CNN (or IDBP-CNN-IA with --ia)
- benchmark:    run the synthetic-degradation protocols on a ground-truth set
- selftest:     run the operator, CG, gradient and schedule invariant suite

Every flag has a twin key in a flat key=value run configuration file
(``--sigma-e`` <-> ``sigma_e``) passed with ``--config``; flags override the
file. The resolved configuration is written to ``run_config.txt`` in each
output directory.

Example
-------
```
>>> python src/cli_bench.py superresolve _data/benchmark_gt/chelsea.png --scale 2 --ia --out _output/chelsea
```
"""
import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from decouple import Config, Csv, RepositoryEnv

import benchmark
import denoiser_bank as db
import selftest
from ia_adapt import AdaptConfig
from idbp_driver import IDBPConfig, idbp_superresolve, superresolve_color, write_trace_csv
from image_core import load_png, psnr, save_png
from linops import CgConfig, DegradationOperator, parse_kernel_spec
from settings import config

logger = logging.getLogger("cli_bench")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
RUN_CONFIG_NAME = "run_config.txt"
RUN_MANIFEST_NAME = "run_manifest.txt"


def _optional_float(value):
    if value is None or str(value).strip().lower() in ("", "none"):
        return None
    return float(value)


def _path(value):
    if value is None or str(value).strip().lower() in ("", "none"):
        return None
    return Path(value)


@dataclass(frozen=True)
class RunConfig:
    scale: int = 2
    kernel: str = "bicubic"
    sigma_e: float = 0.0
    ia: bool = False
    iters: int = 30
    delta_floor: float = None
    ia_levels: int = 2
    ia_steps: int = 320
    cg_tol: float = 1e-6
    cg_max_iters: int = 100
    bank: Path = None
    seed: int = 0
    out: Path = None
    workers: int = 1
    corpus: Path = None
    profile: str = "desk"
    levels: tuple = ()
    steps: int = 2000
    patch_size: int = 40
    batch: int = 32
    dataset: Path = None
    protocols: tuple = tuple(benchmark.PROTOCOLS)
    methods: tuple = benchmark.METHODS
    persist_adapted: bool = False
    log_level: str = "INFO"

    def idbp_config(self) -> IDBPConfig:
        return IDBPConfig(
            sigma_e=self.sigma_e,
            n_iters=self.iters,
            cg=CgConfig(self.cg_tol, self.cg_max_iters),
            adapt=self.adapt_config() if self.ia else None,
            delta_floor=self.delta_floor,
            seed=self.seed,
        )

    def adapt_config(self, workers=1) -> AdaptConfig:
        persist = self.out / "adapted" if self.persist_adapted and self.out is not None else None
        return AdaptConfig(steps=self.ia_steps, n_levels=self.ia_levels, seed=self.seed, workers=workers, persist_dir=persist)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


CASTS = {
    "scale": int,
    "kernel": str,
    "sigma_e": float,
    "ia": bool,
    "iters": int,
    "delta_floor": _optional_float,
    "ia_levels": int,
    "ia_steps": int,
    "cg_tol": float,
    "cg_max_iters": int,
    "bank": _path,
    "seed": int,
    "out": _path,
    "workers": int,
    "corpus": _path,
    "profile": str,
    "levels": Csv(cast=float, post_process=tuple),
    "steps": int,
    "patch_size": int,
    "batch": int,
    "dataset": _path,
    "protocols": Csv(post_process=tuple),
    "methods": Csv(post_process=tuple),
    "persist_adapted": bool,
    "log_level": str,
}


def settings_defaults() -> dict:
    """Pipeline-level defaults from settings.py (env / .env / ALL-CAPS flags)."""
    return {
        "bank": Path(config("BANK_DIR")),
        "seed": config("SEED", cast=int),
        "workers": config("WORKERS", cast=int),
        "corpus": Path(config("CORPUS_DIR")),
        "dataset": Path(config("BENCHMARK_DIR")),
        "profile": config("BANK_PROFILE"),
        "steps": config("BANK_STEPS", cast=int),
        "log_level": config("LOG_LEVEL"),
    }


def read_run_config(path) -> dict:
    """Typed values from a key=value run configuration file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Run configuration not found: {path}")
    repository = RepositoryEnv(str(path))
    unknown = sorted(set(repository.data) - set(CASTS))
    if unknown:
        raise ValueError(f"Unknown keys in {path}: {', '.join(unknown)}")
    source = Config(repository)
    return {key: source(key, cast=CASTS[key]) for key in repository.data}


def resolve_run_config(config_path=None, overrides=None, base=None) -> RunConfig:
    """settings defaults < config file < command-line flags."""
    values = settings_defaults() if base is None else dict(base)
    if config_path is not None:
        values.update(read_run_config(config_path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = RunConfig(**values)
    if cfg.scale < 1:
        raise ValueError(f"--scale must be >= 1, got {cfg.scale}")
    if cfg.workers < 1:
        raise ValueError(f"--workers must be >= 1, got {cfg.workers}")
    return cfg


def write_run_config(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / RUN_CONFIG_NAME
    path.write_text(cfg.to_text())
    return path


def write_run_manifest(out_dir, entries: dict) -> Path:
    path = Path(out_dir) / RUN_MANIFEST_NAME
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()))
    return path


def configure_logging(level="INFO", log_path=None):
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_path, mode="w"))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )


# --- Commands ---


def cmd_train_bank(cfg: RunConfig):
    levels = cfg.levels or db.BANK_PROFILES.get(cfg.profile)
    if levels is None:
        raise ValueError(f"Unknown bank profile {cfg.profile!r}; choose from {sorted(db.BANK_PROFILES)}")
    out_dir = cfg.out or cfg.bank
    train_cfg = db.OfflineTrainConfig(patch_size=cfg.patch_size, steps=cfg.steps, batch=cfg.batch, workers=cfg.workers)
    corpus = db.load_corpus(cfg.corpus)
    bank = db.train_bank(levels, cfg.corpus, train_cfg, seed=cfg.seed, out_dir=out_dir)
    gains = db.heldout_gains(bank, corpus, train_cfg, seed=cfg.seed)
    gains.to_csv(Path(out_dir) / "heldout_gains.csv", index=False)
    write_run_config(replace(cfg, out=Path(out_dir)), out_dir)
    write_run_manifest(out_dir, {"command": "train-bank", "seed": cfg.seed, "bank_hash": db.bank_hash(out_dir)})
    print(gains.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    print("Wrote denoiser bank to:", out_dir)
    return EXIT_OK


def _file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_superresolve(input_png, cfg: RunConfig, ground_truth=None, adapt_source=None):
    out_dir = cfg.out
    out_dir.mkdir(parents=True, exist_ok=True)
    op = DegradationOperator(parse_kernel_spec(cfg.kernel, cfg.scale), cfg.scale)
    y = load_png(input_png)
    bank = db.load_bank(cfg.bank)
    idbp_cfg = cfg.idbp_config()
    if idbp_cfg.adapt is not None:
        idbp_cfg = replace(idbp_cfg, adapt=cfg.adapt_config(workers=cfg.workers))
    db.check_coverage(bank, [cfg.sigma_e + d for d in idbp_cfg.schedule(cfg.scale).values()])
    gt = load_png(ground_truth) if ground_truth is not None else None
    source = load_png(adapt_source) if adapt_source is not None else None

    if y.colorspace == "RGB":
        output, result = superresolve_color(y, op, bank, idbp_cfg, gt, source)
    else:
        result = idbp_superresolve(y, op, bank, idbp_cfg, gt, source)
        output = result.output

    stem = Path(input_png).stem
    out_png = save_png(output, out_dir / f"{stem}_x{cfg.scale}.png")
    write_trace_csv(result, out_dir / "trace.csv")
    write_run_config(cfg, out_dir)
    manifest = {
        "command": "superresolve",
        "input": Path(input_png).name,
        "input_sha256": _file_sha256(input_png),
        "seed": cfg.seed,
        "bank_hash": db.bank_hash(cfg.bank),
        "adapted_levels": "[" + ",".join(f"{v:g}" for v in result.adapted_levels) + "]",
        "cg_failures": result.cg_failures,
    }
    if gt is not None:
        manifest["psnr_y"] = f"{psnr(output, gt, 'Y', cfg.scale).value:.4f}"
    write_run_manifest(out_dir, manifest)
    print("Wrote", out_png.name, "and trace.csv to:", out_dir)
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig):
    out_dir = cfg.out
    protocols = benchmark.resolve_protocols(cfg.protocols, cfg.sigma_e)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    report = benchmark.run_benchmark(
        cfg.dataset,
        protocols,
        cfg.bank,
        replace(cfg.idbp_config(), adapt=None),
        cfg.adapt_config(),
        methods=cfg.methods,
        workers=cfg.workers,
        image_dir=image_dir,
    )
    benchmark.write_report(report, out_dir)
    write_run_config(cfg, out_dir)
    write_run_manifest(out_dir, {"command": "benchmark", "seed": cfg.seed, "bank_hash": db.bank_hash(cfg.bank)})
    print(benchmark.format_table(report), end="")
    print("Wrote benchmark report to:", out_dir)
    return EXIT_OK


def cmd_selftest(cfg: RunConfig = None, **hooks):
    results = selftest.run_selftest(seed=0 if cfg is None else cfg.seed, **hooks)
    for result in results:
        print(result)
    passed = selftest.all_passed(results)
    print("selftest:", "all checks passed" if passed else "FAILED")
    return EXIT_OK if passed else EXIT_FAILURE


# --- Argument surface ---


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value run configuration file")
    common.add_argument("--bank", type=Path, help="denoiser bank directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--workers", type=int)
    common.add_argument("--log-level", dest="log_level")

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--scale", type=int)
    solver.add_argument("--kernel", help="bicubic | gaussian[:size,sigma] | identity | file:path")
    solver.add_argument("--sigma-e", dest="sigma_e", type=float, help="observation noise, 0-255 scale")
    solver.add_argument("--ia", action=argparse.BooleanOptionalAction, default=None, help="image-adaptive fine-tuning")
    solver.add_argument("--iters", type=int)
    solver.add_argument("--delta-floor", dest="delta_floor", type=float)
    solver.add_argument("--ia-levels", dest="ia_levels", type=int)
    solver.add_argument("--ia-steps", dest="ia_steps", type=int)
    solver.add_argument("--cg-tol", dest="cg_tol", type=float)
    solver.add_argument("--cg-max-iters", dest="cg_max_iters", type=int)

    parser = argparse.ArgumentParser(prog="cli_bench", description="IDBP super-resolution with a CNN denoiser bank")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train-bank", parents=[common], help="train the offline denoiser bank")
    train.add_argument("--corpus", type=Path)
    train.add_argument("--profile", choices=sorted(db.BANK_PROFILES))
    train.add_argument("--levels", type=Csv(cast=float, post_process=tuple), help="comma-separated levels")
    train.add_argument("--steps", type=int)
    train.add_argument("--patch-size", dest="patch_size", type=int)
    train.add_argument("--batch", type=int)

    sr = sub.add_parser("superresolve", parents=[common, solver], help="super-resolve one image")
    sr.add_argument("input", type=Path)
    sr.add_argument("--ground-truth", dest="ground_truth", type=Path)
    sr.add_argument("--adapt-source", dest="adapt_source", type=Path, help="image to fine-tune on instead of the input")
    sr.add_argument("--persist-adapted", dest="persist_adapted", action=argparse.BooleanOptionalAction, default=None)

    bench = sub.add_parser("benchmark", parents=[common, solver], help="run the benchmark protocols")
    bench.add_argument("dataset", nargs="?", type=Path)
    bench.add_argument("--protocols", type=Csv(post_process=tuple))
    bench.add_argument("--methods", type=Csv(post_process=tuple))

    sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    return parser


def _default_out(command):
    return Path(config("OUTPUT_DIR")) / command.replace("-", "_")


def _stray_arguments(extra):
    """Leftover arguments that are not ALL-CAPS settings overrides or their values."""
    stray, i = [], 0
    while i < len(extra):
        arg = extra[i]
        name = arg[2:].split("=")[0] if arg.startswith("--") else ""
        if name.isupper():
            if "=" not in arg and i + 1 < len(extra) and not extra[i + 1].startswith("--"):
                i += 1
        else:
            stray.append(arg)
        i += 1
    return stray


def main(argv=None, **selftest_hooks):
    parser = build_parser()
    # ALL-CAPS settings overrides (--DATA_DIR=...) are consumed by settings.py
    args, extra = parser.parse_known_args(argv)
    stray = _stray_arguments(extra)
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")

    try:
        overrides = {k: v for k, v in vars(args).items() if k in CASTS}
        cfg = resolve_run_config(args.config, overrides)
        if cfg.out is None and args.command != "train-bank":
            cfg = replace(cfg, out=_default_out(args.command))
        log_dir = cfg.out or cfg.bank
        log_dir.mkdir(parents=True, exist_ok=True)
        configure_logging(cfg.log_level, log_dir / "run.log")
        logger.info("%s: %s", args.command, cfg)

        if args.command == "train-bank":
            return cmd_train_bank(cfg)
        if args.command == "superresolve":
            return cmd_superresolve(args.input, cfg, args.ground_truth, args.adapt_source)
        if args.command == "benchmark":
            return cmd_benchmark(cfg)
        return cmd_selftest(cfg, **selftest_hooks)
    except (ValueError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
