"""
Plot mean Y-PSNR against the IDBP iteration number for every benchmark protocol.

Inputs:
  - OUTPUT_DIR/benchmark/benchmark_curves.csv   (produced by cli_bench.py benchmark)

Outputs:
  - OUTPUT_DIR/psnr_curves_<protocol>.png
  - docs/charts/psnr_curves_<protocol>.html
  - OUTPUT_DIR/psnr_curves_mean.parquet        (dataframe behind the charts)
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
import plotly.graph_objects as go

from benchmark import METHOD_DISPLAY
from settings import config

OUTPUT_DIR = Path(config("OUTPUT_DIR"))
DOCS_CHARTS_DIR = Path(config("BASE_DIR")) / "docs" / "charts"
BENCHMARK_OUT = OUTPUT_DIR / "benchmark"

LINE_STYLES = {"bicubic": "--", "idbp_cnn": "-", "idbp_cnn_ia": "-"}


def mean_curves(curves: pd.DataFrame) -> pd.DataFrame:
    """Per protocol / method / iteration mean PSNR over the images."""
    return (
        curves.groupby(["protocol", "method", "iter"], sort=False)["psnr"]
        .mean()
        .reset_index()
    )


def plot_named_curves(named_curves, title, out_image, out_html=None):
    """Plot PSNR-vs-iteration curves and save as PNG, and optionally as interactive HTML."""
    fig, ax = plt.subplots(figsize=(9, 5))
    for name, (df, style) in named_curves.items():
        ax.plot(df["iter"], df["psnr"], label=name, linewidth=2, linestyle=style)
    ax.set_title(title)
    ax.set_xlabel("Iteration")
    ax.set_ylabel("Mean Y-PSNR (dB)")
    ax.grid(alpha=0.25)
    ax.legend(title="Method")

    out_image = Path(out_image)
    out_image.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_image, dpi=220, bbox_inches="tight")
    plt.close(fig)

    if out_html is not None:
        fig_html = go.Figure()
        for name, (df, style) in named_curves.items():
            fig_html.add_trace(
                go.Scatter(
                    x=df["iter"],
                    y=df["psnr"],
                    mode="lines",
                    name=name,
                    line=dict(dash="dash" if style == "--" else "solid", width=2),
                )
            )
        fig_html.update_layout(
            title=title,
            xaxis_title="Iteration",
            yaxis_title="Mean Y-PSNR (dB)",
            legend_title="Method",
            template="plotly_white",
        )
        out_html = Path(out_html)
        out_html.parent.mkdir(parents=True, exist_ok=True)
        fig_html.write_html(out_html, include_plotlyjs="cdn")

    return out_image


def plot_protocols(curves: pd.DataFrame, image_dir, html_dir=None):
    """One chart per protocol; returns the written paths."""
    means = mean_curves(curves)
    generated = []
    for protocol, group in means.groupby("protocol", sort=False):
        named = {
            METHOD_DISPLAY.get(method, method): (df, LINE_STYLES.get(method, "-"))
            for method, df in group.groupby("method", sort=False)
        }
        out_png = Path(image_dir) / f"psnr_curves_{protocol}.png"
        out_html = Path(html_dir) / f"psnr_curves_{protocol}.html" if html_dir is not None else None
        plot_named_curves(named, f"PSNR vs iteration ({protocol})", out_png, out_html)
        generated.append(out_png)
        if out_html is not None:
            generated.append(out_html)
    return generated


def main(benchmark_dir=BENCHMARK_OUT):
    curves = pd.read_csv(Path(benchmark_dir) / "benchmark_curves.csv")
    generated = plot_protocols(curves, OUTPUT_DIR, DOCS_CHARTS_DIR)
    means_path = OUTPUT_DIR / "psnr_curves_mean.parquet"
    mean_curves(curves).to_parquet(means_path, index=False)

    print("Wrote PSNR curve plots to:", OUTPUT_DIR.resolve())
    print("Wrote PSNR curve HTML to:", DOCS_CHARTS_DIR.resolve())
    print("Wrote mean curves:", means_path.resolve())
    return generated


if __name__ == "__main__":
    main()
