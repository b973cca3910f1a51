"""SVG figures with byte-stable output (no timestamps, fixed element ids)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "fedus"


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def psd_overlay(freqs, p_real, p_gen, path, title="Mean PSD of DUS beats") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(freqs, 10 * np.log10(p_real + 1e-12), label="real")
    ax.plot(freqs, 10 * np.log10(p_gen + 1e-12), label="generated", linestyle="--")
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("power (dB/Hz)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def bland_altman(means, diffs, bias, lo, hi, path, title="Generated DUS FHR vs FECG label") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.scatter(means, diffs, s=6)
    for y, style in ((bias, "-"), (lo, "--"), (hi, "--")):
        ax.axhline(y, color="k", linestyle=style, linewidth=0.8)
    ax.set_xlabel("mean of estimate and label (bpm)")
    ax.set_ylabel("estimate - label (bpm)")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
