"""Figures for benchmark summaries (a side output; the CSV stays authoritative)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# strip the creator/date chunks so repeated runs give identical bytes
PNG_METADATA = {"Software": None}
_STYLE = {"CLS": dict(color="tab:blue", marker="o"), "CPD": dict(color="tab:orange", marker="s")}


def _panel(ax, rows, axis: str, title: str):
    methods = sorted({r.method for r in rows})
    for m in methods:
        pts = sorted((getattr(r, axis), r.mean, r.sd) for r in rows if r.method == m)
        if not pts:
            continue
        x, y, s = zip(*pts)
        ax.errorbar(x, y, yerr=s, capsize=3, label=m, **_STYLE.get(m, {}))
    ax.set_title(title)
    ax.set_xlabel("translation factor" if axis == "translation" else "noise factor")
    ax.set_ylabel("mean squared error")
    ax.grid(alpha=0.3)
    if methods:
        ax.legend()


def plot_summary(summary, out_dir, dpi: int = 100) -> list[Path]:
    """Error versus perturbation level, one figure per visibility setting.

    Left panel: additive noise sweep. Right panel: misalignment sweep
    (x is the translation factor; each level has its own rotation angle).
    """
    out = Path(out_dir)
    written = []
    for vis in sorted({r.visibility for r in summary}):
        rows = [r for r in summary if r.visibility == vis]
        noise_rows = [r for r in rows if r.translation == 0 and r.angle == 0]
        mis_rows = [r for r in rows if r.noise == 0 and (r.translation > 0 or r.angle > 0)]
        # level zero belongs to both sweeps
        mis_rows += [r for r in noise_rows if r.noise == 0]
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
        _panel(axes[0], noise_rows, "noise", f"{vis} view: noise")
        _panel(axes[1], mis_rows, "translation", f"{vis} view: misalignment")
        fig.tight_layout()
        path = out / f"error_{vis}.png"
        fig.savefig(path, dpi=dpi, metadata=PNG_METADATA)
        plt.close(fig)
        written.append(path)
    return written
