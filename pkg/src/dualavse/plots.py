"""Bar charts of report rows: one PNG per metric, bars grouped by SNR."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ReportRow  # noqa: E402

METRICS = {"si_sdr_db": "SI-SDR (dB)", "stoi": "STOI"}


def _series_label(r: ReportRow) -> str:
    return r.variant_id if r.corruption_mode == "none" else f"{r.variant_id} [{r.corruption_mode}]"


def plot_report(rows: list[ReportRow], out_dir, prefix: str = "") -> list[Path]:
    out_dir = Path(out_dir)
    snrs = sorted({r.snr_db for r in rows})
    series: list[str] = []
    for r in rows:
        name = _series_label(r)
        if name not in series:
            series.append(name)
    table = {(_series_label(r), r.snr_db): r for r in rows}
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(snrs))
    paths = []
    for key, label in METRICS.items():
        fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(snrs) + 0.3 * len(series)), 4))
        for i, name in enumerate(series):
            vals = [getattr(table[(name, s)], key) if (name, s) in table else np.nan for s in snrs]
            ax.bar(x + (i - (len(series) - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x, [f"{s:g} dB" for s in snrs])
        ax.set_xlabel("input SNR")
        ax.set_ylabel(label)
        ax.axhline(0, color="k", lw=0.5)
        ax.legend(fontsize=7, ncol=2)
        fig.tight_layout()
        path = out_dir / f"{prefix}{key}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
