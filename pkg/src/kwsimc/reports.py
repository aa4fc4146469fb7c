"""Tab-separated report tables and matplotlib figures.

Both are byte-deterministic: floats are printed with a fixed number of
digits and PNGs are written without a software/time stamp.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FLOAT_DIGITS = 6

STYLE = {
    "figure.figsize": (5.0, 3.0),
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.linestyle": "--",
    "grid.linewidth": 0.5,
    "lines.linewidth": 1.5,
    "path.simplify": False,
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.{FLOAT_DIGITS}f}"
    if hasattr(v, "item"):
        return _fmt(v.item())
    return str(v)


def write_tsv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    lines = ["\t".join(columns)]
    lines += ["\t".join(_fmt(r.get(c, "")) for c in columns) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_tsv(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, line.split("\t"))) for line in lines[1:]]


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def bar_chart(path, labels, values, ylabel: str, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(values)), [100 * v for v in values], color="#4C72B0")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 105)
        for i, v in enumerate(values):
            ax.text(i, 100 * v + 1, f"{100 * v:.1f}", ha="center", fontsize=7)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def line_chart(path, x, series: dict[str, list], xlabel: str, ylabel: str, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, ys in series.items():
            ax.plot(x, ys, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend(fontsize=7)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def scatter_chart(path, x, y, xlabel: str, ylabel: str, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(x, y, s=12, color="#DD8452")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
