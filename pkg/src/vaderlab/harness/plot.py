"""Reward-curve plots: a plaintext renderer plus an optional PNG."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

from vaderlab.errors import CSVFormatError
from vaderlab.harness.sink import COLUMNS

_INT = ("seed", "resolution", "step", "reward_queries")
_FLOAT = ("wallclock_s", "mean_reward", "std_reward")
MARKERS = "*o+x#@%&"


def parse_csv(path: str | Path) -> list[dict]:
    """Typed rows; any malformed row raises :class:`CSVFormatError` with its line number."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(header) != COLUMNS:
            raise CSVFormatError(f"header {header} does not match {list(COLUMNS)}", 1)
        for cells in reader:
            line = reader.line_num
            if len(cells) != len(COLUMNS):
                raise CSVFormatError(f"expected {len(COLUMNS)} cells, got {len(cells)}", line)
            row = dict(zip(COLUMNS, cells))
            try:
                for k in _INT:
                    row[k] = int(row[k])
                for k in _FLOAT:
                    row[k] = float(row[k])
            except ValueError as e:
                raise CSVFormatError(str(e), line) from None
            rows.append(row)
    return rows


def series_of(rows: list[dict], x: str, y: str) -> dict[str, list[tuple[float, float]]]:
    """Points grouped by ``algo[@res]/seed``, sorted by x. Keys are sorted."""
    out: dict[str, list] = defaultdict(list)
    for r in rows:
        label = r["algo"] + (f"@{r['resolution']}" if r["resolution"] else "")
        out[f"{label}/s{r['seed']}"].append((float(r[x]), float(r[y])))
    return {k: sorted(out[k]) for k in sorted(out)}


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def render_text(series: dict[str, list[tuple[float, float]]], x: str, y: str,
                width: int = 64, height: int = 16, title: str = "") -> str:
    lines = [title or f"{y} vs {x}"]
    points = [p for pts in series.values() for p in pts]
    if not points:
        lines += ["(no data)", ""]
        return "\n".join(lines)
    xs, ys = [p[0] for p in points], [p[1] for p in points]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    xs_span = (x1 - x0) or 1.0
    ys_span = (y1 - y0) or 1.0
    grid = [[" "] * width for _ in range(height)]

    def cell(px, py):
        c = int(round((px - x0) / xs_span * (width - 1)))
        r = height - 1 - int(round((py - y0) / ys_span * (height - 1)))
        return r, c

    algos = sorted({k.split("/")[0] for k in series})
    marker = {a: MARKERS[i % len(MARKERS)] for i, a in enumerate(algos)}
    for key, pts in series.items():
        m = marker[key.split("/")[0]]
        for (ax, ay), (bx, by) in zip(pts, pts[1:]):
            (ra, ca), (rb, cb) = cell(ax, ay), cell(bx, by)
            n = max(abs(rb - ra), abs(cb - ca))
            for i in range(1, n):
                rr = ra + round((rb - ra) * i / n)
                cc = ca + round((cb - ca) * i / n)
                if grid[rr][cc] == " ":
                    grid[rr][cc] = "."
        for px, py in pts:
            r, c = cell(px, py)
            grid[r][c] = m
    label_w = max(len(_fmt(y0)), len(_fmt(y1)))
    for i, row in enumerate(grid):
        tag = _fmt(y1) if i == 0 else _fmt(y0) if i == height - 1 else ""
        lines.append(f"{tag:>{label_w}} |" + "".join(row))
    lines.append(" " * label_w + " +" + "-" * width)
    lo, hi = _fmt(x0), _fmt(x1)
    lines.append(" " * (label_w + 2) + lo + " " * max(1, width - len(lo) - len(hi)) + hi)
    lines.append(" " * (label_w + 2) + x)
    lines.append("legend: " + "  ".join(f"{marker[a]} {a}" for a in algos))
    lines.append("")
    return "\n".join(lines)


def emit_plot(csv_path: str | Path, out_path: str | Path | None = None, *,
              x: str = "reward_queries", y: str = "mean_reward", png: bool = False,
              title: str = "") -> Path:
    """Render ``csv_path`` to a plaintext plot (and optionally a PNG beside it)."""
    csv_path = Path(csv_path)
    out = Path(out_path) if out_path else csv_path.with_name(f"{csv_path.stem}_{x}.txt")
    series = series_of(parse_csv(csv_path), x, y)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_text(series, x, y, title=title), encoding="utf-8")
    if png:
        _png(series, x, y, out.with_suffix(".png"), title)
    return out


def _png(series, x, y, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for key, pts in series.items():
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=2, label=key)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_title(title or f"{y} vs {x}")
    if series:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
