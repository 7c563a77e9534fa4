"""Result serialization: delimited output, key = value records, figures.

Numbers are written with 12 significant digits so repeated runs diff
cleanly; the distinguished ``nokey`` marker keeps no-violation baseline rows
rectangular. Figures are rendered to files next to the delimited output,
never to a screen.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .entropy import NOKEY, RatePoint
from .optimize import ThresholdResult

CSV_COLUMNS = ("eta", "theta", "phi_a1", "phi_a2", "phi_b1", "phi_b2", "phi_b3",
               "p", "p_V", "H_min", "H_EC", "rate", "solver_status", "gap")
NOKEY_MARKER = "nokey"


def _num(value: float | None) -> str:
    if value is None:
        return "nan"
    if value == NOKEY:
        return NOKEY_MARKER
    return f"{value:.12g}"


def csv_row(point: RatePoint) -> list[str]:
    return [
        _num(point.eta), _num(point.theta),
        _num(point.angles_alice[0]), _num(point.angles_alice[1]),
        _num(point.angles_bob[0]), _num(point.angles_bob[1]),
        _num(point.angles_bob[2]),
        _num(point.p), _num(point.p_v), _num(point.h_min), _num(point.h_ec),
        _num(point.rate), point.solver_status, _num(point.solver_gap),
    ]


def write_csv(points: Sequence[RatePoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for point in points:
            writer.writerow(csv_row(point))


def csv_text(points: Sequence[RatePoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    for point in points:
        writer.writerow(csv_row(point))
    return buf.getvalue()


def rate_point_text(point: RatePoint) -> str:
    """One ``key = value`` line per RatePoint field."""
    pairs = [
        ("eta", _num(point.eta)), ("dark", _num(point.dark)),
        ("visibility", _num(point.visibility)), ("theta", _num(point.theta)),
        ("phi_a1", _num(point.angles_alice[0])),
        ("phi_a2", _num(point.angles_alice[1])),
        ("phi_b1", _num(point.angles_bob[0])),
        ("phi_b2", _num(point.angles_bob[1])),
        ("phi_b3", _num(point.angles_bob[2])),
        ("key_x", str(point.key_x)), ("key_y", str(point.key_y)),
        ("p", _num(point.p)), ("level", point.level),
        ("p_V", _num(point.p_v)), ("H_min", _num(point.h_min)),
        ("H_EC", _num(point.h_ec)), ("rate", _num(point.rate)),
        ("solver_status", point.solver_status), ("gap", _num(point.solver_gap)),
    ]
    lines = [f"{key} = {value}" for key, value in pairs]
    for warning in point.warnings:
        lines.append(f"warning = {warning}")
    return "\n".join(lines)


def threshold_text(result: ThresholdResult) -> str:
    if result.found:
        lo, hi = result.bracket
        lines = [f"threshold_eta = {result.threshold:.6g}",
                 f"bracket_low = {lo:.6g}", f"bracket_high = {hi:.6g}"]
    else:
        lines = ["threshold_eta = none", f"reason = {result.message}"]
    lines.append(f"probes = {len(result.probes)}")
    return "\n".join(lines)


def _styled_axes(xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(6.0, 4.2), dpi=160)
    ax.grid(True, which="both", alpha=0.25, linewidth=0.6)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return fig, ax


def _split_rates(points: Sequence[RatePoint]):
    xs, ys, dead = [], [], []
    for pt in points:
        if pt.rate is not None and pt.rate != NOKEY and pt.rate > 0:
            xs.append(pt.eta)
            ys.append(pt.rate)
        else:
            dead.append(pt.eta)
    return xs, ys, dead


def render_curve_figure(points: Sequence[RatePoint], path: str | Path,
                        label: str = "optimized rate") -> None:
    """Rate versus detection efficiency on a log rate axis."""
    xs, ys, dead = _split_rates(points)
    fig, ax = _styled_axes("detection efficiency", "key rate (bits/round)")
    if xs:
        ax.semilogy(xs, ys, "o-", color="#c23b22", markersize=4,
                    linewidth=1.3, label=label)
    if dead:
        ax.plot(dead, [min(ys) if ys else 1e-9] * len(dead), "x",
                color="#707070", markersize=5, label="no key")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_scan_figure(result: ThresholdResult, path: str | Path) -> None:
    """Probed rates with the located threshold marked."""
    xs, ys, dead = _split_rates(result.probes)
    fig, ax = _styled_axes("detection efficiency", "best rate found (bits/round)")
    if xs:
        ax.semilogy(xs, ys, "o", color="#c23b22", markersize=5, label="positive rate")
    if dead:
        floor = min(ys) if ys else 1e-9
        ax.plot(dead, [floor] * len(dead), "x", color="#707070",
                markersize=6, label="no key")
    if result.found:
        ax.axvline(result.threshold, color="#2b6a99", linestyle="--",
                   linewidth=1.2,
                   label=f"threshold $\\eta^*$ = {result.threshold:.4g}")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def figure_path_for(out_path: str | Path) -> Path:
    return Path(out_path).with_suffix(".png")
