from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd

from riskmm.corridor import GuessResult, RunResult, SweepCell
from riskmm.mm_controller import ClosedLoopTrace, SolverReport

logger = logging.getLogger("riskmm.reporting")

SOLVE_COLUMNS = ["m", "loss", "optimality_error", "inner_iters", "wall_ms"]
TRACE_COLUMNS = [
    "step",
    "p_x",
    "p_y",
    "v_x",
    "v_y",
    "p_x_h",
    "p_y_h",
    "const",
    "u_x",
    "u_y",
    "sampled_mode",
    "solve_ms",
]
METRICS_COLUMNS = ["seed", "AVTE", "min_distance", "collisions"]
SWEEP_COLUMNS = [
    "formulation",
    "gamma",
    "avte_median",
    "avte_q1",
    "avte_q3",
    "min_distance_median",
    "min_distance_q1",
    "min_distance_q3",
    "runs",
    "failures",
]
GUESS_COLUMNS = ["seed", "status", "final_loss", "mm_iterations", "final_error"]
GUESS_SUMMARY_COLUMNS = [
    "runs",
    "failures",
    "final_loss_mean",
    "final_loss_std",
    "mm_iterations_mean",
    "mm_iterations_std",
]
FLOAT_FORMAT = "%.10g"


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("Wrote %s (%s rows)", path, len(frame))
    return path


def solve_frame(report: SolverReport, timing: bool = True) -> pd.DataFrame:
    rows = [
        {
            "m": it.m,
            "loss": it.loss,
            "optimality_error": it.optimality_error,
            "inner_iters": it.inner_iterations,
            "wall_ms": it.wall_ms if timing else 0.0,
        }
        for it in report.iterations
    ]
    return pd.DataFrame(rows, columns=SOLVE_COLUMNS)


def guesses_frame(results: Iterable[GuessResult]) -> pd.DataFrame:
    rows = [
        {
            "seed": r.seed,
            "status": "failed" if r.report is None else r.report.status,
            "final_loss": np.nan if r.report is None else r.report.final_loss,
            "mm_iterations": np.nan if r.report is None else r.report.mm_iterations,
            "final_error": np.nan if r.report is None else r.report.final_error,
        }
        for r in results
    ]
    return pd.DataFrame(rows, columns=GUESS_COLUMNS)


def guess_summary_frame(guesses: pd.DataFrame) -> pd.DataFrame:
    """Mean and population std over the solves that returned; failed guesses only count in ``failures``."""
    done = guesses[guesses["status"] != "failed"]
    row = {
        "runs": len(done),
        "failures": len(guesses) - len(done),
        "final_loss_mean": done["final_loss"].mean(),
        "final_loss_std": done["final_loss"].std(ddof=0),
        "mm_iterations_mean": done["mm_iterations"].astype(float).mean(),
        "mm_iterations_std": done["mm_iterations"].astype(float).std(ddof=0),
    }
    return pd.DataFrame([row], columns=GUESS_SUMMARY_COLUMNS)


def trace_frame(trace: ClosedLoopTrace, timing: bool = True) -> pd.DataFrame:
    """One row per applied step; the measured state is the one the step was solved from."""
    steps = trace.steps
    frame = pd.DataFrame(trace.states[:steps], columns=TRACE_COLUMNS[1:8])
    frame.insert(0, "step", np.arange(steps))
    frame["u_x"] = trace.inputs[:, 0]
    frame["u_y"] = trace.inputs[:, 1]
    frame["sampled_mode"] = trace.modes
    frame["solve_ms"] = trace.solve_ms if timing else np.zeros(steps)
    return frame[TRACE_COLUMNS]


def metrics_frame(results: Iterable[RunResult]) -> pd.DataFrame:
    rows = [
        {
            "seed": r.metrics.seed,
            "AVTE": r.metrics.avte,
            "min_distance": r.metrics.min_distance,
            "collisions": r.metrics.collisions,
        }
        for r in results
    ]
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def sweep_frame(cells: Sequence[SweepCell]) -> pd.DataFrame:
    """Median and quartiles of AVTE and minimal distance per (formulation, gamma)."""
    raw = pd.DataFrame(
        [
            {
                "formulation": c.formulation,
                "gamma": c.gamma,
                "avte": np.nan if c.metrics is None else c.metrics.avte,
                "min_distance": np.nan if c.metrics is None else c.metrics.min_distance,
                "failed": c.metrics is None,
            }
            for c in cells
        ]
    )
    if raw.empty:
        return pd.DataFrame(columns=SWEEP_COLUMNS)
    grouped = raw.groupby(["formulation", "gamma"], sort=False)
    summary = pd.DataFrame(
        {
            "avte_median": grouped["avte"].median(),
            "avte_q1": grouped["avte"].quantile(0.25),
            "avte_q3": grouped["avte"].quantile(0.75),
            "min_distance_median": grouped["min_distance"].median(),
            "min_distance_q1": grouped["min_distance"].quantile(0.25),
            "min_distance_q3": grouped["min_distance"].quantile(0.75),
            "runs": grouped["avte"].count(),
            "failures": grouped["failed"].sum().astype(int),
        }
    ).reset_index()
    return summary[SWEEP_COLUMNS]


class SvgCanvas:
    """Minimal SVG writer: a framed plot area with linear axes."""

    def __init__(
        self,
        x_range: Tuple[float, float],
        y_range: Tuple[float, float],
        width: int = 640,
        height: int = 480,
        margin: int = 60,
    ) -> None:
        self.width = width
        self.height = height
        self.margin = margin
        self.x_range = _padded(x_range)
        self.y_range = _padded(y_range)
        self.elements: List[str] = []

    def sx(self, x: float) -> float:
        lo, hi = self.x_range
        return self.margin + (x - lo) / (hi - lo) * (self.width - 2 * self.margin)

    def sy(self, y: float) -> float:
        lo, hi = self.y_range
        return self.height - self.margin - (y - lo) / (hi - lo) * (self.height - 2 * self.margin)

    def axes(self, x_label: str, y_label: str, title: str = "") -> None:
        m, w, h = self.margin, self.width, self.height
        self.elements.append(
            f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" stroke="black"/>'
        )
        for frac in (0.0, 0.5, 1.0):
            xv = self.x_range[0] + frac * (self.x_range[1] - self.x_range[0])
            yv = self.y_range[0] + frac * (self.y_range[1] - self.y_range[0])
            self.text(self.sx(xv), h - m + 18, f"{xv:.3g}", anchor="middle")
            self.text(m - 6, self.sy(yv) + 4, f"{yv:.3g}", anchor="end")
        self.text(w / 2, h - 15, x_label, anchor="middle")
        self.text(15, h / 2, y_label, anchor="middle", rotate=True)
        if title:
            self.text(w / 2, m / 2, title, anchor="middle")

    def line(self, x0: float, y0: float, x1: float, y1: float, color: str = "black") -> None:
        self.elements.append(
            f'<line x1="{self.sx(x0):.2f}" y1="{self.sy(y0):.2f}" x2="{self.sx(x1):.2f}" '
            f'y2="{self.sy(y1):.2f}" stroke="{color}"/>'
        )

    def point(self, x: float, y: float, color: str = "black", radius: float = 4.0) -> None:
        self.elements.append(f'<circle cx="{self.sx(x):.2f}" cy="{self.sy(y):.2f}" r="{radius}" fill="{color}"/>')

    def polyline(self, xs: Sequence[float], ys: Sequence[float], color: str = "black") -> None:
        pts = " ".join(f"{self.sx(x):.2f},{self.sy(y):.2f}" for x, y in zip(xs, ys))
        self.elements.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')

    def text(self, x: float, y: float, body: str, anchor: str = "start", rotate: bool = False) -> None:
        transform = f' transform="rotate(-90 {x:.2f} {y:.2f})"' if rotate else ""
        self.elements.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-size="12" text-anchor="{anchor}"{transform}>{escape(body)}</text>'
        )

    def render(self) -> str:
        body = "\n".join(self.elements)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n{body}\n</svg>\n'
        )

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render())
        logger.info("Wrote %s", path)
        return path


def _padded(bounds: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return 0.0, 1.0
    if hi - lo < 1e-9:
        return lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


FORMULATION_COLORS = {"optimistic": "#1f77b4", "pessimistic": "#d62728", "neutral_proxy": "#2ca02c"}


def render_sweep_svg(summary: pd.DataFrame, path: Path) -> Path:
    """Median AVTE against median minimal distance, whiskers Q1 − IQR to Q3 + IQR."""
    valid = summary.dropna(subset=["avte_median", "min_distance_median"])
    if valid.empty:
        canvas = SvgCanvas((0.0, 1.0), (0.0, 1.0))
        canvas.axes("AVTE", "minimal distance [m]", "no successful runs")
        return canvas.save(path)

    iqr_a = valid["avte_q3"] - valid["avte_q1"]
    iqr_d = valid["min_distance_q3"] - valid["min_distance_q1"]
    x_lo, x_hi = (valid["avte_q1"] - iqr_a).min(), (valid["avte_q3"] + iqr_a).max()
    y_lo, y_hi = (valid["min_distance_q1"] - iqr_d).min(), (valid["min_distance_q3"] + iqr_d).max()
    canvas = SvgCanvas((x_lo, x_hi), (y_lo, y_hi))
    canvas.axes("AVTE (median)", "minimal distance [m] (median)", "gamma sweep")
    for row, ia, idist in zip(valid.itertuples(index=False), iqr_a, iqr_d):
        color = FORMULATION_COLORS.get(row.formulation, "black")
        canvas.line(row.avte_q1 - ia, row.min_distance_median, row.avte_q3 + ia, row.min_distance_median, color)
        canvas.line(row.avte_median, row.min_distance_q1 - idist, row.avte_median, row.min_distance_q3 + idist, color)
        canvas.point(row.avte_median, row.min_distance_median, color)
        canvas.text(canvas.sx(row.avte_median) + 6, canvas.sy(row.min_distance_median) - 6, f"{row.gamma:g}")
    for i, (name, color) in enumerate(FORMULATION_COLORS.items()):
        if name in set(valid["formulation"]):
            canvas.text(canvas.width - canvas.margin - 90, canvas.margin + 16 * (i + 1), name)
            canvas.elements.append(
                f'<circle cx="{canvas.width - canvas.margin - 100}" cy="{canvas.margin + 16 * (i + 1) - 4}" r="4" fill="{color}"/>'
            )
    return canvas.save(path)


def render_trace_svg(states: np.ndarray, path: Path) -> Path:
    """Robot and human paths in the corridor plane."""
    xs = np.concatenate([states[:, 0], states[:, 4]])
    ys = np.concatenate([states[:, 1], states[:, 5]])
    canvas = SvgCanvas((xs.min(), xs.max()), (ys.min(), ys.max()))
    canvas.axes("p_x [m]", "p_y [m]", "closed-loop paths")
    canvas.polyline(states[:, 0], states[:, 1], "#1f77b4")
    canvas.polyline(states[:, 4], states[:, 5], "#d62728")
    canvas.point(states[0, 0], states[0, 1], "#1f77b4")
    canvas.point(states[0, 4], states[0, 5], "#d62728")
    return canvas.save(path)
