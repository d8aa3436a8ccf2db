"""Hyperparameter selection from analysis grids.

The harness sweeps a per-(step, layer) score table for each capability,
ranks layers by their step-averaged score, and picks the readout step from
the per-step curve averaged over a layer set. Mask grids hold
intersection-over-union (higher is better): the chosen step is the first
one exceeding 95% of the curve's maximum. Match grids hold matching error
(lower is better): the chosen step is the first one within 105% of the
curve's minimum.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

QUALITY = "quality"
COST = "cost"


@dataclass(frozen=True)
class AnalysisGrid:
    """A (steps x layers) score table with explicit axis labels."""

    steps: tuple[int, ...]
    layers: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.steps), len(self.layers)):
            raise ValueError(
                f"grid shape {v.shape} does not match {len(self.steps)} steps "
                f"x {len(self.layers)} layers"
            )
        if not np.isfinite(v).all():
            raise ValueError("grid holds non-finite entries")
        object.__setattr__(self, "values", v)

    def value(self, step: int, layer: int) -> float:
        return float(self.values[self.steps.index(step), self.layers.index(layer)])

    def step_curve(self, layers=None) -> np.ndarray:
        """Per-step mean over a layer subset (default: all layers)."""
        if layers is None:
            return self.values.mean(axis=1)
        cols = [self.layers.index(int(l)) for l in layers]
        if not cols:
            raise ValueError("empty layer subset")
        return self.values[:, cols].mean(axis=1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "layer", "value"])
            for i, step in enumerate(self.steps):
                for j, layer in enumerate(self.layers):
                    writer.writerow([step, layer, repr(float(self.values[i, j]))])

    @classmethod
    def read_csv(cls, path) -> "AnalysisGrid":
        cells = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["step", "layer", "value"]:
                raise ValueError(f"unexpected grid header {header}")
            for row in reader:
                cells[(int(row[0]), int(row[1]))] = float(row[2])
        steps = tuple(sorted({k[0] for k in cells}))
        layers = tuple(sorted({k[1] for k in cells}))
        values = np.full((len(steps), len(layers)), np.nan)
        for (s, l), v in cells.items():
            values[steps.index(s), layers.index(l)] = v
        if np.isnan(values).any():
            raise ValueError("grid csv is not a complete step x layer table")
        return cls(steps=steps, layers=layers, values=values)


def select_tau_mask(curve) -> int:
    """First step exceeding 95% of the curve's maximum.

    The curve is per-step quality (intersection-over-union) averaged over a
    layer set. Degenerate curves whose maximum is not positive fall back to
    the earliest maximum.
    """
    c = np.asarray(curve, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("need a nonempty per-step curve")
    hits = np.flatnonzero(c > 0.95 * c.max())
    return int(hits[0]) if hits.size else int(np.argmax(c))


def select_tau_match(curve) -> int:
    """First step within 105% of the curve's minimum.

    The curve is per-step matching error averaged over a layer set. Negative
    curves (which the rule's threshold would exclude entirely) fall back to
    the earliest minimum.
    """
    c = np.asarray(curve, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("need a nonempty per-step curve")
    hits = np.flatnonzero(c <= 1.05 * c.min())
    return int(hits[0]) if hits.size else int(np.argmin(c))


def select_layers(grid: AnalysisGrid, k: int, kind: str = QUALITY) -> tuple[int, ...]:
    """Top-k layers by step-averaged score; ties go to the lower layer index.

    Quality grids rank descending, cost grids ascending.
    """
    if not 1 <= k <= len(grid.layers):
        raise ValueError(f"k={k} out of range for {len(grid.layers)} layers")
    means = grid.values.mean(axis=0)
    if kind == QUALITY:
        order = np.lexsort((np.arange(len(means)), -means))
    elif kind == COST:
        order = np.lexsort((np.arange(len(means)), means))
    else:
        raise ValueError(f"unknown grid kind {kind!r}")
    return tuple(sorted(int(grid.layers[i]) for i in order[:k]))


def select_mask_layers(grid: AnalysisGrid, k: int) -> tuple[int, ...]:
    return select_layers(grid, k, QUALITY)


def select_match_layers(grid: AnalysisGrid, k: int) -> tuple[int, ...]:
    return select_layers(grid, k, COST)


def select_vital(drops: dict[int, float], k: int) -> tuple[int, ...]:
    """Layers whose removal hurts most: top-k by score drop, descending."""
    if not 1 <= k <= len(drops):
        raise ValueError(f"k={k} out of range for {len(drops)} scored layers")
    ranked = sorted(drops.items(), key=lambda kv: (-kv[1], kv[0]))
    return tuple(sorted(layer for layer, _ in ranked[:k]))


def select_vital_layers(report, k: int) -> tuple[int, ...]:
    """Top-k layers by skip-score drop, from a report or a plain mapping."""
    drops = report.drops() if hasattr(report, "drops") else dict(report)
    return select_vital(drops, k)
