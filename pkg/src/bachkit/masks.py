"""Foreground masks from video-to-text attention.

A pixel is called foreground when its mean attention weight onto the
character-segment prompt tokens is at least its mean weight onto the
background-segment tokens. Multi-layer extraction averages the head-averaged
video-to-text weight slices across the chosen layers before the comparison.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .dit import PromptLayout
from .tensorops import DTYPE


def verdict_from_v2t(v2t: np.ndarray, layout: PromptLayout) -> np.ndarray:
    """Per-pixel foreground verdicts from one (THW, L_text) weight slice.

    Ties go to foreground.
    """
    if v2t.ndim != 2 or v2t.shape[1] != layout.total:
        raise ValueError(f"v2t shape {v2t.shape} does not match prompt layout")
    bg = v2t[:, layout.bg_slice].mean(axis=1)
    fg = v2t[:, layout.fg_slice].mean(axis=1)
    return bg <= fg


def aggregate_v2t(slices: list[np.ndarray]) -> np.ndarray:
    """Average weight slices across layers (all shaped (THW, L_text))."""
    if not slices:
        raise ValueError("no weight slices to aggregate")
    acc = np.zeros_like(slices[0], dtype=np.float64)
    for s in slices:
        if s.shape != slices[0].shape:
            raise ValueError("weight slices disagree in shape")
        acc += s
    return (acc / len(slices)).astype(DTYPE)


def mask_from_slices(
    slices: list[np.ndarray],
    layout: PromptLayout,
    frames: int,
    height: int,
    width: int,
) -> np.ndarray:
    """Aggregate layer slices and reshape verdicts to (frames, height, width)."""
    verdicts = verdict_from_v2t(aggregate_v2t(slices), layout)
    return verdicts.reshape(frames, height, width)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; two empty masks score 1."""
    if a.shape != b.shape:
        raise ValueError("mask shapes differ")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def write_mask_pgms(mask: np.ndarray, base) -> list:
    """One P5 image per frame (0 background, 255 foreground): `<base>_f{t}.pgm`."""
    from .pgm import write_pgm

    base = Path(base)
    paths = []
    for t, frame in enumerate(np.asarray(mask, dtype=bool)):
        p = base.with_name(f"{base.name}_f{t}.pgm")
        write_pgm(p, frame)
        paths.append(p)
    return paths


def write_mask_csv(mask: np.ndarray, path) -> None:
    """Flat per-pixel table `frame,h,w,fg` with fg in {0, 1}."""
    m = np.asarray(mask, dtype=bool)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "h", "w", "fg"])
        for t in range(m.shape[0]):
            for i in range(m.shape[1]):
                for j in range(m.shape[2]):
                    w.writerow([t, i, j, int(m[t, i, j])])


def read_mask_csv(path, frames: int, height: int, width: int) -> np.ndarray:
    """Inverse of `write_mask_csv`; errors on an incomplete table."""
    out = np.zeros((frames, height, width), dtype=bool)
    seen = np.zeros((frames, height, width), dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame", "h", "w", "fg"]:
            raise ValueError(f"unexpected mask table header {header}")
        for rec in reader:
            t, i, j, v = (int(x) for x in rec)
            out[t, i, j] = bool(v)
            seen[t, i, j] = True
    if not seen.all():
        raise ValueError("mask csv is not a complete frame x h x w table")
    return out
