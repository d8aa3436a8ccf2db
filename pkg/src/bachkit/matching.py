"""Cross-generation point matching from attention outputs.

Attention-output rows of two runs are cosine-compared; each foreground pixel
of the frame run maps to the identity-run pixel with the highest similarity.
Multi-layer matching normalizes each layer's output rows first and sums the
per-layer similarity matrices, so no single layer's magnitude dominates. By
default candidates are restricted to the same frame index; global matching
searches the whole identity grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensorops import cosine_normalize_rows


@dataclass(frozen=True)
class MatchMap:
    """Foreground pixel correspondences, one row per source pixel.

    `rows` has columns (frame, src_h, src_w, dst_t, dst_h, dst_w), sorted by
    source pixel in row-major order.
    """

    rows: np.ndarray
    frames: int
    height: int
    width: int

    def as_lookup(self) -> np.ndarray:
        """(frames, height, width) int64 of flat destination indices, -1 where unmatched."""
        out = np.full((self.frames, self.height, self.width), -1, dtype=np.int64)
        hw = self.height * self.width
        for f, sh, sw, dt, dh, dw in self.rows:
            out[f, sh, sw] = dt * hw + dh * self.width + dw
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "src_h", "src_w", "dst_t", "dst_h", "dst_w"])
            for row in self.rows:
                w.writerow([int(v) for v in row])

    @classmethod
    def read_csv(cls, path, frames: int, height: int, width: int) -> "MatchMap":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["frame", "src_h", "src_w", "dst_t", "dst_h", "dst_w"]:
                raise ValueError(f"unexpected match table header {header}")
            rows = np.array([[int(v) for v in row] for row in reader], dtype=np.int64)
        if len(rows) == 0:
            rows = rows.reshape(0, 6)
        return cls(rows=rows, frames=frames, height=height, width=width)


def similarity(
    out_frame: list[np.ndarray],
    out_identity: list[np.ndarray],
) -> np.ndarray:
    """Summed per-layer cosine similarity between output rows, (THW, THW)."""
    if not out_frame or len(out_frame) != len(out_identity):
        raise ValueError("need the same nonempty layer list from both runs")
    n = out_frame[0].shape[0]
    acc = np.zeros((n, n), dtype=np.float64)
    for of, oi in zip(out_frame, out_identity):
        if of.shape != oi.shape or of.shape[0] != n:
            raise ValueError("attention-output shapes disagree between layers or runs")
        acc += cosine_normalize_rows(of).astype(np.float64) @ cosine_normalize_rows(
            oi
        ).astype(np.float64).T
    return acc


def match_foreground(
    sim: np.ndarray,
    fg_mask: np.ndarray,
    frames: int,
    height: int,
    width: int,
    global_match: bool = False,
) -> MatchMap:
    """Argmax-match each foreground pixel against identity-run pixels.

    `sim` is the (THW, THW) summed similarity and `fg_mask` the frame run's
    (frames, height, width) foreground mask. Ties resolve to the lowest
    destination index.
    """
    hw = height * width
    if sim.shape != (frames * hw, frames * hw):
        raise ValueError(f"similarity shape {sim.shape} does not match the grid")
    if fg_mask.shape != (frames, height, width):
        raise ValueError("mask shape does not match the grid")
    rows = []
    for t in range(frames):
        block = sim[t * hw : (t + 1) * hw]
        if not global_match:
            block = block[:, t * hw : (t + 1) * hw]
        dst = np.argmax(block, axis=1)
        for p in np.flatnonzero(fg_mask[t].reshape(-1)):
            flat = int(dst[p]) if global_match else t * hw + int(dst[p])
            dt, rem = divmod(flat, hw)
            dh, dw = divmod(rem, width)
            rows.append((t, p // width, p % width, dt, dh, dw))
    arr = np.array(rows, dtype=np.int64).reshape(len(rows), 6)
    return MatchMap(rows=arr, frames=frames, height=height, width=width)


def exact_fraction(found: MatchMap, true_lookup: np.ndarray) -> float:
    """Fraction of matched pixels agreeing with a planted correspondence.

    `true_lookup` is (frames, height, width) flat destination indices with -1
    marking pixels that have no planted counterpart; those rows are skipped.
    """
    got = 0
    total = 0
    for f, sh, sw, dt, dh, dw in found.rows:
        want = true_lookup[f, sh, sw]
        if want < 0:
            continue
        total += 1
        if want == dt * found.height * found.width + dh * found.width + dw:
            got += 1
    if total == 0:
        raise ValueError("no matched pixels overlap the planted foreground")
    return got / total


def match_mse(found: MatchMap, true_lookup: np.ndarray) -> float:
    """Mean squared in-frame coordinate error against a planted correspondence.

    Row and column errors are normalized by grid height and width, so one
    pixel off by a single column on an 8x8 grid scores (1/8)^2 = 1/64.
    Pixels without a planted counterpart (-1 in `true_lookup`) are skipped;
    a fully exact map scores 0.
    """
    hw = found.height * found.width
    err = 0.0
    total = 0
    for f, sh, sw, dt, dh, dw in found.rows:
        want = true_lookup[f, sh, sw]
        if want < 0:
            continue
        total += 1
        wh, ww = divmod(int(want) % hw, found.width)
        err += ((dh - wh) / found.height) ** 2 + ((dw - ww) / found.width) ** 2
    if total == 0:
        raise ValueError("no matched pixels overlap the planted foreground")
    return err / total
