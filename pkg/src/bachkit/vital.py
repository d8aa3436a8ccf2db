"""Layer importance via single-layer skipping.

Each transformer layer is bypassed in turn, the video is regenerated from
the same noise and decoded, and a scalar score grades the result. A layer's
importance is the score drop relative to the unskipped baseline; the most
vital layers are the top of that ranking.

Two scoring families are provided. Frame scorers grade each decoded frame
independently and are averaged over the video (`aesthetic_score`); the
embedding family projects frames to unit vectors and grades a skip run by
its mean cosine similarity to the baseline video (`embed_similarity_score`).
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .dit import Model, decode_video, denoise, patch_shape
from .select import select_vital
from .tensorops import DTYPE

_EMBED_TAG = 0xE3B  # stream tag for the fixed projection draw


def frame_digest(frame: np.ndarray) -> str:
    """Content hash of one decoded frame (row-major float32 bytes)."""
    return hashlib.sha256(np.ascontiguousarray(frame, dtype=DTYPE).tobytes()).hexdigest()


def video_digest(video: np.ndarray) -> str:
    """Content hash of a whole array, same convention as `frame_digest`."""
    return hashlib.sha256(np.ascontiguousarray(video, dtype=DTYPE).tobytes()).hexdigest()


def constant_scorer(value: float = 1.0):
    """Frame scorer that ignores its input. Bounded trivially: always `value`."""

    def score(frame: np.ndarray) -> float:
        return float(value)

    return score


def variance_scorer():
    """Frame scorer: spatial variance of the frame. Zero iff the frame is flat."""

    def score(frame: np.ndarray) -> float:
        return float(np.var(np.asarray(frame, dtype=np.float64)))

    return score


def planted_scorer(table: dict[str, float], default: float = 1.0):
    """Frame scorer keyed to planted content by digest.

    Frames whose hash appears in `table` get the tabulated value, everything
    else the default. Tabulating degraded frames at 0 with default 1 turns
    the sweep into a strict detector: only a run reproducing the tabulated
    video bit-for-bit registers a drop.
    """

    def score(frame: np.ndarray) -> float:
        return float(table.get(frame_digest(frame), default))

    return score


class FrameEmbedder:
    """Fixed random linear projection of a frame to a unit vector."""

    def __init__(self, frame_shape: tuple[int, int], dim: int = 32, seed: int = 0):
        h, w = frame_shape
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, _EMBED_TAG])))
        self.frame_shape = (int(h), int(w))
        self.proj = rng.standard_normal((int(dim), int(h) * int(w)))

    def embed(self, frame: np.ndarray) -> np.ndarray:
        f = np.asarray(frame, dtype=np.float64)
        if f.shape != self.frame_shape:
            raise ValueError(f"frame shape {f.shape} does not match {self.frame_shape}")
        v = self.proj @ f.reshape(-1)
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ValueError("frame embeds to the zero vector")
        return v / n

    __call__ = embed


def aesthetic_score(video: np.ndarray, scorer) -> float:
    """Mean frame score over a decoded (frames, height, width) video."""
    v = np.asarray(video)
    if v.ndim != 3 or v.shape[0] < 1:
        raise ValueError("need a (frames, height, width) video with at least one frame")
    return float(np.mean([scorer(frame) for frame in v]))


def embed_similarity_score(video: np.ndarray, reference: np.ndarray, embedder) -> float:
    """Mean per-frame cosine similarity between two videos' embeddings."""
    a, b = np.asarray(video), np.asarray(reference)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"frame counts differ: {a.shape[0]} vs {b.shape[0]}")
    return float(np.mean([embedder(fa) @ embedder(fb) for fa, fb in zip(a, b)]))


def generate_skipped(
    model: Model,
    prompt_embedding: np.ndarray,
    schedule,
    seed: int,
    layer: int | None = None,
    init_clean: np.ndarray | None = None,
) -> np.ndarray:
    """Denoise with one layer bypassed (or none) and decode the result."""
    skip = None if layer is None else int(layer)
    z0 = denoise(model, prompt_embedding, schedule, seed, skip=skip, init_clean=init_clean)
    return decode_video(z0)


def collect_skip_runs(
    model: Model,
    prompt_embedding: np.ndarray,
    schedule,
    seed: int,
    layers=None,
    init_clean: np.ndarray | None = None,
) -> dict[int | None, np.ndarray]:
    """Decoded baseline (key None) plus one single-skip video per layer."""
    if layers is None:
        layers = range(model.config.depth)
    runs: dict[int | None, np.ndarray] = {
        None: generate_skipped(model, prompt_embedding, schedule, seed, None, init_clean)
    }
    for layer in layers:
        runs[int(layer)] = generate_skipped(
            model, prompt_embedding, schedule, seed, int(layer), init_clean
        )
    return runs


@dataclass(frozen=True)
class LayerScore:
    layer: int
    score_skip: float
    drop: float


@dataclass(frozen=True)
class LayerReport:
    """Per-layer skip scores against one baseline, sorted by layer."""

    baseline: float
    scores: tuple[LayerScore, ...]

    def drops(self) -> dict[int, float]:
        return {s.layer: s.drop for s in self.scores}

    def vital(self, k: int) -> tuple[int, ...]:
        return select_vital(self.drops(), k)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "score_skip", "baseline", "drop"])
            for s in self.scores:
                w.writerow([s.layer, repr(s.score_skip), repr(self.baseline), repr(s.drop)])

    @classmethod
    def read_csv(cls, path) -> "LayerReport":
        rows = []
        baseline = None
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["layer", "score_skip", "baseline", "drop"]:
                raise ValueError(f"unexpected layer report header {header}")
            for rec in reader:
                layer, score_skip, b, drop = int(rec[0]), float(rec[1]), float(rec[2]), float(rec[3])
                if baseline is None:
                    baseline = b
                elif baseline != b:
                    raise ValueError("layer report rows disagree on the baseline score")
                rows.append(LayerScore(layer=layer, score_skip=score_skip, drop=drop))
        if baseline is None:
            raise ValueError("layer report holds no rows")
        return cls(baseline=baseline, scores=tuple(sorted(rows, key=lambda s: s.layer)))


def report_from_runs(runs: dict[int | None, np.ndarray], video_score) -> LayerReport:
    """Grade collected decoded videos; the None entry is the baseline."""
    if None not in runs:
        raise ValueError("runs lack a baseline entry (key None)")
    baseline = float(video_score(runs[None]))
    scores = tuple(
        LayerScore(layer=layer, score_skip=float(video_score(z)), drop=baseline - float(video_score(z)))
        for layer, z in sorted((k, v) for k, v in runs.items() if k is not None)
    )
    return LayerReport(baseline=baseline, scores=scores)


def sweep_layers(
    model: Model,
    prompt_embedding: np.ndarray,
    schedule,
    seed: int,
    scorer,
    layers=None,
    init_clean: np.ndarray | None = None,
) -> LayerReport:
    """Skip sweep graded by mean frame score (`aesthetic_score`)."""
    runs = collect_skip_runs(model, prompt_embedding, schedule, seed, layers, init_clean)
    return report_from_runs(runs, lambda z: aesthetic_score(z, scorer))


def sweep_layers_embed(
    model: Model,
    prompt_embedding: np.ndarray,
    schedule,
    seed: int,
    embedder=None,
    layers=None,
    init_clean: np.ndarray | None = None,
) -> LayerReport:
    """Skip sweep graded by embedding similarity to the unskipped baseline.

    The baseline scores 1 by construction, so a layer's drop is one minus
    the similarity its removal leaves behind.
    """
    runs = collect_skip_runs(model, prompt_embedding, schedule, seed, layers, init_clean)
    if embedder is None:
        mc = model.config
        ph, pw = patch_shape(mc.channels)
        embedder = FrameEmbedder((mc.height * ph, mc.width * pw), seed=seed)
    base = runs[None]
    return report_from_runs(runs, lambda z: embed_similarity_score(z, base, embedder))
