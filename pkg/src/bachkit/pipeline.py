"""Run-group drivers and analysis grids over planted scenes.

A consistency group is one identity run plus k frame runs sharing the
identity's scene and background/foreground prompt segments; each frame
varies only the action segment and receives the identity's cached key/value
rows by injection. Planted scenes make every intermediate checkable: masks
against the planted rectangle, matches against the planted correspondence,
and background fidelity via peak signal-to-noise ratio against the decoded
identity. Decoded videos live in (0, 1), so the PSNR peak is 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dit import (
    ChainedHooks,
    Model,
    PromptLayout,
    StepSchedule,
    decode_video,
    denoise,
    embed_prompt,
    init_model,
    patch_shape,
)
from .inject import CacheBudgetError, CacheRecorder, Injector, KvCache, cache_nbytes
from .masks import mask_from_slices, mask_iou, write_mask_csv, write_mask_pgms
from .matching import MatchMap, exact_fraction, match_foreground, match_mse, similarity
from .pgm import video_sheet, write_pgm
from .scene import FRAME, IDENTITY, Scene, make_scene
from .select import AnalysisGrid
from .trace import AttentionTrace, CaptureFlags, TraceRecorder

DEFAULT_LAYOUT = PromptLayout(bg=5, fg=5, action=4, pad=2)
SCENE_SIGMA_DEFAULT = 0.05


@dataclass(frozen=True)
class Workbench:
    """One model plus the planted scene and prompt layout it generates from."""

    model: Model
    scene: Scene
    layout: PromptLayout
    schedule: StepSchedule

    def prompt(self, action_seed: int = 0) -> np.ndarray:
        return embed_prompt(self.layout, self.scene, seed=action_seed)


def make_workbench(
    run_cfg: RunConfig,
    *,
    scene_seed: int = 1,
    rect_h: int = 3,
    rect_w: int = 3,
    layout: PromptLayout = DEFAULT_LAYOUT,
) -> Workbench:
    cfg = run_cfg.model_config()
    return Workbench(
        model=init_model(cfg),
        scene=make_scene(
            cfg.frames, cfg.height, cfg.width, cfg.channels,
            rect_h=rect_h, rect_w=rect_w, seed=scene_seed,
        ),
        layout=layout,
        schedule=StepSchedule.linear(cfg.steps),
    )


@dataclass(frozen=True)
class IdentityBundle:
    """An identity run's outputs: final latent, readout trace, K/V cache."""

    z0: np.ndarray
    trace: AttentionTrace
    cache: KvCache


def run_identity(
    bench: Workbench,
    run_cfg: RunConfig,
    *,
    seed: int,
    scene_sigma: float = SCENE_SIGMA_DEFAULT,
    scene_noise_seed: int | None = None,
) -> IdentityBundle:
    """Generate the identity while tracing readouts and caching K/V rows.

    The cache budget is checked against the full admission plan before the
    run starts, so an undersized budget fails fast instead of mid-generation.
    """
    cfg = bench.model.config
    inject_steps = range(run_cfg.tau_inject, cfg.steps)
    need = cache_nbytes(len(inject_steps), len(run_cfg.kv_layers), cfg.joint_len, cfg.channels)
    if run_cfg.kv_budget_bytes is not None and need > run_cfg.kv_budget_bytes:
        raise CacheBudgetError(
            f"cache plan needs {need} bytes "
            f"({len(inject_steps)} steps x {len(run_cfg.kv_layers)} layers), "
            f"budget is {run_cfg.kv_budget_bytes}"
        )
    cache = KvCache(cfg.joint_len, cfg.channels, budget_bytes=run_cfg.kv_budget_bytes)
    recorder = TraceRecorder(CaptureFlags(
        v2t=True,
        attn_out=True,
        steps=frozenset({run_cfg.tau_mask, run_cfg.tau_match}),
        layers=frozenset(run_cfg.mask_layers) | frozenset(run_cfg.match_layers),
    ))
    cacher = CacheRecorder(cache, steps=inject_steps, layers=run_cfg.kv_layers)
    noise_seed = seed if scene_noise_seed is None else scene_noise_seed
    z0 = denoise(
        bench.model, bench.prompt(0), bench.schedule, seed,
        hooks=ChainedHooks(recorder, cacher),
        init_clean=bench.scene.noisy_latent(IDENTITY, scene_sigma, noise_seed),
    )
    return IdentityBundle(z0=z0, trace=recorder.trace, cache=cache)


def make_injector(bench: Workbench, run_cfg: RunConfig, identity: IdentityBundle) -> Injector:
    cfg = bench.model.config
    return Injector(
        layout=bench.layout,
        frames=cfg.frames,
        height=cfg.height,
        width=cfg.width,
        positions=bench.model.positions,
        identity_cache=identity.cache,
        identity_trace=identity.trace,
        tau_mask=run_cfg.tau_mask,
        tau_match=run_cfg.tau_match,
        tau_inject=run_cfg.tau_inject,
        mask_layers=run_cfg.mask_layers,
        match_layers=run_cfg.match_layers,
        kv_layers=run_cfg.kv_layers,
        global_match=run_cfg.global_match,
        recompute_mask=run_cfg.recompute_mask,
    )


def run_frame(
    bench: Workbench,
    run_cfg: RunConfig,
    identity: IdentityBundle,
    *,
    seed: int,
    action_seed: int = 1,
    scene_sigma: float = SCENE_SIGMA_DEFAULT,
    scene_noise_seed: int | None = None,
    inject: bool = True,
) -> tuple[np.ndarray, Injector | None]:
    """One frame generation against a finished identity run.

    With `inject` the identity's cached rows are fused in from the readout
    step onward; without it the run is vanilla. Both paths share the same
    noise so the injection is the only difference.
    """
    injector = make_injector(bench, run_cfg, identity) if inject else None
    noise_seed = seed if scene_noise_seed is None else scene_noise_seed
    z0 = denoise(
        bench.model, bench.prompt(action_seed), bench.schedule, seed,
        hooks=injector,
        init_clean=bench.scene.noisy_latent(FRAME, scene_sigma, noise_seed),
    )
    return z0, injector


def psnr_bg(video_a: np.ndarray, video_b: np.ndarray, bg_region: np.ndarray) -> float:
    """Peak signal-to-noise ratio over the background of two (0, 1) videos."""
    if video_a.shape != video_b.shape or bg_region.shape != video_a.shape:
        raise ValueError("videos and background region must share one shape")
    if not bg_region.any():
        raise ValueError("empty background region")
    d = video_a[bg_region].astype(np.float64) - video_b[bg_region].astype(np.float64)
    mse = float(np.mean(d * d))
    return np.inf if mse == 0.0 else 10.0 * np.log10(1.0 / mse)


def upsample_mask(mask: np.ndarray, channels: int) -> np.ndarray:
    """Expand a latent-pixel mask to decoded-video resolution."""
    ph, pw = patch_shape(channels)
    return np.stack([np.kron(m, np.ones((ph, pw), dtype=bool)) for m in mask])


@dataclass(frozen=True)
class FrameResult:
    """One frame generation inside a group, with its diagnostics."""

    index: int
    z_injected: np.ndarray
    mask_frame: np.ndarray
    match: MatchMap
    psnr_bg_injected: float
    z_vanilla: np.ndarray | None = None
    psnr_bg_vanilla: float | None = None

    @property
    def psnr_bg_gain(self) -> float:
        if self.psnr_bg_vanilla is None:
            raise ValueError("frame was run without its vanilla counterpart")
        return self.psnr_bg_injected - self.psnr_bg_vanilla


@dataclass(frozen=True)
class GroupReport:
    """One identity run plus its injected frame runs."""

    identity: IdentityBundle
    mask_identity: np.ndarray
    frames: tuple[FrameResult, ...]

    def mean_gain(self) -> float:
        return float(np.mean([f.psnr_bg_gain for f in self.frames]))


def run_group(
    bench: Workbench,
    run_cfg: RunConfig,
    *,
    seed_identity: int,
    frame_seeds,
    scene_sigma: float = SCENE_SIGMA_DEFAULT,
    ablate: bool = False,
    identity: IdentityBundle | None = None,
) -> GroupReport:
    """Drive one identity and one injected run per frame seed.

    Frame f uses action segment f+1, so frames differ in prompt action while
    sharing the identity's scene signatures. With `ablate` each frame is also
    generated vanilla from the same noise for a side-by-side background
    score. Background fidelity is measured on the computed joint-background
    region against the decoded identity.
    """
    if identity is None:
        identity = run_identity(bench, run_cfg, seed=seed_identity, scene_sigma=scene_sigma)
    vid_identity = decode_video(identity.z0)
    channels = bench.model.config.channels
    results = []
    mask_identity = None
    for i, seed in enumerate(frame_seeds):
        z_inj, injector = run_frame(
            bench, run_cfg, identity,
            seed=seed, action_seed=i + 1, scene_sigma=scene_sigma,
        )
        if injector is None or injector.mask_frame is None or injector.match is None:
            raise RuntimeError("injection never engaged: no mask or match was derived")
        mask_identity = injector.mask_identity
        region = upsample_mask(~(injector.mask_identity | injector.mask_frame), channels)
        kw = {}
        if ablate:
            z_van, _ = run_frame(
                bench, run_cfg, identity,
                seed=seed, action_seed=i + 1, scene_sigma=scene_sigma, inject=False,
            )
            kw = dict(
                z_vanilla=z_van,
                psnr_bg_vanilla=psnr_bg(decode_video(z_van), vid_identity, region),
            )
        results.append(FrameResult(
            index=i,
            z_injected=z_inj,
            mask_frame=injector.mask_frame,
            match=injector.match,
            psnr_bg_injected=psnr_bg(decode_video(z_inj), vid_identity, region),
            **kw,
        ))
    return GroupReport(identity=identity, mask_identity=mask_identity, frames=tuple(results))


def write_group_outputs(report: GroupReport, outdir) -> list[Path]:
    """Emit a group's artifacts: trace container, images, tables, summary.

    Everything written here is a pure function of the run, so two identical
    runs produce byte-identical files.
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    def emit(name, writer):
        p = out / name
        writer(p)
        paths.append(p)

    def emit_mask(base, mask):
        paths.extend(write_mask_pgms(mask, out / base))
        emit(f"{base}.csv", lambda p, m=mask: write_mask_csv(m, p))

    emit("identity_trace.bvtr", report.identity.trace.save)
    emit("identity_video.pgm", lambda p: write_pgm(p, video_sheet(decode_video(report.identity.z0))))
    emit_mask("identity_mask", report.mask_identity)
    lines = ["group report", "decoded range (0, 1); psnr peak 1.0", ""]
    for f in report.frames:
        emit(f"frame{f.index}_video.pgm",
             lambda p, f=f: write_pgm(p, video_sheet(decode_video(f.z_injected))))
        emit_mask(f"frame{f.index}_mask", f.mask_frame)
        emit(f"frame{f.index}_match.csv", f.match.write_csv)
        line = f"frame {f.index}: psnr_bg injected {f.psnr_bg_injected:.6f}"
        if f.z_vanilla is not None:
            emit(f"frame{f.index}_vanilla.pgm",
                 lambda p, f=f: write_pgm(p, video_sheet(decode_video(f.z_vanilla))))
            line += f", vanilla {f.psnr_bg_vanilla:.6f}, gain {f.psnr_bg_gain:+.6f}"
        lines.append(line)
    emit("report.txt", lambda p: p.write_text("\n".join(lines) + "\n"))
    return paths


def capture_trace(
    bench: Workbench,
    variant: str,
    *,
    seed: int,
    scene_sigma: float = SCENE_SIGMA_DEFAULT,
    scene_noise_seed: int | None = None,
    attn_out: bool = False,
    action_seed: int = 0,
) -> AttentionTrace:
    """Full-run capture of video-to-text slices (and optionally outputs)."""
    recorder = TraceRecorder(CaptureFlags(v2t=True, attn_out=attn_out))
    noise_seed = seed if scene_noise_seed is None else scene_noise_seed
    denoise(
        bench.model, bench.prompt(action_seed), bench.schedule, seed,
        hooks=recorder,
        init_clean=bench.scene.noisy_latent(variant, scene_sigma, noise_seed),
    )
    return recorder.trace


def mask_grid(
    trace: AttentionTrace,
    layout: PromptLayout,
    frames: int,
    height: int,
    width: int,
    reference: np.ndarray,
) -> AnalysisGrid:
    """Per-(step, layer) intersection-over-union of single-layer masks."""
    steps, layers = trace.steps(), trace.layers()
    values = np.empty((len(steps), len(layers)))
    for i, s in enumerate(steps):
        for j, l in enumerate(layers):
            m = mask_from_slices([trace.get(s, l, "v2t")], layout, frames, height, width)
            values[i, j] = mask_iou(m, reference)
    return AnalysisGrid(steps=tuple(steps), layers=tuple(layers), values=values)


def match_grid(
    trace_frame: AttentionTrace,
    trace_identity: AttentionTrace,
    frames: int,
    height: int,
    width: int,
    fg_mask: np.ndarray,
    true_lookup: np.ndarray,
    global_match: bool = False,
) -> AnalysisGrid:
    """Per-(step, layer) matching error of single-layer matching.

    Cell value is the normalized coordinate mean squared error against the
    planted correspondence, so lower is better and exact matching scores 0.
    """
    steps, layers = trace_frame.steps(), trace_frame.layers()
    values = np.empty((len(steps), len(layers)))
    for i, s in enumerate(steps):
        for j, l in enumerate(layers):
            sim = similarity(
                [trace_frame.get(s, l, "attn_out")],
                [trace_identity.get(s, l, "attn_out")],
            )
            found = match_foreground(sim, fg_mask, frames, height, width, global_match=global_match)
            values[i, j] = match_mse(found, true_lookup)
    return AnalysisGrid(steps=tuple(steps), layers=tuple(layers), values=values)
