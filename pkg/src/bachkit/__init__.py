"""Desk-scale consistent video generation with attention readouts.

A miniature joint-sequence diffusion transformer whose denoising loop is
instrumented end to end: video-to-text attention yields foreground masks,
attention outputs yield cross-generation point matches, layer skipping
ranks layer importance, and cached key/value rows from an identity run are
re-positioned and injected into later runs under a region-restricted
attention mask. Planted synthetic scenes supply exact ground truth for all
of it.
"""

__version__ = "0.1.0"

from .config import RunConfig, default_config, read_ini, write_ini
from .dit import (
    ModelConfig,
    PROFILES,
    PromptLayout,
    StepSchedule,
    decode_video,
    denoise,
    embed_prompt,
    init_model,
)
from .inject import KvCache, cache_nbytes, injected_attention
from .masks import mask_from_slices, mask_iou
from .matching import MatchMap, exact_fraction, match_foreground, match_mse, similarity
from .pipeline import (
    GroupReport,
    Workbench,
    make_workbench,
    psnr_bg,
    run_frame,
    run_group,
    run_identity,
    write_group_outputs,
)
from .scene import FRAME, IDENTITY, Scene, make_scene
from .select import (
    AnalysisGrid,
    select_mask_layers,
    select_match_layers,
    select_tau_mask,
    select_tau_match,
    select_vital_layers,
)
from .tensorops import NEG, joint_attention, rope_encode, softmax_rows
from .trace import AttentionTrace, CaptureFlags, TraceRecorder
from .vital import (
    FrameEmbedder,
    LayerReport,
    aesthetic_score,
    embed_similarity_score,
    generate_skipped,
    sweep_layers,
    sweep_layers_embed,
)

__all__ = [
    "AnalysisGrid",
    "AttentionTrace",
    "CaptureFlags",
    "FRAME",
    "FrameEmbedder",
    "GroupReport",
    "IDENTITY",
    "KvCache",
    "LayerReport",
    "MatchMap",
    "ModelConfig",
    "NEG",
    "PROFILES",
    "PromptLayout",
    "RunConfig",
    "Scene",
    "StepSchedule",
    "TraceRecorder",
    "Workbench",
    "aesthetic_score",
    "cache_nbytes",
    "decode_video",
    "default_config",
    "denoise",
    "embed_prompt",
    "embed_similarity_score",
    "exact_fraction",
    "generate_skipped",
    "init_model",
    "injected_attention",
    "joint_attention",
    "make_scene",
    "make_workbench",
    "mask_from_slices",
    "mask_iou",
    "match_foreground",
    "match_mse",
    "psnr_bg",
    "read_ini",
    "rope_encode",
    "run_frame",
    "run_group",
    "run_identity",
    "select_mask_layers",
    "select_match_layers",
    "select_tau_mask",
    "select_tau_match",
    "select_vital_layers",
    "similarity",
    "softmax_rows",
    "sweep_layers",
    "sweep_layers_embed",
    "write_group_outputs",
    "write_ini",
]
