"""Miniature joint-sequence diffusion transformer with trace hooks.

The denoiser runs full self-attention over the concatenated video+text token
sequence, exposes per-layer attention internals to observation hooks, accepts
key/value substitution from injection hooks, and supports skipping a single
block. Weights are generated from a counter-based PRNG keyed by
(seed, layer, role), so a config identifies a model bit-exactly.

Content convention
------------------
The channel axis is split by `channel_plan` into rotary-frequency bands:

* texture channels (high-frequency rotary pairs): carry per-pixel content as
  rotations of a fixed basis vector, so spatial offsets are distinguishable;
* signature channels (low-frequency pairs): carry segment-level content that
  survives rotary encoding nearly unchanged, so video-to-text attention can
  compare it against prompt rows;
* spare channels: denoised toward zero.

The denoising head predicts the clean latent by snapping each video token
onto the prompt rows (signature bands) and onto the rotation bank of the
texture basis (texture bands), then converts that to a noise estimate for an
explicit Euler update.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensorops import (
    DTYPE,
    GridPosition,
    cosine_normalize_rows,
    grid_positions,
    joint_attention,
    rope_encode,
    rope_group_slices,
    softmax_rows,
)

# Denoising / content-scale defaults. Texture runs hotter than signatures so
# attention outputs stay pixel-specific; sigma_max keeps the per-pixel flip
# probability of the prompt snap negligible over a full run.
SIGMA_MAX_DEFAULT = 0.5
SIGNATURE_AMP_DEFAULT = 3.0
TEXTURE_AMP_DEFAULT = 6.0

# Denoising-head snap temperatures.
BETA_TEXT = 0.5
BETA_TEXTURE = 8.0

# Weight-generation scales. Output projections are scaled near-inverses of
# the value projection, so attention genuinely averages token content into
# the residual stream instead of scattering it across channels.
QK_LOG_SPREAD = 0.35
RESIDUAL_GAIN = 0.08
OUT_PROJ_NOISE = 0.3

# Decoded-video squash gain (latent -> enforced (0, 1) range).
DECODE_GAIN = 0.25

# PRNG role tags; a weight stream is keyed by (seed, layer, role).
_ROLE_QK_GAIN = 1
_ROLE_VALUE = 2
_ROLE_OUT = 3
_ROLE_MLP1 = 4
_ROLE_MLP2 = 5
_ROLE_NOISE = 6
_ROLE_EMBED = 7

# Fixed streams shared by every model (decode map, texture dictionaries).
_DECODE_SEED = 0x0DEC
_TEXTURE_BASIS_SEED = 0x7E87


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))[None, :]
    return q.astype(DTYPE)


@dataclass(frozen=True)
class ModelConfig:
    """Shape and determinism parameters of one model instance."""

    depth: int
    channels: int
    heads: int
    frames: int
    height: int
    width: int
    text_len: int
    steps: int
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.channels % self.heads != 0:
            raise ValueError("channels must divide evenly into heads")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        rope_group_slices(self.channels)  # validates per-axis splitting

    @property
    def thw(self) -> int:
        return self.frames * self.height * self.width

    @property
    def joint_len(self) -> int:
        return self.thw + self.text_len

    def fingerprint(self) -> str:
        payload = ",".join(
            str(v)
            for v in (
                self.depth,
                self.channels,
                self.heads,
                self.frames,
                self.height,
                self.width,
                self.text_len,
                self.steps,
                self.seed,
            )
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


#: Shipped profiles: `paper42` mirrors the reference 42-layer stack for
#: selector fixtures and cache arithmetic; `desk8` is the fast test profile.
PROFILES = {
    "paper42": ModelConfig(
        depth=42, channels=48, heads=3, frames=4, height=8, width=8, text_len=16, steps=50
    ),
    "desk8": ModelConfig(
        depth=8, channels=48, heads=3, frames=4, height=8, width=8, text_len=16, steps=50
    ),
}


@dataclass(frozen=True)
class PromptLayout:
    """Token counts of the [background],[character],[action] prompt segments."""

    bg: int
    fg: int
    action: int = 0
    pad: int = 0

    def __post_init__(self):
        if self.bg < 1 or self.fg < 1:
            raise ValueError("bg and fg segments need at least one token each")
        if self.action < 0 or self.pad < 0:
            raise ValueError("segment lengths must be nonnegative")

    @property
    def total(self) -> int:
        return self.bg + self.fg + self.action + self.pad

    @property
    def bg_slice(self) -> slice:
        return slice(0, self.bg)

    @property
    def fg_slice(self) -> slice:
        return slice(self.bg, self.bg + self.fg)


@dataclass(frozen=True)
class StepSchedule:
    """Sigma ladder for the explicit Euler denoiser; sigmas[-1] is exactly 0."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=DTYPE)
        if s.ndim != 1 or len(s) < 2:
            raise ValueError("schedule needs at least one step")
        if s[-1] != 0.0:
            raise ValueError("schedule must end at sigma 0")
        if not np.all(np.diff(s) < 0):
            raise ValueError("sigmas must be strictly decreasing")
        object.__setattr__(self, "sigmas", s)

    @property
    def step_count(self) -> int:
        return len(self.sigmas) - 1

    @classmethod
    def linear(cls, steps: int, sigma_max: float = SIGMA_MAX_DEFAULT) -> "StepSchedule":
        return cls(np.linspace(sigma_max, 0.0, steps + 1, dtype=DTYPE))


@dataclass(frozen=True)
class ChannelPlan:
    """Index sets of the texture / signature / spare channel bands."""

    texture: np.ndarray
    signature: np.ndarray
    spare: np.ndarray


def channel_plan(channels: int) -> ChannelPlan:
    """Partition each axis group's rotary pairs into texture (first, highest
    frequency), one spare pair when room allows, and signature (lowest
    frequency, least rotated by position)."""
    tex, sig, spare = [], [], []
    for sl in rope_group_slices(channels):
        pairs = (sl.stop - sl.start) // 2
        n_tex = max(1, pairs // 2)
        n_spare = 1 if pairs >= 6 else 0
        n_sig = pairs - n_tex - n_spare
        if n_sig < 1:
            raise ValueError(f"too few rotary pairs per axis ({pairs}) for a channel plan")
        for p in range(pairs):
            chans = [sl.start + 2 * p, sl.start + 2 * p + 1]
            if p < n_tex:
                tex.extend(chans)
            elif p < n_tex + n_spare:
                spare.extend(chans)
            else:
                sig.extend(chans)
    return ChannelPlan(
        texture=np.array(tex, dtype=np.int64),
        signature=np.array(sig, dtype=np.int64),
        spare=np.array(spare, dtype=np.int64),
    )


def texture_dictionary(frames: int, height: int, width: int, channels: int) -> np.ndarray:
    """Fixed per-cell unit subject-texture vectors, (T*H*W, C), supported on
    the texture channels. Entries are generated in orthonormal blocks, so
    nearby cells are exactly orthogonal and attention rows concentrate on
    content-matched tokens. Shared by scenes and models."""
    plan = channel_plan(channels)
    d = len(plan.texture)
    rng = _rng(_TEXTURE_BASIS_SEED, channels, 0)
    n = frames * height * width
    rows = []
    while len(rows) * d < n + d:
        rows.append(_orthogonal(d, rng))
    block = np.concatenate(rows, axis=0)[:n]
    out = np.zeros((n, channels), dtype=DTYPE)
    out[:, plan.texture] = block.astype(DTYPE)
    return out


def detail_direction(channels: int) -> np.ndarray:
    """Fixed unit vector carrying background shading, (C,). Backgrounds ride
    on one shared direction so attention-averaged content preserves it."""
    plan = channel_plan(channels)
    rng = _rng(_TEXTURE_BASIS_SEED, channels, 1)
    vec = np.zeros(channels, dtype=DTYPE)
    vec[plan.texture] = rng.standard_normal(len(plan.texture)).astype(DTYPE)
    return (vec / np.linalg.norm(vec)).astype(DTYPE)


def texture_bank(frames: int, height: int, width: int, channels: int) -> np.ndarray:
    """Snap targets of the denoising head: the subject texture dictionary plus
    the background detail direction as the final row, (T*H*W + 1, C)."""
    return np.concatenate(
        [
            texture_dictionary(frames, height, width, channels),
            detail_direction(channels)[None, :],
        ],
        axis=0,
    )


@dataclass(frozen=True)
class LayerWeights:
    qk_gain: np.ndarray  # (C,) tied diagonal query/key projection
    w_value: np.ndarray  # (C, C) orthogonal value projection
    w_out: np.ndarray  # (C, C) small-gain output projection
    w_mlp1: np.ndarray  # (C, 2C)
    w_mlp2: np.ndarray  # (2C, C) small-gain


@dataclass(frozen=True)
class InjectionPlan:
    """Fused key/value rows plus the additive region mask, as returned by an
    injection hook. Key/value rows beyond the joint sequence are the injected
    block; `add_mask` has one row per query and one column per fused key."""

    k: np.ndarray
    v: np.ndarray
    add_mask: np.ndarray


class Hooks:
    """Observation / injection callbacks for `forward` and `denoise`.

    `observe` sees per-layer attention internals (views; copy to retain).
    `inject` may return an InjectionPlan to substitute fused key/value rows
    before attention; returning None leaves the layer untouched. `step_end`
    fires after each Euler update. The base class is a no-op, and pure
    observation must never change generated values.
    """

    def observe(self, step: int, layer: int, *, v2t, attn_out, pre_k, pre_v) -> None:
        pass

    def inject(self, step: int, layer: int, pre_k, pre_v, roped_k) -> InjectionPlan | None:
        return None

    def step_end(self, step: int) -> None:
        pass


class ChainedHooks(Hooks):
    """Fan-out to several hooks; at most one may inject per (step, layer)."""

    def __init__(self, *hooks: Hooks):
        self.hooks = [h for h in hooks if h is not None]

    def observe(self, step, layer, **kw):
        for h in self.hooks:
            h.observe(step, layer, **kw)

    def inject(self, step, layer, pre_k, pre_v, roped_k):
        plan = None
        for h in self.hooks:
            p = h.inject(step, layer, pre_k, pre_v, roped_k)
            if p is not None:
                if plan is not None:
                    raise ValueError(f"two hooks injected at step {step} layer {layer}")
                plan = p
        return plan

    def step_end(self, step):
        for h in self.hooks:
            h.step_end(step)


@dataclass(frozen=True)
class Model:
    """Immutable model instance; safe to share across concurrent denoise calls."""

    config: ModelConfig
    layers: tuple[LayerWeights, ...]
    positions: np.ndarray = field(repr=False)  # (THW, 3)
    texture_bank: np.ndarray = field(repr=False)  # (THW, C)

    def weights_checksum(self) -> str:
        h = hashlib.sha256()
        for lw in self.layers:
            for a in (lw.qk_gain, lw.w_value, lw.w_out, lw.w_mlp1, lw.w_mlp2):
                h.update(a.tobytes())
        return h.hexdigest()

    def without_layer(self, layer: int) -> "Model":
        """A depth-(d-1) model keeping the remaining blocks' weights."""
        keep = tuple(lw for i, lw in enumerate(self.layers) if i != layer)
        cfg = ModelConfig(
            depth=self.config.depth - 1,
            channels=self.config.channels,
            heads=self.config.heads,
            frames=self.config.frames,
            height=self.config.height,
            width=self.config.width,
            text_len=self.config.text_len,
            steps=self.config.steps,
            seed=self.config.seed,
        )
        return Model(cfg, keep, self.positions, self.texture_bank)


def init_model(config: ModelConfig) -> Model:
    """Generate all projection weights from (seed, layer, role) PRNG streams."""
    c = config.channels
    layers = []
    for layer in range(config.depth):
        gain = np.exp(
            QK_LOG_SPREAD * _rng(config.seed, layer, _ROLE_QK_GAIN).standard_normal(c)
        ).astype(DTYPE)
        w_value = _orthogonal(c, _rng(config.seed, layer, _ROLE_VALUE))
        w_out = (
            (RESIDUAL_GAIN / np.sqrt(config.depth))
            * (
                w_value.T
                + OUT_PROJ_NOISE
                * _rng(config.seed, layer, _ROLE_OUT).standard_normal((c, c))
                / np.sqrt(c)
            )
        ).astype(DTYPE)
        w_mlp1 = (
            _rng(config.seed, layer, _ROLE_MLP1).standard_normal((c, 2 * c)) / np.sqrt(c)
        ).astype(DTYPE)
        w_mlp2 = (
            _rng(config.seed, layer, _ROLE_MLP2).standard_normal((2 * c, c))
            * (RESIDUAL_GAIN / np.sqrt(config.depth))
            / np.sqrt(2 * c)
        ).astype(DTYPE)
        layers.append(LayerWeights(gain, w_value, w_out, w_mlp1, w_mlp2))
    return Model(
        config=config,
        layers=tuple(layers),
        positions=grid_positions(config.frames, config.height, config.width),
        texture_bank=texture_bank(config.frames, config.height, config.width, config.channels),
    )


def predict_clean(model: Model, hidden_video: np.ndarray, z_text: np.ndarray) -> np.ndarray:
    """Snap hidden video rows onto prompt content and the texture-rotation bank.

    Signature bands come from a softmax mixture of prompt rows; texture bands
    from the nonnegative projection onto the softmax-blended rotation of the
    texture basis. All other channels are pulled to zero.
    """
    logits_text = BETA_TEXT * (hidden_video @ z_text.T)
    x_text = softmax_rows(logits_text) @ z_text

    bank = model.texture_bank
    logits_tex = BETA_TEXTURE * (hidden_video @ bank.T)
    blend = softmax_rows(logits_tex) @ bank
    direction = cosine_normalize_rows(blend)
    coeff = np.maximum(np.sum(hidden_video * direction, axis=1), 0.0).astype(DTYPE)
    return (x_text + coeff[:, None] * direction).astype(DTYPE)


def _head_slices(config: ModelConfig) -> list[slice]:
    hd = config.channels // config.heads
    return [slice(h * hd, (h + 1) * hd) for h in range(config.heads)]


def forward(
    model: Model,
    z_video: np.ndarray,
    z_text: np.ndarray,
    t: int,
    hooks: Hooks | None = None,
    skip: int | None = None,
    sigma: float = 1.0,
) -> np.ndarray:
    """One denoiser evaluation over the joint sequence.

    Runs `depth` residual blocks (block `skip` replaced by identity), lets
    hooks observe per-layer (head-averaged video-to-text weights, attention
    output, pre-rotary K/V) and substitute fused key/value rows, then converts
    the clean-latent snap into a noise prediction at noise level `sigma`.

    Returns:
        Noise prediction shaped like `z_video`.
    """
    cfg = model.config
    if z_video.shape != (cfg.frames, cfg.height, cfg.width, cfg.channels):
        raise ValueError(f"z_video shape {z_video.shape} does not match config")
    if z_text.shape != (cfg.text_len, cfg.channels):
        raise ValueError(f"z_text shape {z_text.shape} does not match config")
    if skip is not None and not (0 <= skip < cfg.depth):
        raise ValueError(f"skip layer {skip} out of range")

    thw = cfg.thw
    z_flat = z_video.reshape(thw, cfg.channels).astype(DTYPE)
    x = np.concatenate([z_flat, z_text.astype(DTYPE)], axis=0)
    heads = _head_slices(cfg)

    for layer in range(cfg.depth):
        if layer == skip:
            continue
        lw = model.layers[layer]
        pre_k = x * lw.qk_gain[None, :]  # tied query/key projection
        pre_v = x @ lw.w_value
        roped_k = pre_k.copy()
        roped_k[:thw] = rope_encode(pre_k[:thw], model.positions)

        plan = hooks.inject(t, layer, pre_k, pre_v, roped_k) if hooks is not None else None
        if plan is None:
            k_eff, v_eff, mask = roped_k, pre_v, None
        else:
            if plan.k.shape[0] != plan.v.shape[0] or plan.add_mask.shape != (
                x.shape[0],
                plan.k.shape[0],
            ):
                raise ValueError(
                    "hook contract violation: substituted K/V row count inconsistent "
                    "with supplied additive mask"
                )
            k_eff, v_eff, mask = plan.k, plan.v, plan.add_mask

        attn = np.empty_like(x)
        v2t_sum = None
        for hs in heads:
            w_h, o_h = joint_attention(roped_k[:, hs], k_eff[:, hs], v_eff[:, hs], mask)
            attn[:, hs] = o_h
            if hooks is not None:
                sl = w_h[:thw, thw : thw + cfg.text_len]
                v2t_sum = sl.copy() if v2t_sum is None else v2t_sum + sl
        if hooks is not None:
            hooks.observe(
                t,
                layer,
                v2t=(v2t_sum / DTYPE(cfg.heads)).astype(DTYPE),
                attn_out=attn[:thw],
                pre_k=pre_k,
                pre_v=pre_v,
            )

        x = x + attn @ lw.w_out
        x = x + np.tanh(x @ lw.w_mlp1) @ lw.w_mlp2

    x0_hat = predict_clean(model, x[:thw], z_text)
    eps = (z_flat - x0_hat) / DTYPE(sigma)
    return eps.reshape(z_video.shape)


def initial_latent(
    config: ModelConfig,
    schedule: StepSchedule,
    seed: int,
    init_clean: np.ndarray | None = None,
) -> np.ndarray:
    """Starting state z_T: seeded Gaussian noise at sigma[0], optionally riding
    on a clean latent (the planted-scene harness convention)."""
    rng = _rng(seed, 0, _ROLE_NOISE)
    shape = (config.frames, config.height, config.width, config.channels)
    noise = rng.standard_normal(shape).astype(DTYPE) * schedule.sigmas[0]
    if init_clean is None:
        return noise
    if init_clean.shape != shape:
        raise ValueError(f"init_clean shape {init_clean.shape} does not match config")
    return (init_clean.astype(DTYPE) + noise).astype(DTYPE)


def denoise(
    model: Model,
    prompt_embedding: np.ndarray,
    schedule: StepSchedule,
    seed: int,
    hooks: Hooks | None = None,
    skip: int | None = None,
    init_clean: np.ndarray | None = None,
) -> np.ndarray:
    """Explicit Euler denoising loop; step 0 is the noisiest step.

    Deterministic in (model, prompt, schedule, seed, hooks, skip, init_clean).

    Returns:
        Clean latent z_0 of shape (frames, height, width, channels).
    """
    z = initial_latent(model.config, schedule, seed, init_clean)
    sig = schedule.sigmas
    for s in range(schedule.step_count):
        eps = forward(model, z, prompt_embedding, s, hooks=hooks, skip=skip, sigma=float(sig[s]))
        z = (z + (sig[s + 1] - sig[s]) * eps).astype(DTYPE)
        if hooks is not None:
            hooks.step_end(s)
    return z


def embed_prompt(
    layout: PromptLayout,
    scene=None,
    *,
    channels: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Deterministic synthetic prompt embedding, (layout.total, C).

    With a scene, the bg/fg segments carry the scene's planted signature
    vectors and the action segment the scene's per-seed action vector; padding
    rows are zero. Without a scene, each segment carries a seeded unit vector
    on the signature channels.
    """
    if scene is not None:
        channels = scene.channels
        amp = DTYPE(scene.signature_amp)
        bg = amp * scene.bg_signature
        fg = amp * scene.fg_signature
        act = amp * scene.action_vector(seed)
    else:
        if channels is None:
            raise ValueError("channels required without a scene")
        plan = channel_plan(channels)
        amp = DTYPE(SIGNATURE_AMP_DEFAULT)

        def seg_vector(tag: int) -> np.ndarray:
            rng = _rng(seed, tag, _ROLE_EMBED)
            v = np.zeros(channels, dtype=DTYPE)
            v[plan.signature] = rng.standard_normal(len(plan.signature)).astype(DTYPE)
            return amp * v / np.linalg.norm(v)

        bg, fg, act = seg_vector(0), seg_vector(1), seg_vector(2)

    rows = np.zeros((layout.total, channels), dtype=DTYPE)
    rows[layout.bg_slice] = bg
    rows[layout.fg_slice] = fg
    rows[layout.bg + layout.fg : layout.bg + layout.fg + layout.action] = act
    return rows


def patch_shape(channels: int) -> tuple[int, int]:
    """Decoded patch height/width per latent pixel; ph*pw == channels."""
    ph = int(np.sqrt(channels))
    while channels % ph != 0:
        ph -= 1
    return ph, channels // ph


def decode_video(latent: np.ndarray) -> np.ndarray:
    """Fixed invertible patch expansion of a clean latent into (0, 1) frames.

    Each latent pixel's channel vector is rotated by a fixed orthogonal map,
    reshaped to a (ph, pw) patch with ph*pw == C, and squashed by tanh into
    (0, 1). Output shape (T, H*ph, W*pw).
    """
    t, h, w, c = latent.shape
    ph, pw = patch_shape(c)
    mix = _orthogonal(c, _rng(_DECODE_SEED, c))
    y = latent.reshape(-1, c) @ mix.T
    y = 0.5 + 0.5 * np.tanh(DECODE_GAIN * y)
    patches = y.reshape(t, h, w, ph, pw)
    return patches.transpose(0, 1, 3, 2, 4).reshape(t, h * ph, w * pw).astype(DTYPE)


def invert_decode(video: np.ndarray, channels: int) -> np.ndarray:
    """Inverse of `decode_video` (up to float round-off)."""
    ph, pw = patch_shape(channels)
    t, hp, wp = video.shape
    h, w = hp // ph, wp // pw
    patches = video.reshape(t, h, ph, w, pw).transpose(0, 1, 3, 2, 4)
    y = np.arctanh(np.clip((patches.reshape(-1, channels) - 0.5) * 2.0, -1 + 1e-7, 1 - 1e-7))
    mix = _orthogonal(channels, _rng(_DECODE_SEED, channels))
    z = (y / DECODE_GAIN) @ mix
    return z.reshape(t, h, w, channels).astype(DTYPE)
