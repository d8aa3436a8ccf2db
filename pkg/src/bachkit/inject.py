"""Key/value caching and identity injection.

An identity run is generated once while its pre-rotary key/value rows are
cached at the injection layers. A later frame run then substitutes fused
key/value sequences: its own joint rows, plus matched identity foreground
rows re-encoded at the frame pixels' grid positions, plus identity
background rows at their original positions. An additive region mask keeps
foreground queries on frame and identity-foreground keys, background
queries on frame and identity-background keys, and text queries on frame
keys only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dit import Hooks, InjectionPlan
from .masks import mask_from_slices
from .matching import MatchMap, match_foreground, similarity
from .tensorops import DTYPE, NEG, joint_attention, rope_encode
from .trace import FIELD_NAMES, FIELD_PRE_K, FIELD_PRE_V, AttentionTrace, read_container, write_container


def entry_nbytes(joint_len: int, channels: int) -> int:
    """Bytes one cached (step, layer) pair occupies: K and V, float32."""
    return 2 * joint_len * channels * 4


def cache_nbytes(n_steps: int, n_layers: int, joint_len: int, channels: int) -> int:
    """Total bytes a full cache plan occupies."""
    return n_steps * n_layers * entry_nbytes(joint_len, channels)


class CacheBudgetError(RuntimeError):
    """Raised when admitting a key/value pair would exceed the byte budget."""


@dataclass
class KvCache:
    """Pre-rotary key/value rows keyed by (step, layer), with a byte budget.

    Admission is checked against the budget before any entry is stored, so a
    cache never transiently exceeds its limit.
    """

    joint_len: int
    channels: int
    budget_bytes: int | None = None
    entries: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def nbytes(self) -> int:
        return len(self.entries) * entry_nbytes(self.joint_len, self.channels)

    def admit(self, step: int, layer: int, pre_k: np.ndarray, pre_v: np.ndarray) -> None:
        shape = (self.joint_len, self.channels)
        if pre_k.shape != shape or pre_v.shape != shape:
            raise ValueError(
                f"cache rows must be {shape}, got K {pre_k.shape} and V {pre_v.shape}"
            )
        key = (int(step), int(layer))
        grown = self.nbytes + (0 if key in self.entries else entry_nbytes(self.joint_len, self.channels))
        if self.budget_bytes is not None and grown > self.budget_bytes:
            raise CacheBudgetError(
                f"cache budget exceeded at step {step} layer {layer}: "
                f"{grown} bytes needed, budget is {self.budget_bytes}"
            )
        self.entries[key] = (
            np.array(pre_k, dtype=DTYPE, copy=True),
            np.array(pre_v, dtype=DTYPE, copy=True),
        )

    def get(self, step: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        key = (int(step), int(layer))
        if key not in self.entries:
            raise KeyError(f"cache holds no rows for step {step} layer {layer}")
        return self.entries[key]

    def save(self, path) -> None:
        recs = []
        for (step, layer), (pk, pv) in self.entries.items():
            recs.append((step, layer, FIELD_PRE_K, pk))
            recs.append((step, layer, FIELD_PRE_V, pv))
        write_container(recs, path)

    @classmethod
    def load(cls, path, budget_bytes: int | None = None) -> "KvCache":
        recs = read_container(path)
        if not recs:
            raise ValueError("cache container is empty")
        halves: dict[tuple[int, int], dict[str, np.ndarray]] = {}
        for step, layer, tag, a in recs:
            halves.setdefault((step, layer), {})[FIELD_NAMES[tag]] = a
        first = next(iter(halves.values()))["pre_k"]
        cache = cls(joint_len=first.shape[0], channels=first.shape[1], budget_bytes=budget_bytes)
        for (step, layer), pair in sorted(halves.items()):
            if "pre_k" not in pair or "pre_v" not in pair:
                raise ValueError(f"cache entry at step {step} layer {layer} lacks its K or V half")
            cache.admit(step, layer, pair["pre_k"], pair["pre_v"])
        return cache


class CacheRecorder(Hooks):
    """Hook that admits pre-rotary K/V rows into a cache during a run."""

    def __init__(self, cache: KvCache, steps=None, layers=None):
        self.cache = cache
        self.steps = None if steps is None else frozenset(int(s) for s in steps)
        self.layers = None if layers is None else frozenset(int(l) for l in layers)

    def observe(self, step, layer, *, v2t, attn_out, pre_k, pre_v) -> None:
        if self.steps is not None and step not in self.steps:
            return
        if self.layers is not None and layer not in self.layers:
            return
        self.cache.admit(step, layer, pre_k, pre_v)


@dataclass(frozen=True)
class InjectionRegions:
    """Index sets driving one injection: frame foreground pixels, joint
    background pixels (outside both masks), and the matched identity row for
    each foreground pixel."""

    fg: np.ndarray
    bg: np.ndarray
    identity_rows: np.ndarray

    @classmethod
    def from_masks(cls, mask_frame, mask_identity, lookup) -> "InjectionRegions":
        mf = np.asarray(mask_frame, dtype=bool).ravel()
        mi = np.asarray(mask_identity, dtype=bool).ravel()
        if mf.shape != mi.shape:
            raise ValueError("frame and identity masks differ in size")
        fg = np.flatnonzero(mf)
        bg = np.flatnonzero(~(mf | mi))
        rows = np.asarray(lookup).ravel()[fg]
        if rows.size and rows.min() < 0:
            raise ValueError("a foreground pixel has no matched identity token")
        return cls(fg=fg, bg=bg, identity_rows=rows.astype(np.int64))


def region_mask(joint_len: int, thw: int, fg: np.ndarray, n_fg: int, n_bg: int) -> np.ndarray:
    """Additive attention mask over [joint | injected-fg | injected-bg] keys.

    Joint keys stay open to every query. Foreground queries reach the
    injected foreground block, every other video query reaches the injected
    background block, and text queries reach neither.
    """
    m = np.zeros((joint_len, joint_len + n_fg + n_bg), dtype=DTYPE)
    m[:, joint_len:] = NEG
    bg_queries = np.setdiff1d(np.arange(thw), fg, assume_unique=True)
    if n_fg and fg.size:
        m[np.ix_(fg, joint_len + np.arange(n_fg))] = 0.0
    if n_bg and bg_queries.size:
        m[np.ix_(bg_queries, joint_len + n_fg + np.arange(n_bg))] = 0.0
    return m


def build_plan(
    roped_k: np.ndarray,
    pre_v: np.ndarray,
    cached_k: np.ndarray,
    cached_v: np.ndarray,
    regions: InjectionRegions,
    positions: np.ndarray,
) -> InjectionPlan:
    """Fuse natural frame keys/values with re-encoded identity rows.

    Cached identity keys are pre-rotary; matched foreground rows are encoded
    at the frame pixel's grid position so they align with the queries that
    should pull them, background rows at their own (shared) positions.
    Values are position-free and enter unchanged.
    """
    thw = positions.shape[0]
    joint_len = roped_k.shape[0]
    k_fg = rope_encode(cached_k[regions.identity_rows], positions[regions.fg])
    k_bg = rope_encode(cached_k[regions.bg], positions[regions.bg])
    k = np.concatenate([roped_k, k_fg, k_bg], axis=0)
    v = np.concatenate([pre_v, cached_v[regions.identity_rows], cached_v[regions.bg]], axis=0)
    mask = region_mask(joint_len, thw, regions.fg, len(regions.fg), len(regions.bg))
    return InjectionPlan(k=k, v=v, add_mask=mask)


def injected_attention(q: np.ndarray, k_star: np.ndarray, v_star: np.ndarray,
                       add_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attention of frame queries against a fused key/value sequence.

    `k_star`/`v_star` carry the frame's own rows followed by injected blocks,
    `add_mask` the additive region restrictions from `region_mask`. Returns
    the (weights, outputs) pair; rows whose keys are all forbidden raise.
    """
    return joint_attention(q, k_star, v_star, add_mask)


class Injector(Hooks):
    """Stateful hook that plants cached identity content into a frame run.

    Built from a finished identity run (its key/value cache and attention
    trace). During the frame run it records the frame's own video-to-text
    slices and attention outputs, derives the foreground mask and the
    cross-generation match map one step before injection begins, then
    substitutes fused key/value rows at the chosen layers for every later
    step. With `recompute_mask` the mask and match are refreshed after each
    step from that step's captures.
    """

    def __init__(
        self,
        *,
        layout,
        frames: int,
        height: int,
        width: int,
        positions: np.ndarray,
        identity_cache: KvCache,
        identity_trace: AttentionTrace,
        tau_mask: int,
        tau_match: int,
        tau_inject: int,
        mask_layers,
        match_layers,
        kv_layers,
        global_match: bool = False,
        recompute_mask: bool = False,
    ):
        self.layout = layout
        self.frames, self.height, self.width = frames, height, width
        self.positions = positions
        self.identity_cache = identity_cache
        self.identity_trace = identity_trace
        self.tau_mask = int(tau_mask)
        self.tau_match = int(tau_match)
        self.tau_inject = int(tau_inject)
        if self.tau_inject <= max(self.tau_mask, self.tau_match):
            raise ValueError("injection must start after the mask and match readout steps")
        self.mask_layers = tuple(int(l) for l in mask_layers)
        self.match_layers = tuple(int(l) for l in match_layers)
        self.kv_layers = frozenset(int(l) for l in kv_layers)
        self.global_match = global_match
        self.recompute_mask = recompute_mask
        self.own = AttentionTrace()
        self.regions: InjectionRegions | None = None
        self.match: MatchMap | None = None
        self.mask_frame: np.ndarray | None = None
        self.mask_identity: np.ndarray | None = None
        self._sim: np.ndarray | None = None

    def _wants_v2t(self, step: int, layer: int) -> bool:
        if layer not in self.mask_layers:
            return False
        if step == self.tau_mask:
            return True
        return self.recompute_mask and step >= self.tau_inject - 1

    def observe(self, step, layer, *, v2t, attn_out, pre_k, pre_v) -> None:
        if self._wants_v2t(step, layer):
            self.own.put(step, layer, "v2t", v2t.copy())
        if step == self.tau_match and layer in self.match_layers:
            self.own.put(step, layer, "attn_out", attn_out.copy())

    def _similarity(self) -> np.ndarray:
        if self._sim is None:
            frame_outs = self.own.layer_slices(self.tau_match, self.match_layers, "attn_out")
            ident_outs = self.identity_trace.layer_slices(
                self.tau_match, self.match_layers, "attn_out"
            )
            self._sim = similarity(frame_outs, ident_outs)
        return self._sim

    def _rebuild(self, mask_step: int) -> None:
        frame_slices = self.own.layer_slices(mask_step, self.mask_layers, "v2t")
        self.mask_frame = mask_from_slices(
            frame_slices, self.layout, self.frames, self.height, self.width
        )
        if self.mask_identity is None:
            ident_slices = self.identity_trace.layer_slices(
                self.tau_mask, self.mask_layers, "v2t"
            )
            self.mask_identity = mask_from_slices(
                ident_slices, self.layout, self.frames, self.height, self.width
            )
        self.match = match_foreground(
            self._similarity(),
            self.mask_frame,
            self.frames,
            self.height,
            self.width,
            global_match=self.global_match,
        )
        self.regions = InjectionRegions.from_masks(
            self.mask_frame, self.mask_identity, self.match.as_lookup()
        )

    def step_end(self, step: int) -> None:
        if step == self.tau_inject - 1:
            self._rebuild(step if self.recompute_mask else self.tau_mask)
        elif self.recompute_mask and step >= self.tau_inject:
            self._rebuild(step)

    def inject(self, step, layer, pre_k, pre_v, roped_k) -> InjectionPlan | None:
        if step < self.tau_inject or layer not in self.kv_layers or self.regions is None:
            return None
        cached_k, cached_v = self.identity_cache.get(step, layer)
        return build_plan(roped_k, pre_v, cached_k, cached_v, self.regions, self.positions)
