"""Key/value cache accounting, region masks, and fused-attention plans."""

from fractions import Fraction

import numpy as np
import pytest

from bachkit.inject import (
    CacheBudgetError,
    CacheRecorder,
    InjectionRegions,
    Injector,
    KvCache,
    build_plan,
    cache_nbytes,
    entry_nbytes,
    injected_attention,
    region_mask,
)
from bachkit.tensorops import DTYPE, NEG, grid_positions, joint_attention, rope_encode


def test_byte_formula():
    assert entry_nbytes(1000, 64) == 2 * 1000 * 64 * 4
    assert cache_nbytes(50, 15, 1000, 64) == 384_000_000
    assert cache_nbytes(0, 15, 1000, 64) == 0


def test_paper_layer_ratio_exact():
    full = cache_nbytes(50, 42, 1000, 64)
    kept = cache_nbytes(50, 15, 1000, 64)
    assert Fraction(kept, full) == Fraction(15, 42)


def test_cache_admit_get_and_counter():
    cache = KvCache(joint_len=6, channels=4)
    assert cache.nbytes == 0
    k = np.arange(24, dtype=DTYPE).reshape(6, 4)
    v = k + 100
    cache.admit(2, 1, k, v)
    assert cache.nbytes == entry_nbytes(6, 4)
    cache.admit(2, 1, k, v)  # overwrite, not double-count
    assert cache.nbytes == entry_nbytes(6, 4)
    gk, gv = cache.get(2, 1)
    np.testing.assert_array_equal(gk, k)
    np.testing.assert_array_equal(gv, v)
    k[0, 0] = -1  # cache stores copies
    assert cache.get(2, 1)[0][0, 0] == 0
    with pytest.raises(KeyError):
        cache.get(0, 0)
    with pytest.raises(ValueError):
        cache.admit(0, 0, k[:3], v)


def test_cache_counter_random_admissions():
    rng = np.random.default_rng(0)
    for _ in range(20):
        jl, c = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        cache = KvCache(joint_len=jl, channels=c)
        keys = {(int(s), int(l)) for s, l in rng.integers(0, 6, size=(rng.integers(1, 12), 2))}
        for s, l in keys:
            cache.admit(s, l, np.zeros((jl, c), dtype=DTYPE), np.zeros((jl, c), dtype=DTYPE))
        assert cache.nbytes == len(keys) * 2 * jl * c * 4
        assert cache.nbytes == cache_nbytes(1, len(keys), jl, c)


def test_budget_rejects_before_admission():
    cache = KvCache(joint_len=4, channels=2, budget_bytes=entry_nbytes(4, 2))
    z = np.zeros((4, 2), dtype=DTYPE)
    cache.admit(0, 0, z, z)  # exact fit
    with pytest.raises(CacheBudgetError, match="cache budget exceeded"):
        cache.admit(0, 1, z, z)
    assert cache.nbytes == entry_nbytes(4, 2)  # failed admit left no trace
    assert (0, 1) not in cache.entries
    cache.admit(0, 0, z + 1, z)  # overwrites never grow the footprint


def test_cache_save_load(tmp_path):
    rng = np.random.default_rng(1)
    cache = KvCache(joint_len=5, channels=4)
    for s, l in [(11, 0), (11, 2), (12, 0)]:
        cache.admit(s, l, rng.random((5, 4)).astype(DTYPE), rng.random((5, 4)).astype(DTYPE))
    p = tmp_path / "cache.bvtr"
    cache.save(p)
    back = KvCache.load(p)
    assert back.joint_len == 5 and back.channels == 4
    assert sorted(back.entries) == sorted(cache.entries)
    for key in cache.entries:
        np.testing.assert_array_equal(back.entries[key][0], cache.entries[key][0])
        np.testing.assert_array_equal(back.entries[key][1], cache.entries[key][1])


def test_regions_from_masks_planted_example():
    mask_identity = np.array([1, 0, 0, 1], dtype=bool)
    mask_frame = np.array([0, 1, 0, 1], dtype=bool)
    lookup = np.array([-1, 0, -1, 3])
    regions = InjectionRegions.from_masks(mask_frame, mask_identity, lookup)
    assert regions.fg.tolist() == [1, 3]
    assert regions.bg.tolist() == [2]
    assert regions.identity_rows.tolist() == [0, 3]


def test_regions_require_matched_foreground():
    with pytest.raises(ValueError, match="no matched identity token"):
        InjectionRegions.from_masks(
            np.array([1, 0], dtype=bool), np.array([0, 1], dtype=bool), np.array([-1, -1])
        )
    with pytest.raises(ValueError, match="differ in size"):
        InjectionRegions.from_masks(
            np.ones(3, dtype=bool), np.ones(4, dtype=bool), np.zeros(3)
        )


def test_region_mask_layout():
    # joint = 4 video + 2 text pixels; one injected fg key, two injected bg keys
    thw, joint_len = 4, 6
    fg = np.array([1])
    m = region_mask(joint_len, thw, fg, n_fg=1, n_bg=2)
    assert m.shape == (6, 9)
    np.testing.assert_array_equal(m[:, :joint_len], 0.0)  # joint keys open to all
    assert m[1, 6] == 0.0  # fg query -> injected fg block
    assert (m[1, 7:] == NEG).all()  # fg query cannot see injected bg
    for q in (0, 2, 3):  # video bg queries -> injected bg block only
        assert m[q, 6] == NEG
        assert (m[q, 7:] == 0.0).all()
    assert (m[4:, joint_len:] == NEG).all()  # text queries see no injected keys


def test_injected_attention_empty_injection_is_vanilla():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((5, 4)).astype(DTYPE)
    k = rng.standard_normal((5, 4)).astype(DTYPE)
    v = rng.standard_normal((5, 4)).astype(DTYPE)
    w0, o0 = joint_attention(q, k, v)
    w1, o1 = injected_attention(q, k, v, np.zeros((5, 5), dtype=DTYPE))
    np.testing.assert_array_equal(w1, w0)
    np.testing.assert_array_equal(o1, o0)


def test_injected_attention_restricted_oracle():
    rng = np.random.default_rng(3)
    thw, text, c = 6, 2, 4
    joint_len = thw + text
    fg = np.array([0, 4])
    n_fg, n_bg = 2, 3
    q = rng.standard_normal((joint_len, c)).astype(DTYPE)
    k_star = rng.standard_normal((joint_len + n_fg + n_bg, c)).astype(DTYPE)
    v_star = rng.standard_normal((joint_len + n_fg + n_bg, c)).astype(DTYPE)
    mask = region_mask(joint_len, thw, fg, n_fg, n_bg)
    w, o = injected_attention(q, k_star, v_star, mask)
    for i in range(joint_len):
        cols = np.flatnonzero(mask[i] != NEG)
        scores = (q[i] @ k_star[cols].T) / np.sqrt(c)
        e = np.exp(scores - scores.max())
        probs = e / e.sum()
        np.testing.assert_allclose(w[i, cols], probs, atol=1e-5)
        assert (w[i, np.flatnonzero(mask[i] == NEG)] == 0.0).all()
        np.testing.assert_allclose(o[i], probs @ v_star[cols], atol=1e-5)


def test_build_plan_reencodes_keys_at_frame_positions():
    rng = np.random.default_rng(4)
    frames, h, w, c = 2, 2, 2, 12
    thw = frames * h * w
    text = 2
    joint_len = thw + text
    positions = grid_positions(frames, h, w)
    roped_k = rng.standard_normal((joint_len, c)).astype(DTYPE)
    pre_v = rng.standard_normal((joint_len, c)).astype(DTYPE)
    cached_k = rng.standard_normal((joint_len, c)).astype(DTYPE)
    cached_v = rng.standard_normal((joint_len, c)).astype(DTYPE)
    regions = InjectionRegions(
        fg=np.array([1, 5]), bg=np.array([0, 7]), identity_rows=np.array([2, 6])
    )
    plan = build_plan(roped_k, pre_v, cached_k, cached_v, regions, positions)
    assert plan.k.shape == (joint_len + 4, c)
    np.testing.assert_array_equal(plan.k[:joint_len], roped_k)
    np.testing.assert_array_equal(plan.v[:joint_len], pre_v)
    # fg keys: cached identity rows re-encoded at the *frame* pixels' positions
    want_fg = rope_encode(cached_k[[2, 6]], positions[[1, 5]])
    np.testing.assert_allclose(plan.k[joint_len : joint_len + 2], want_fg, atol=1e-6)
    # bg keys: cached rows at their own positions
    want_bg = rope_encode(cached_k[[0, 7]], positions[[0, 7]])
    np.testing.assert_allclose(plan.k[joint_len + 2 :], want_bg, atol=1e-6)
    # values enter unchanged
    np.testing.assert_array_equal(plan.v[joint_len : joint_len + 2], cached_v[[2, 6]])
    np.testing.assert_array_equal(plan.v[joint_len + 2 :], cached_v[[0, 7]])
    assert plan.add_mask.shape == (joint_len, joint_len + 4)


def test_cache_recorder_filters():
    cache = KvCache(joint_len=3, channels=2)
    rec = CacheRecorder(cache, steps=[1, 2], layers=[0])
    z = np.zeros((3, 2), dtype=DTYPE)
    kw = dict(v2t=None, attn_out=None, pre_k=z, pre_v=z)
    rec.observe(0, 0, **kw)
    rec.observe(1, 0, **kw)
    rec.observe(1, 1, **kw)
    rec.observe(2, 0, **kw)
    assert sorted(cache.entries) == [(1, 0), (2, 0)]


def test_injector_rejects_bad_schedule(identity, bench, desk_cfg):
    kw = dict(
        layout=bench.layout,
        frames=4, height=8, width=8,
        positions=bench.model.positions,
        identity_cache=identity.cache,
        identity_trace=identity.trace,
        mask_layers=desk_cfg.mask_layers,
        match_layers=desk_cfg.match_layers,
        kv_layers=desk_cfg.kv_layers,
    )
    with pytest.raises(ValueError):
        Injector(tau_mask=10, tau_match=10, tau_inject=10, **kw)
    Injector(tau_mask=10, tau_match=10, tau_inject=11, **kw)  # boundary is fine
