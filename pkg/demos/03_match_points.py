"""Match subject pixels across two generations by comparing attention outputs.

The frame variant of a planted scene moves the subject rectangle; each of
its foreground pixels carries the texture of exactly one identity pixel.
Cosine similarity over attention outputs, summed across the matching
layers, recovers that correspondence without any training.
"""

import numpy as np

from bachkit import default_config, make_workbench
from bachkit.matching import exact_fraction, match_foreground, match_mse, similarity
from bachkit.pipeline import capture_trace
from bachkit.scene import FRAME, IDENTITY

cfg = default_config("desk8")
wb = make_workbench(cfg, scene_seed=1)
mc = wb.model.config

tr_id = capture_trace(wb, IDENTITY, seed=cfg.seed, attn_out=True)
tr_fr = capture_trace(wb, FRAME, seed=cfg.seed + 1, attn_out=True, action_seed=1)

sim = similarity(
    tr_fr.layer_slices(cfg.tau_match, cfg.match_layers, "attn_out"),
    tr_id.layer_slices(cfg.tau_match, cfg.match_layers, "attn_out"),
)
found = match_foreground(sim, wb.scene.mask(FRAME), mc.frames, mc.height, mc.width)

true = wb.scene.correspondence()
print(f"matched {len(found.rows)} foreground pixels at step {cfg.tau_match}")
print(f"exact fraction: {exact_fraction(found, true):.4f}")
print(f"coordinate mse: {match_mse(found, true):.6f}")

print("\nframe pixel -> identity pixel (first eight)")
for f, sh, sw, dt, dh, dw in found.rows[:8]:
    w_t, w_h, w_w = np.unravel_index(true[f, sh, sw], (mc.frames, mc.height, mc.width))
    flag = "" if (dt, dh, dw) == (w_t, w_h, w_w) else "  <- off"
    print(f"  ({f},{sh:2d},{sw:2d}) -> ({dt},{dh:2d},{dw:2d})   planted ({w_t},{w_h:2d},{w_w:2d}){flag}")
