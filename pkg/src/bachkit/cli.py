"""Command line interface.

Commands drive planted-scene runs end to end: generate an identity with its
trace and key/value cache, generate frames with injection, sweep analysis
grids, apply the selection rules, and inspect stored artifacts. Global flags
choose the profile or config file; command flags point at inputs/outputs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, default_config, format_layer_set, parse_layer_set, read_ini
from .dit import decode_video, denoise
from .inject import KvCache
from .matching import MatchMap
from .masks import write_mask_csv, write_mask_pgms
from .pgm import video_sheet, write_pgm
from .pipeline import (
    IdentityBundle,
    capture_trace,
    make_workbench,
    mask_grid,
    match_grid,
    run_frame,
    run_group,
    run_identity,
    write_group_outputs,
)
from .scene import FRAME, IDENTITY
from .select import (
    AnalysisGrid,
    COST,
    QUALITY,
    select_layers,
    select_tau_mask,
    select_tau_match,
    select_vital,
)
from .trace import FIELD_NAMES, AttentionTrace, read_container
from .vital import LayerReport, constant_scorer, sweep_layers, sweep_layers_embed, variance_scorer


def _add_global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    """Shared flags, attachable before or after the subcommand."""

    def arg(*names, **kw):
        if suppress:
            kw["default"] = argparse.SUPPRESS
        p.add_argument(*names, **kw)

    arg("--config", help="INI run configuration (exclusive with --profile)")
    arg("--profile", choices=["desk8", "paper42"], help="built-in defaults")
    arg("--seed", type=int, help="base run seed")
    arg("--kv-budget-bytes", type=int, help="key/value cache byte budget")
    arg("--global-match", action="store_const", const=True,
        help="match across the whole grid, not per frame")
    arg("--recompute-mask-per-step", action="store_const", const=True,
        help="refresh mask and match after every step during injection")
    arg("--ablate", action="store_const", const=True,
        help="also run frames without injection for comparison")
    arg("--scene-seed", type=int, **({} if suppress else {"default": 1}),
        help="planted scene seed")
    arg("--scene-sigma", type=float, **({} if suppress else {"default": 0.05}),
        help="scene noise level")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bachkit",
        description="desk-scale consistent video generation with attention readouts",
    )
    _add_global_flags(p, suppress=False)

    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-identity", help="generate the identity run; save trace, cache, video")
    _add_global_flags(sp, suppress=True)
    sp.add_argument("--out", default="bachkit-out", help="output directory")

    sp = sub.add_parser("gen-frame", help="generate one frame run against saved identity artifacts")
    _add_global_flags(sp, suppress=True)
    sp.add_argument("--identity-dir", required=True, help="directory written by gen-identity")
    sp.add_argument("--out", default="bachkit-out", help="output directory")
    sp.add_argument("--action-seed", type=int, default=1, help="action segment seed")
    sp.add_argument("--no-inject", action="store_true", help="run vanilla instead of injecting")

    sp = sub.add_parser("run-group", help="identity plus injected frames, full artifact set")
    _add_global_flags(sp, suppress=True)
    sp.add_argument("--out", default="bachkit-out", help="output directory")
    sp.add_argument("--frames", type=int, default=1, help="frame runs in the group")

    sp = sub.add_parser("analyze", help="sweep a per-(step, layer) analysis table")
    _add_global_flags(sp, suppress=True)
    sp.add_argument("what", choices=["mask", "match", "vital"])
    sp.add_argument("--out", default="bachkit-out", help="output directory")
    sp.add_argument("--scorer", choices=["embed", "variance", "constant"], default="embed",
                    help="grading family for the layer-skip sweep")

    sp = sub.add_parser("select", help="apply a selection rule to a stored table")
    _add_global_flags(sp, suppress=True)
    sp.add_argument("what", choices=["mask-layers", "match-layers", "tau", "vital"])
    sp.add_argument("--grid", help="analysis grid csv (mask-layers, match-layers, tau)")
    sp.add_argument("--report", help="layer report csv (vital)")
    sp.add_argument("-k", type=int, help="layer count (defaults to the profile's)")
    sp.add_argument("--kind", choices=[QUALITY, COST], default=QUALITY,
                    help="grid orientation for tau: quality peaks, cost bottoms out")
    sp.add_argument("--layers", help="layer subset for the tau curve, e.g. 1,3,5-9")

    sp = sub.add_parser("dump-trace", help="list the entries of a trace container")
    sp.add_argument("path", help="container file")

    sp = sub.add_parser("report", help="print a stored group report")
    sp.add_argument("--dir", default="bachkit-out", help="directory written by run-group")

    return p


def _run_config(args) -> RunConfig:
    if args.config and args.profile:
        raise SystemExit("choose either --config or --profile, not both")
    overrides = {
        "seed": args.seed,
        "kv_budget_bytes": args.kv_budget_bytes,
        "global_match": args.global_match,
        "recompute_mask": args.recompute_mask_per_step,
    }
    if args.config:
        return read_ini(args.config, overrides)
    cfg = default_config(args.profile or "desk8")
    kw = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **kw).validate() if kw else cfg


def _cmd_gen_identity(args) -> int:
    cfg = _run_config(args)
    bench = make_workbench(cfg, scene_seed=args.scene_seed)
    bundle = run_identity(bench, cfg, seed=cfg.seed, scene_sigma=args.scene_sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle.trace.save(out / "identity_trace.bvtr")
    bundle.cache.save(out / "identity_cache.bvtr")
    np.save(out / "identity_z0.npy", bundle.z0)
    write_pgm(out / "identity_video.pgm", video_sheet(decode_video(bundle.z0)))
    print(f"identity run complete: {out}/identity_trace.bvtr, identity_cache.bvtr, "
          f"identity_z0.npy, identity_video.pgm")
    return 0


def _cmd_gen_frame(args) -> int:
    cfg = _run_config(args)
    bench = make_workbench(cfg, scene_seed=args.scene_seed)
    src = Path(args.identity_dir)
    bundle = IdentityBundle(
        z0=np.load(src / "identity_z0.npy"),
        trace=AttentionTrace.load(src / "identity_trace.bvtr"),
        cache=KvCache.load(src / "identity_cache.bvtr", budget_bytes=cfg.kv_budget_bytes),
    )
    z0, injector = run_frame(
        bench, cfg, bundle,
        seed=cfg.seed + 1, action_seed=args.action_seed,
        scene_sigma=args.scene_sigma, inject=not args.no_inject,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "frame_z0.npy", z0)
    write_pgm(out / "frame_video.pgm", video_sheet(decode_video(z0)))
    wrote = ["frame_z0.npy", "frame_video.pgm"]
    if injector is not None and injector.mask_frame is not None:
        wrote += [p.name for p in write_mask_pgms(injector.mask_frame, out / "frame_mask")]
        write_mask_csv(injector.mask_frame, out / "frame_mask.csv")
        injector.match.write_csv(out / "frame_match.csv")
        wrote += ["frame_mask.csv", "frame_match.csv"]
    print(f"frame run complete: {', '.join(str(out / w) for w in wrote)}")
    return 0


def _cmd_run_group(args) -> int:
    cfg = _run_config(args)
    bench = make_workbench(cfg, scene_seed=args.scene_seed)
    report = run_group(
        bench, cfg,
        seed_identity=cfg.seed,
        frame_seeds=[cfg.seed + 1 + i for i in range(args.frames)],
        scene_sigma=args.scene_sigma,
        ablate=bool(args.ablate),
    )
    paths = write_group_outputs(report, args.out)
    print((Path(args.out) / "report.txt").read_text().rstrip())
    print(f"{len(paths)} artifacts in {args.out}")
    return 0


def _cmd_analyze(args) -> int:
    cfg = _run_config(args)
    bench = make_workbench(cfg, scene_seed=args.scene_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mc = bench.model.config
    if args.what == "mask":
        trace = capture_trace(bench, IDENTITY, seed=cfg.seed, scene_sigma=args.scene_sigma)
        grid = mask_grid(trace, bench.layout, mc.frames, mc.height, mc.width,
                         bench.scene.mask(IDENTITY))
        grid.write_csv(out / "grid_mask.csv")
        print(f"mask grid ({len(grid.steps)} steps x {len(grid.layers)} layers): "
              f"{out / 'grid_mask.csv'}")
    elif args.what == "match":
        tr_id = capture_trace(bench, IDENTITY, seed=cfg.seed,
                              scene_sigma=args.scene_sigma, attn_out=True)
        tr_frm = capture_trace(bench, FRAME, seed=cfg.seed + 1,
                               scene_sigma=args.scene_sigma, attn_out=True, action_seed=1)
        grid = match_grid(tr_frm, tr_id, mc.frames, mc.height, mc.width,
                          bench.scene.mask(FRAME), bench.scene.correspondence(),
                          global_match=cfg.global_match)
        grid.write_csv(out / "grid_match.csv")
        print(f"match grid ({len(grid.steps)} steps x {len(grid.layers)} layers): "
              f"{out / 'grid_match.csv'}")
    else:
        init = bench.scene.noisy_latent(IDENTITY, args.scene_sigma, cfg.seed)
        if args.scorer == "embed":
            report = sweep_layers_embed(bench.model, bench.prompt(0), bench.schedule,
                                        cfg.seed, init_clean=init)
        else:
            scorer = variance_scorer() if args.scorer == "variance" else constant_scorer()
            report = sweep_layers(bench.model, bench.prompt(0), bench.schedule,
                                  cfg.seed, scorer, init_clean=init)
        report.write_csv(out / "layer_report.csv")
        print(f"layer report ({len(report.scores)} layers): {out / 'layer_report.csv'}")
    return 0


def _cmd_select(args) -> int:
    cfg = _run_config(args)
    if args.what == "vital":
        if not args.report:
            raise SystemExit("select vital needs --report")
        report = LayerReport.read_csv(args.report)
        chosen = select_vital(report.drops(), args.k or cfg.vital_k)
        print(format_layer_set(chosen))
        return 0
    if not args.grid:
        raise SystemExit(f"select {args.what} needs --grid")
    grid = AnalysisGrid.read_csv(args.grid)
    if args.what == "tau":
        layers = parse_layer_set(args.layers) if args.layers else None
        curve = grid.step_curve(layers)
        step = select_tau_mask(curve) if args.kind == QUALITY else select_tau_match(curve)
        print(grid.steps[step])
    elif args.what == "mask-layers":
        print(format_layer_set(select_layers(grid, args.k or cfg.vital_k, QUALITY)))
    else:
        print(format_layer_set(select_layers(grid, args.k or cfg.vital_k, COST)))
    return 0


def _cmd_dump_trace(args) -> int:
    entries = read_container(args.path)
    print("step layer field    rows cols")
    for step, layer, tag, a in entries:
        print(f"{step:4d} {layer:5d} {FIELD_NAMES[tag]:<8} {a.shape[0]:4d} {a.shape[1]:4d}")
    print(f"{len(entries)} entries")
    return 0


def _cmd_report(args) -> int:
    path = Path(args.dir) / "report.txt"
    if not path.exists():
        raise SystemExit(f"no report at {path}")
    print(path.read_text().rstrip())
    for p in sorted(Path(args.dir).iterdir()):
        if p.is_file():
            print(f"  {p.name}  {p.stat().st_size} bytes")
    return 0


_COMMANDS = {
    "gen-identity": _cmd_gen_identity,
    "gen-frame": _cmd_gen_frame,
    "run-group": _cmd_run_group,
    "analyze": _cmd_analyze,
    "select": _cmd_select,
    "dump-trace": _cmd_dump_trace,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
