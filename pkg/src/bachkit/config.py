"""Run configuration: profiles, layer sets, and INI round-trip.

Two profiles ship with the package. `desk8` is the 8-layer model sized for
tests and demos. `paper42` is the 42-layer reference configuration with its
published readout steps and layer sets (all indices 0-based). Layer sets in
INI files use comma-separated entries, each a single index or an inclusive
`lo-hi` range.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

from .dit import PROFILES, ModelConfig


def parse_layer_set(text: str) -> tuple[int, ...]:
    """Parse "1,3,5-9" into a sorted tuple of distinct layer indices."""
    out: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError(f"descending layer range {part!r}")
            out.update(range(lo, hi + 1))
        else:
            out.add(int(part))
    if not out:
        raise ValueError("empty layer set")
    return tuple(sorted(out))


def format_layer_set(layers) -> str:
    """Inverse of parse_layer_set, collapsing runs into ranges."""
    xs = sorted(set(int(l) for l in layers))
    parts = []
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[j] + 1:
            j += 1
        parts.append(str(xs[i]) if i == j else f"{xs[i]}-{xs[j]}")
        i = j + 1
    return ",".join(parts)


@dataclass(frozen=True)
class RunConfig:
    """Everything one consistency run group needs besides the scene."""

    profile: str
    seed: int
    tau_mask: int
    tau_match: int
    tau_inject: int
    mask_layers: tuple[int, ...]
    match_layers: tuple[int, ...]
    kv_layers: tuple[int, ...]
    vital_k: int
    kv_budget_bytes: int | None = None
    global_match: bool = False
    recompute_mask: bool = False

    def model_config(self) -> ModelConfig:
        return PROFILES[self.profile]

    def validate(self) -> "RunConfig":
        cfg = self.model_config()
        for name, layers in (
            ("mask_layers", self.mask_layers),
            ("match_layers", self.match_layers),
            ("kv_layers", self.kv_layers),
        ):
            bad = [l for l in layers if not 0 <= l < cfg.depth]
            if bad:
                raise ValueError(f"{name} {bad} outside 0..{cfg.depth - 1}")
        for name, tau in (
            ("tau_mask", self.tau_mask),
            ("tau_match", self.tau_match),
            ("tau_inject", self.tau_inject),
        ):
            if not 0 <= tau < cfg.steps:
                raise ValueError(f"{name}={tau} outside 0..{cfg.steps - 1}")
        if self.tau_inject <= max(self.tau_mask, self.tau_match):
            raise ValueError("tau_inject must come after tau_mask and tau_match")
        if not 1 <= self.vital_k <= cfg.depth:
            raise ValueError(f"vital_k={self.vital_k} outside 1..{cfg.depth}")
        return self


_PROFILE_DEFAULTS = {
    "desk8": RunConfig(
        profile="desk8",
        seed=0,
        tau_mask=10,
        tau_match=10,
        tau_inject=11,
        mask_layers=tuple(range(8)),
        match_layers=tuple(range(8)),
        kv_layers=(1, 3, 5, 7),
        vital_k=4,
    ),
    "paper42": RunConfig(
        profile="paper42",
        seed=0,
        tau_mask=10,
        tau_match=10,
        tau_inject=11,
        mask_layers=tuple(range(5, 20)),
        match_layers=tuple(range(1, 16)),
        kv_layers=(0, 1, 11, 12, 13, 14, 15, 17, 19, 20, 21, 23, 29, 34, 41),
        vital_k=15,
    ),
}


def default_config(profile: str = "desk8") -> RunConfig:
    if profile not in _PROFILE_DEFAULTS:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(_PROFILE_DEFAULTS)}")
    return _PROFILE_DEFAULTS[profile]


def read_ini(path, overrides: dict | None = None) -> RunConfig:
    """Load a RunConfig from an INI file, starting from its profile's defaults.

    Every key is optional; `overrides` (same key names) wins over the file.
    """
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    profile = parser.get("model", "profile", fallback="desk8")
    cfg = default_config(profile)
    kw = {}
    if parser.has_option("model", "seed"):
        kw["seed"] = parser.getint("model", "seed")
    for key in ("tau_mask", "tau_match", "tau_inject"):
        if parser.has_option("readout", key):
            kw[key] = parser.getint("readout", key)
    for key in ("mask_layers", "match_layers", "kv_layers"):
        if parser.has_option("readout", key):
            kw[key] = parse_layer_set(parser.get("readout", key))
    if parser.has_option("inject", "kv_budget_bytes"):
        budget = parser.getint("inject", "kv_budget_bytes")
        kw["kv_budget_bytes"] = None if budget <= 0 else budget
    for key in ("global_match", "recompute_mask"):
        if parser.has_option("inject", key):
            kw[key] = parser.getboolean("inject", key)
    if parser.has_option("vital", "k"):
        kw["vital_k"] = parser.getint("vital", "k")
    if overrides:
        kw.update({k: v for k, v in overrides.items() if v is not None})
    return replace(cfg, **kw).validate()


def write_ini(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["model"] = {"profile": cfg.profile, "seed": str(cfg.seed)}
    parser["readout"] = {
        "tau_mask": str(cfg.tau_mask),
        "tau_match": str(cfg.tau_match),
        "tau_inject": str(cfg.tau_inject),
        "mask_layers": format_layer_set(cfg.mask_layers),
        "match_layers": format_layer_set(cfg.match_layers),
        "kv_layers": format_layer_set(cfg.kv_layers),
    }
    parser["inject"] = {
        "kv_budget_bytes": str(cfg.kv_budget_bytes or 0),
        "global_match": str(cfg.global_match).lower(),
        "recompute_mask": str(cfg.recompute_mask).lower(),
    }
    parser["vital"] = {"k": str(cfg.vital_k)}
    with open(path, "w") as fh:
        parser.write(fh)
