"""Flat dotted-key configuration.

Files are plain text, one ``key = value`` per line, ``#`` comments.
Every key has a default; an unknown key is an error so typos fail loudly
instead of silently running with defaults.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


# Defaults double as the schema: the value type of each default decides
# how overrides are parsed.
DEFAULTS: dict = {
    "seed": 0,

    # synthetic data
    "synth.frame_size": 96,
    "synth.min_area_fraction": 0.01,
    "synth.occluders_min": 1,
    "synth.occluders_max": 2,
    "synth.occlusion_threshold": 0.5,
    "synth.speed_init_max": 4.0,
    "synth.sigma_speed": 0.5,
    "synth.sigma_dir": 0.2,
    "synth.sigma_aspect": 0.02,
    "synth.sigma_scale": 0.02,
    "synth.image_dir": "",          # empty = procedural mode

    # network (defaults are the desk-scale preset)
    "network.crop_size": 48,
    "network.blocks": "5x16,3x32,3x64",   # kernel x channels per block
    "network.skip_channels": "4,8,16",
    "network.embed_dim": 256,
    "network.lstm_units": 128,

    # training
    "train.dtype": "float32",       # float64 for checking, float32 for speed
    "train.lr": 1e-3,
    "train.lr_drop_fraction": 0.2,  # drop lr after this fraction of iterations
    "train.lr_drop_factor": 0.1,
    "train.mirror_prob": 0.5,
    "train.plateau_window": 500,
    "train.plateau_threshold": 0.01,
    "train.stage_max_iters": 20000,
    "train.checkpoint_every": 2000,

    # tracking
    "tracker.reset_interval": 32,   # 0 disables the periodic state reset

    # evaluation
    "eval.reinit_gap": 5,
    "eval.threshold_step": 0.05,
}


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str, defaults: dict | None = None) -> dict:
    cfg = dict(DEFAULTS if defaults is None else defaults)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in cfg:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = _parse_value(key, value, cfg[key])
    return cfg


def load_config(path=None) -> dict:
    """Defaults, overridden by the file at ``path`` when given."""
    if path is None:
        return dict(DEFAULTS)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def parse_blocks(spec: str) -> tuple:
    """'5x16,3x32' -> ((5, 16), (3, 32))."""
    try:
        return tuple(tuple(int(v) for v in item.split("x")) for item in spec.split(","))
    except ValueError:
        raise ConfigError(f"bad block spec {spec!r}") from None


def parse_int_list(spec: str) -> tuple:
    try:
        return tuple(int(v) for v in spec.split(","))
    except ValueError:
        raise ConfigError(f"bad integer list {spec!r}") from None
