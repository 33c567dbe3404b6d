"""Training configuration: a flat `key = value` file format with `#`
comments. Unknown keys are an error so typos cannot silently fall back to
defaults."""

from dataclasses import dataclass, fields


@dataclass
class TrainConfig:
    # optimization
    seed: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    iterations: int = 500
    lr_half_every: int = 200  # iterations between halvings; 0 = constant

    # architecture (desk-scale defaults; radii assume unit-normalized clouds)
    group: str = "icosahedral"
    levels: int = 2
    stride: int = 2
    radii: tuple = (0.4, 0.8)
    k_max: tuple = (16, 16)
    channels: tuple = (8, 16)
    kernel_points: int = 8
    group_neighbors: int = 6
    sigma_scale: float = 0.7  # correlation bandwidth = sigma_scale * radius
    attention_hidden: int = 16
    head_hidden: int = 32

    # loss weights
    rotation_weight: float = 1.0
    temperature: float = 1.0
    margin: float = 1.0

    # task setup
    head: str = "detection"  # pose task: detection | quaternion
    compare_baseline: bool = False
    pooling: tuple = ("attentive", "max", "mean")
    n_points: int = 128
    jitter: float = 0.02
    train_samples: int = 256
    eval_samples: int = 256
    shape_seed: int = 7


_INT_FIELDS = {
    "seed", "batch_size", "iterations", "lr_half_every", "levels", "stride",
    "kernel_points", "group_neighbors", "attention_hidden", "head_hidden",
    "n_points", "train_samples", "eval_samples", "shape_seed",
}
_FLOAT_FIELDS = {
    "learning_rate", "beta1", "beta2", "sigma_scale", "rotation_weight",
    "temperature", "margin", "jitter",
}
_STR_FIELDS = {"group", "head"}
_BOOL_FIELDS = {"compare_baseline"}
_FLOAT_TUPLE_FIELDS = {"radii"}
_INT_TUPLE_FIELDS = {"k_max", "channels"}
_STR_TUPLE_FIELDS = {"pooling"}

_KNOWN = {f.name for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    if key in _INT_FIELDS:
        return int(raw)
    if key in _FLOAT_FIELDS:
        return float(raw)
    if key in _STR_FIELDS:
        return raw
    if key in _BOOL_FIELDS:
        if raw.lower() in ("on", "true", "yes", "1"):
            return True
        if raw.lower() in ("off", "false", "no", "0"):
            return False
        raise ValueError(f"config key {key!r}: expected on/off, got {raw!r}")
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if key in _FLOAT_TUPLE_FIELDS:
        return tuple(float(p) for p in parts)
    if key in _INT_TUPLE_FIELDS:
        return tuple(int(p) for p in parts)
    if key in _STR_TUPLE_FIELDS:
        return tuple(parts)
    raise ValueError(f"config key {key!r} has no registered type")


def parse_config_text(text: str, **overrides) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw.rstrip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KNOWN:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, value)
    values.update(overrides)
    cfg = TrainConfig(**values)
    _check(cfg)
    return cfg


def load_config(path, **overrides) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), **overrides)


def _check(cfg: TrainConfig) -> None:
    if cfg.learning_rate <= 0 or cfg.batch_size < 1 or cfg.iterations < 0:
        raise ValueError("learning_rate must be positive, batch_size >= 1, iterations >= 0")
    if not (0 < cfg.beta1 < 1 and 0 < cfg.beta2 < 1):
        raise ValueError("betas must lie in (0, 1)")
    if cfg.temperature <= 0:
        raise ValueError("temperature must be positive")
    if len(cfg.radii) != cfg.levels or len(cfg.k_max) != cfg.levels or len(cfg.channels) != cfg.levels:
        raise ValueError("radii, k_max, and channels must each have one entry per level")
    if cfg.head not in ("detection", "quaternion"):
        raise ValueError(f"unknown head {cfg.head!r}")
    bad = set(cfg.pooling) - {"attentive", "max", "mean"}
    if bad:
        raise ValueError(f"unknown pooling variants: {sorted(bad)}")


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out
