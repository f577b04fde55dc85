"""Named presets and the ``key = value`` run-configuration format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .model import GEOMETRY_FIELDS, McfConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_EMOTIC_MHA_TRAIN = dict(optimizer="adamw", lr0=2e-5, gamma=1.0, batch_size=32,
                         lambda1=0.8, lambda2=0.2)
_ADAM_EXP = dict(optimizer="adam", lr0=2e-4, gamma=0.90, batch_size=64)
_TOY_MODEL = dict(n_layers=2, heads=2, d_model=16)
_TOY_TRAIN = dict(optimizer="adam", lr0=1e-3, gamma=1.0, batch_size=64, epochs=20)

PRESETS = {
    "emotic-mha": dict(variant="mha", n_layers=4, heads=8, d_model=512, task="multilabel_cont",
                       n_disc=26, **_EMOTIC_MHA_TRAIN),
    "emotic-sag": dict(variant="sag", n_layers=3, heads=8, d_model=768, task="multilabel_cont",
                       n_disc=26, lambda1=0.8, lambda2=0.2, **_ADAM_EXP),
    "caer-sag": dict(variant="sag", n_layers=3, heads=8, d_model=768, task="single_label",
                     n_disc=7, **_ADAM_EXP),
    "caer-mha": dict(variant="mha", n_layers=4, heads=8, d_model=512, task="single_label",
                     n_disc=7, **_ADAM_EXP),
    "fg-only": dict(variant="mha", n_layers=4, heads=8, d_model=512, streams="fg", **_EMOTIC_MHA_TRAIN),
    "vs-only": dict(variant="mha", n_layers=4, heads=8, d_model=512, streams="vs", **_EMOTIC_MHA_TRAIN),
    "toy-mha": dict(variant="mha", **_TOY_MODEL, **_TOY_TRAIN),
    "toy-sag": dict(variant="sag", **_TOY_MODEL, **_TOY_TRAIN),
    "toy-fg-only": dict(variant="mha", streams="fg", **_TOY_MODEL, **_TOY_TRAIN),
    "toy-vs-only": dict(variant="mha", streams="vs", **_TOY_MODEL, **_TOY_TRAIN),
}

MODEL_KEYS = tuple(f.name for f in fields(McfConfig) if f.name not in GEOMETRY_FIELDS)
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
PATH_KEYS = ("train_bundle", "val_bundle", "out")
ALL_KEYS = ("preset",) + MODEL_KEYS + TRAIN_KEYS + PATH_KEYS

_TYPES = {**{f.name: f.type for f in fields(McfConfig)}, **{f.name: f.type for f in fields(TrainConfig)}}


def _coerce(key, raw):
    kind = _TYPES.get(key, "str")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "tuple":
            return tuple(s.strip() for s in raw.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = (s.strip() for s in line.partition("="))
        if key not in ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


@dataclass
class RunConfig:
    """Resolved configuration: preset values overlaid with explicit keys."""

    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_bundle: str = None
    val_bundle: str = None
    out: str = None
    preset: str = None

    def model_config(self, geometry, task=None, n_disc=None):
        """Build the model config for a bundle geometry, checking task compatibility."""
        m = dict(self.model)
        for key, got in (("task", task), ("n_disc", n_disc)):
            if got is None:
                continue
            if key in m and m[key] != got:
                raise ConfigError(f"{key}: config says {m[key]!r}, bundle has {got!r}")
            m[key] = got
        m.setdefault("seed", self.train.seed)
        try:
            return McfConfig(**m, **geometry)
        except ValueError as err:
            raise ConfigError(str(err)) from None


def resolve(values, preset=None, seed=None, out=None):
    values = dict(values)
    preset = preset or values.pop("preset", None)
    values.pop("preset", None)
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = dict(PRESETS[preset])
    merged = {**base, **values}
    if seed is not None:
        merged["seed"] = seed
    if out is not None:
        merged["out"] = out
    model = {k: merged[k] for k in MODEL_KEYS if k in merged}
    train = {k: merged[k] for k in TRAIN_KEYS if k in merged}
    try:
        train_cfg = TrainConfig(**train)
        if model:
            McfConfig(**{**model, "seed": train_cfg.seed})
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if "seed" in model:
        model["seed"] = train_cfg.seed
    return RunConfig(model=model, train=train_cfg, train_bundle=merged.get("train_bundle"),
                     val_bundle=merged.get("val_bundle"), out=merged.get("out"), preset=preset)


def load_run_config(path=None, preset=None, seed=None, out=None):
    values = {}
    if path is not None:
        try:
            with open(path) as fh:
                values = parse_config_text(fh.read())
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
    return resolve(values, preset, seed, out)
