"""The multimodal context fusion network.

Person tokens are the query of two independent cross-modal encoder blocks:
one attends over caption (foreground) tokens, the other over scene tokens.
Each block's output is mean-pooled over the person-token axis; the two pooled
vectors are concatenated (foreground half first) and fed to the task heads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import functional as F
from .encoders import MHA_ENC, VARIANTS, CmEncBlock
from .nn import Linear, Module
from .tensor import DEFAULT_DTYPE, DimensionError, RngState, relu

MULTILABEL_CONT = "multilabel_cont"
SINGLE_LABEL = "single_label"
TASKS = (MULTILABEL_CONT, SINGLE_LABEL)
STREAMS = ("both", "fg", "vs")
N_CONT = 3

GEOMETRY_FIELDS = ("t_pe", "d_pe", "t_fg", "d_fg", "t_vs", "d_vs")
FULL_GEOMETRY = dict(t_pe=49, d_pe=512, t_fg=512, d_fg=768, t_vs=197, d_vs=768)
TOY_GEOMETRY = dict(t_pe=4, d_pe=16, t_fg=6, d_fg=16, t_vs=5, d_vs=16)


@dataclass(frozen=True)
class McfConfig:
    variant: str = MHA_ENC
    n_layers: int = 4
    heads: int = 8
    d_model: int = 512
    task: str = MULTILABEL_CONT
    n_disc: int = 0  # 0 picks the task default: 26 multilabel, 7 single-label
    dropout_p: float = 0.1
    streams: str = "both"
    head_hidden: int = 0
    d_ff: int = 0  # 0 means 2 * d_model
    t_pe: int = 49
    d_pe: int = 512
    t_fg: int = 512
    d_fg: int = 768
    t_vs: int = 197
    d_vs: int = 768
    seed: int = 0

    def __post_init__(self):
        if self.n_disc == 0:
            object.__setattr__(self, "n_disc", 26 if self.task == MULTILABEL_CONT else 7)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.streams not in STREAMS:
            raise ValueError(f"streams must be one of {STREAMS}, got {self.streams!r}")
        if self.n_layers < 1 or self.heads < 1 or self.d_model < 1 or self.n_disc < 1:
            raise ValueError("n_layers, heads, d_model and n_disc must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        for name in GEOMETRY_FIELDS:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def fusion_width(self):
        return self.d_model * (2 if self.streams == "both" else 1)

    @property
    def geometry(self):
        return {name: getattr(self, name) for name in GEOMETRY_FIELDS}

    def with_geometry(self, **geometry):
        return replace(self, **geometry)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class StreamBatch:
    """Person, foreground and scene token matrices; a leading batch axis is optional."""

    e_pe: np.ndarray
    e_fg: np.ndarray
    e_vs: np.ndarray
    fg_mask: np.ndarray

    def __len__(self):
        return 1 if self.e_pe.ndim == 2 else self.e_pe.shape[0]


@dataclass
class McfOutput:
    disc_logits: object
    cont: object = None


class Head(Module):
    """A fully-connected head: linear, or linear-ReLU-linear when ``hidden`` > 0."""

    def __init__(self, d_in, d_out, rng, hidden=0, dtype=DEFAULT_DTYPE):
        if hidden:
            self.hidden = Linear(d_in, hidden, rng, dtype=dtype)
        self.out = Linear(hidden or d_in, d_out, rng, dtype=dtype)

    def __call__(self, x):
        if "hidden" in vars(self):
            x = relu(self.hidden(x))
        return self.out(x)


class McfModel(Module):
    def __init__(self, config, dtype=DEFAULT_DTYPE):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        d_ff = c.d_ff or None
        self.pe_adapter = Linear(c.d_pe, c.d_model, rng, identity=True, dtype=dtype)
        if c.streams in ("both", "fg"):
            self.fg_adapter = Linear(c.d_fg, c.d_model, rng, identity=True, dtype=dtype)
            self.fg_block = CmEncBlock(c.variant, c.n_layers, c.d_model, c.heads, rng,
                                       c.dropout_p, d_ff, dtype)
        if c.streams in ("both", "vs"):
            self.vs_adapter = Linear(c.d_vs, c.d_model, rng, identity=True, dtype=dtype)
            self.vs_block = CmEncBlock(c.variant, c.n_layers, c.d_model, c.heads, rng,
                                       c.dropout_p, d_ff, dtype)
        self.disc_head = Head(c.fusion_width, c.n_disc, rng, c.head_hidden, dtype)
        if c.task == MULTILABEL_CONT:
            self.cont_head = Head(c.fusion_width, N_CONT, rng, c.head_hidden, dtype)

    def set_frozen(self, names):
        """Freeze every parameter whose name starts with one of ``names``."""
        names = tuple(names)
        for name, p in self.named_parameters():
            if names and name.startswith(names):
                p.trainable = False

    def __call__(self, batch, mode="eval", rng=None):
        return mcf_forward(self, batch, mode, rng)


def project_stream(e, adapter):
    return adapter(e)


def check_geometry(config, batch):
    dims = dict(t_pe=batch.e_pe.shape[-2], d_pe=batch.e_pe.shape[-1],
                t_fg=batch.e_fg.shape[-2], d_fg=batch.e_fg.shape[-1],
                t_vs=batch.e_vs.shape[-2], d_vs=batch.e_vs.shape[-1])
    for name, got in dims.items():
        want = getattr(config, name)
        if got != want:
            raise DimensionError(f"{name}: sample has {got}, model expects {want}")
    if batch.fg_mask.shape[-1] != config.t_fg:
        raise DimensionError(f"fg_mask length {batch.fg_mask.shape[-1]} != t_fg {config.t_fg}")


def foreground_stream(model, batch, mode="eval", rng=None, trace=None):
    q = project_stream(batch.e_pe, model.pe_adapter)
    kv = project_stream(batch.e_fg, model.fg_adapter)
    return model.fg_block(q, kv, kv, batch.fg_mask, mode, rng, trace)


def visual_stream(model, batch, mode="eval", rng=None, trace=None):
    q = project_stream(batch.e_pe, model.pe_adapter)
    kv = project_stream(batch.e_vs, model.vs_adapter)
    return model.vs_block(q, kv, kv, None, mode, rng, trace)


def fuse(e_pe_fg, e_pe_vs):
    return F.concat_last(F.masked_mean_pool(e_pe_fg), F.masked_mean_pool(e_pe_vs))


def heads_forward(model, e_fusion):
    e_fusion = F.to_tensor(e_fusion)
    if e_fusion.shape[-1] != model.config.fusion_width:
        raise DimensionError(
            f"fusion width {e_fusion.shape[-1]} != expected {model.config.fusion_width}")
    disc = model.disc_head(e_fusion)
    cont = model.cont_head(e_fusion) if model.config.task == MULTILABEL_CONT else None
    return McfOutput(disc, cont)


def mcf_forward(model, batch, mode="eval", rng=None):
    check_geometry(model.config, batch)
    if mode == "train" and rng is None and model.config.dropout_p > 0:
        rng = RngState(model.config.seed + 2)
    streams = model.config.streams
    if streams == "both":
        e_fusion = fuse(foreground_stream(model, batch, mode, rng),
                        visual_stream(model, batch, mode, rng))
    elif streams == "fg":
        e_fusion = F.masked_mean_pool(foreground_stream(model, batch, mode, rng))
    else:
        e_fusion = F.masked_mean_pool(visual_stream(model, batch, mode, rng))
    return heads_forward(model, e_fusion)


def expected_parameter_count(config):
    """Closed-form parameter count, independent of the module tree."""
    c = config
    d = c.d_model
    d_ff = c.d_ff or 2 * d
    mha = 4 * (d * d + d)
    ln = 2 * d
    ffn = d * d_ff + d_ff + d_ff * d + d
    layer = mha + 2 * ln + ffn
    if c.variant != MHA_ENC:
        layer += mha + ln
    n_streams = 2 if c.streams == "both" else 1
    total = n_streams * c.n_layers * layer
    total += c.d_pe * d + d
    if c.streams in ("both", "fg"):
        total += c.d_fg * d + d
    if c.streams in ("both", "vs"):
        total += c.d_vs * d + d

    def head(n_out):
        w = c.fusion_width
        if c.head_hidden:
            return w * c.head_hidden + c.head_hidden + c.head_hidden * n_out + n_out
        return w * n_out + n_out

    total += head(c.n_disc)
    if c.task == MULTILABEL_CONT:
        total += head(N_CONT)
    return total
