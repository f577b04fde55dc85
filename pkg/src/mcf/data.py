"""Feature bundles: the on-disk dataset format, synthetic generation, splits.

Layout (all little-endian)::

    header   4s magic "MCFB" | u32 version=1 | u8 task | u16 n_disc
             | u32 sample_count | u16 T_PE d_PE T_FG d_FG T_VS d_VS
    record   f32 e_PE[T_PE*d_PE] | f32 e_FG[T_FG*d_FG] | f32 e_VS[T_VS*d_VS]
             | u8 fg_mask[T_FG]
             | task 0: u8 y_disc[n_disc], f32 y_cont[3]
             | task 1: u16 class

Records follow the header back to back, with no padding. An optional sidecar
``<path>.manifest`` holds ``key = value`` text lines.

Read errors carry a stable ``code``: ``E_MAGIC`` (bad magic bytes),
``E_VERSION`` (unsupported version), ``E_TRUNCATED`` (file shorter than the
header declares; ``sample_index`` names the first incomplete record) and
``E_DIM`` (inconsistent sizes; ``field`` names the offending field).
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import GEOMETRY_FIELDS, FULL_GEOMETRY, TOY_GEOMETRY, StreamBatch

MAGIC = b"MCFB"
VERSION = 1
HEADER = struct.Struct("<4sIBHI6H")
TASK_CODES = {"multilabel_cont": 0, "single_label": 1}
TASK_NAMES = {v: k for k, v in TASK_CODES.items()}


class BundleError(ValueError):
    """Base class for malformed bundle files."""

    code = "E_BUNDLE"


class BadMagicError(BundleError):
    code = "E_MAGIC"


class VersionError(BundleError):
    code = "E_VERSION"


class TruncatedError(BundleError):
    code = "E_TRUNCATED"

    def __init__(self, msg, sample_index=None):
        super().__init__(msg)
        self.sample_index = sample_index


class DimMismatchError(BundleError):
    code = "E_DIM"

    def __init__(self, msg, field_name=None):
        super().__init__(msg)
        self.field = field_name


@dataclass(frozen=True)
class BundleHeader:
    task: int
    n_disc: int
    sample_count: int
    t_pe: int
    d_pe: int
    t_fg: int
    d_fg: int
    t_vs: int
    d_vs: int
    magic: bytes = MAGIC
    version: int = VERSION

    def validate(self):
        if self.magic != MAGIC:
            raise BadMagicError(f"magic: expected {MAGIC!r}, got {self.magic!r}")
        if self.version != VERSION:
            raise VersionError(f"version: expected {VERSION}, got {self.version}")
        if self.task not in TASK_NAMES:
            raise DimMismatchError(f"task: unknown code {self.task}", "task")
        for name in ("n_disc",) + GEOMETRY_FIELDS:
            if getattr(self, name) < 1:
                raise DimMismatchError(f"{name}: must be >= 1, got {getattr(self, name)}", name)

    @property
    def task_name(self):
        return TASK_NAMES[self.task]

    @property
    def geometry(self):
        return {name: getattr(self, name) for name in GEOMETRY_FIELDS}

    def pack(self):
        return HEADER.pack(self.magic, self.version, self.task, self.n_disc, self.sample_count,
                           self.t_pe, self.d_pe, self.t_fg, self.d_fg, self.t_vs, self.d_vs)

    def record_dtype(self):
        fields_ = [("e_pe", "<f4", (self.t_pe, self.d_pe)),
                   ("e_fg", "<f4", (self.t_fg, self.d_fg)),
                   ("e_vs", "<f4", (self.t_vs, self.d_vs)),
                   ("fg_mask", "u1", (self.t_fg,))]
        if self.task == 0:
            fields_ += [("y_disc", "u1", (self.n_disc,)), ("y_cont", "<f4", (3,))]
        else:
            fields_ += [("y_class", "<u2")]
        return np.dtype(fields_)


@dataclass
class Bundle:
    header: BundleHeader
    e_pe: np.ndarray
    e_fg: np.ndarray
    e_vs: np.ndarray
    fg_mask: np.ndarray
    y_disc: np.ndarray = None
    y_cont: np.ndarray = None
    y_class: np.ndarray = None
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return self.e_pe.shape[0]

    @property
    def task_name(self):
        return self.header.task_name

    def batch(self, idx):
        return StreamBatch(self.e_pe[idx], self.e_fg[idx], self.e_vs[idx], self.fg_mask[idx])

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        header = BundleHeader(**{**_header_kwargs(self.header), "sample_count": len(idx)})
        return Bundle(header, self.e_pe[idx], self.e_fg[idx], self.e_vs[idx], self.fg_mask[idx],
                      pick(self.y_disc), pick(self.y_cont), pick(self.y_class), dict(self.manifest))

    def to_records(self):
        rec = np.zeros(len(self), dtype=self.header.record_dtype())
        rec["e_pe"] = self.e_pe
        rec["e_fg"] = self.e_fg
        rec["e_vs"] = self.e_vs
        rec["fg_mask"] = self.fg_mask
        if self.header.task == 0:
            rec["y_disc"] = self.y_disc
            rec["y_cont"] = self.y_cont
        else:
            rec["y_class"] = self.y_class
        return rec

    def validate(self):
        h = self.header
        h.validate()
        n = h.sample_count
        expect = {"e_pe": (n, h.t_pe, h.d_pe), "e_fg": (n, h.t_fg, h.d_fg),
                  "e_vs": (n, h.t_vs, h.d_vs), "fg_mask": (n, h.t_fg)}
        if h.task == 0:
            expect.update(y_disc=(n, h.n_disc), y_cont=(n, 3))
        else:
            expect.update(y_class=(n,))
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr is None or arr.shape != shape:
                got = None if arr is None else arr.shape
                raise DimMismatchError(f"{name}: shape {got} does not match header {shape}", name)
        if n and not self.fg_mask.any(axis=1).all():
            raise DimMismatchError("fg_mask: a sample has no valid foreground token", "fg_mask")
        if h.task == 0 and n:
            if not np.isin(self.y_disc, (0, 1)).all():
                raise DimMismatchError("y_disc: labels must be 0/1", "y_disc")
            if (self.y_cont < 0).any() or (self.y_cont > 1).any():
                raise DimMismatchError("y_cont: AVD values must lie in [0, 1]", "y_cont")
        if h.task == 1 and n and self.y_class.max() >= h.n_disc:
            raise DimMismatchError("y_class: class index >= n_disc", "y_class")


def _header_kwargs(h):
    return {k: getattr(h, k) for k in ("task", "n_disc", "sample_count") + GEOMETRY_FIELDS}


def bundle_equal(a, b):
    """Header equality and bitwise equality of every array."""
    if a.header != b.header:
        return False
    for name in ("e_pe", "e_fg", "e_vs", "fg_mask", "y_disc", "y_cont", "y_class"):
        x, y = getattr(a, name), getattr(b, name)
        if (x is None) != (y is None):
            return False
        if x is not None and (x.shape != y.shape or x.tobytes() != y.tobytes()):
            return False
    return True


def _atomic_write(path, data, mode="wb"):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_manifest(path, manifest):
    lines = [f"{k} = {v}" for k, v in manifest.items()]
    _atomic_write(path, "\n".join(lines) + "\n", "w")


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                out[key.strip()] = value.strip()
    return out


def write_bundle(path, bundle, manifest=None):
    """Write ``bundle`` to ``path``; returns the number of bytes written."""
    bundle.validate()
    payload = bundle.header.pack() + bundle.to_records().tobytes()
    _atomic_write(path, payload)
    manifest = bundle.manifest if manifest is None else manifest
    if manifest:
        write_manifest(f"{path}.manifest", manifest)
    return len(payload)


def read_bundle(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER.size:
        if raw[:4] != MAGIC[:len(raw[:4])]:
            raise BadMagicError(f"magic: expected {MAGIC!r}, got {raw[:4]!r}")
        raise TruncatedError(f"header: file has {len(raw)} bytes, header needs {HEADER.size}")
    magic, version, task, n_disc, count, *geom = HEADER.unpack_from(raw)
    header = BundleHeader(task, n_disc, count, *geom, magic=magic, version=version)
    header.validate()
    dtype = header.record_dtype()
    body = len(raw) - HEADER.size
    if body < count * dtype.itemsize:
        idx = body // dtype.itemsize
        raise TruncatedError(
            f"sample {idx}: file ends after {body} record bytes, header declares "
            f"{count} records of {dtype.itemsize} bytes", sample_index=idx)
    if body > count * dtype.itemsize:
        raise DimMismatchError(
            f"sample_count: file holds {body} record bytes, header declares {count} records "
            f"of {dtype.itemsize} bytes", "sample_count")
    rec = np.frombuffer(raw, dtype=dtype, count=count, offset=HEADER.size)
    arrays = dict(e_pe=np.ascontiguousarray(rec["e_pe"], dtype=np.float32),
                  e_fg=np.ascontiguousarray(rec["e_fg"], dtype=np.float32),
                  e_vs=np.ascontiguousarray(rec["e_vs"], dtype=np.float32),
                  fg_mask=rec["fg_mask"].astype(bool))
    if task == 0:
        arrays.update(y_disc=rec["y_disc"].copy(), y_cont=np.ascontiguousarray(rec["y_cont"], dtype=np.float32))
    else:
        arrays.update(y_class=rec["y_class"].astype(np.uint16))
    manifest = read_manifest(f"{path}.manifest") if os.path.exists(f"{path}.manifest") else {}
    bundle = Bundle(header, manifest=manifest, **arrays)
    bundle.validate()
    return bundle


# -- synthetic data ------------------------------------------------------------
@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a planted-signal feature bundle.

    ``xor`` mode: two-class task whose label is ``z_FG == z_VS``. ``linear``
    mode: multilabel task with AVD targets driven by the same two latents.
    """

    mode: str = "xor"
    n_samples: int = 256
    noise_sigma: float = 1.0
    signal_strength: float = 2.0
    seed: int = 0
    geometry: object = "full"  # "full", "toy" or a mapping of token counts/widths
    n_disc: int = 0  # linear mode only; 0 means 26
    label_noise: float = 0.25

    def __post_init__(self):
        if self.mode not in ("xor", "linear"):
            raise ValueError(f"mode must be 'xor' or 'linear', got {self.mode!r}")
        if isinstance(self.geometry, str):
            if self.geometry not in ("full", "toy"):
                raise ValueError(f"geometry must be 'full', 'toy' or a mapping, got {self.geometry!r}")
        else:
            unknown = set(self.geometry) - set(GEOMETRY_FIELDS)
            if unknown:
                raise ValueError(f"unknown geometry keys {sorted(unknown)}")
            if any(int(v) < 1 or int(v) > 0xFFFF for v in self.geometry.values()):
                raise ValueError("geometry entries must lie in [1, 65535]")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.signal_strength > 0:
            raise ValueError("signal_strength must be > 0")

    @property
    def dims(self):
        """Resolved geometry; a partial mapping is completed from the toy preset."""
        if isinstance(self.geometry, str):
            return dict(FULL_GEOMETRY if self.geometry == "full" else TOY_GEOMETRY)
        return {**TOY_GEOMETRY, **{k: int(v) for k, v in self.geometry.items()}}


def _unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def gen_synthetic(spec, signal_strength=None):
    """Deterministic planted-signal bundle; a pure function of ``spec``.

    ``signal_strength`` overrides ``spec.signal_strength``. Zero is allowed
    here, though ``SyntheticSpec`` rejects it; used to inspect pure noise.
    """
    g = spec.dims
    s = spec.signal_strength if signal_strength is None else signal_strength
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    u_fg = _unit(rng, g["d_fg"])
    u_vs = _unit(rng, g["d_vs"])
    z_fg = rng.choice([-1.0, 1.0], size=n)
    z_vs = rng.choice([-1.0, 1.0], size=n)
    sig = spec.noise_sigma
    e_pe = sig * rng.normal(size=(n, g["t_pe"], g["d_pe"]))
    e_fg = sig * rng.normal(size=(n, g["t_fg"], g["d_fg"]))
    e_vs = sig * rng.normal(size=(n, g["t_vs"], g["d_vs"]))
    k_fg = math.ceil(g["t_fg"] / 4)
    k_vs = math.ceil(g["t_vs"] / 4)
    e_fg[:, :k_fg] += s * z_fg[:, None, None] * u_fg
    e_vs[:, :k_vs] += s * z_vs[:, None, None] * u_vs
    # caption padding: every sample keeps at least the signal-bearing prefix
    lengths = rng.integers(k_fg, g["t_fg"] + 1, size=n)
    fg_mask = np.arange(g["t_fg"])[None, :] < lengths[:, None]
    e_fg[~fg_mask] = 0.0
    arrays = dict(e_pe=e_pe.astype(np.float32), e_fg=e_fg.astype(np.float32),
                  e_vs=e_vs.astype(np.float32), fg_mask=fg_mask)
    latents = np.stack([z_fg, z_vs], axis=1)
    if spec.mode == "xor":
        task, n_disc = 1, 2
        arrays["y_class"] = (z_fg == z_vs).astype(np.uint16)
    else:
        task, n_disc = 0, spec.n_disc or 26
        w = rng.uniform(-1, 1, size=(2, n_disc))
        w_noise = spec.label_noise * rng.uniform(-1, 1, size=n_disc)
        bias = rng.uniform(-0.5, 0.5, size=n_disc)
        eps = rng.normal(size=(n, 1))
        arrays["y_disc"] = (latents @ w + eps * w_noise + bias > 0).astype(np.uint8)
        a = rng.uniform(-1, 1, size=(2, 3))
        c = rng.uniform(-0.5, 0.5, size=3)
        arrays["y_cont"] = (1.0 / (1.0 + np.exp(-(latents @ a + c)))).astype(np.float32)
    header = BundleHeader(task, n_disc, n, **g)
    manifest = {"source": f"synthetic:{spec.mode}", "seed": spec.seed,
                "noise_sigma": spec.noise_sigma, "signal_strength": s,
                "avd_scale": "sigmoid of latent affine map, [0, 1]"}
    if spec.mode == "xor":
        manifest["class_names"] = "differ,agree"
    return Bundle(header, manifest=manifest, **arrays)


def split_dataset(bundle, fractions, seed=0):
    """Seeded permutation sliced into up to three disjoint parts (train, val, test)."""
    fractions = tuple(float(f) for f in fractions)
    if not 1 <= len(fractions) <= 3 or any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise ValueError(f"fractions must be 1-3 positive values summing to <= 1, got {fractions}")
    n = len(bundle)
    perm = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for f in fractions:
        size = min(int(math.floor(f * n + 1e-9)), n - start)
        parts.append(np.sort(perm[start:start + size]))
        start += size
    while len(parts) < 3:
        parts.append(np.zeros(0, dtype=np.int64))
    return tuple(bundle.subset(p) for p in parts)
