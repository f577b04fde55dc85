"""Model checkpoints.

A checkpoint is a directory holding

* ``config.txt``      ``key = value`` lines of the model configuration,
* ``params.manifest`` one ``name shape`` line per tensor, in storage order
  (shape written as ``d0xd1``),
* ``params.bin``      the tensors' float32 little-endian values, concatenated.
"""

from __future__ import annotations

import os
import shutil
from dataclasses import fields

import numpy as np

from .model import McfConfig, McfModel

CONFIG_FILE = "config.txt"
MANIFEST_FILE = "params.manifest"
PARAMS_FILE = "params.bin"


def _fmt_shape(shape):
    return "x".join(str(n) for n in shape)


def write_params(model, directory):
    names, blobs = [], []
    for name, p in model.named_parameters():
        names.append(f"{name} {_fmt_shape(p.shape)}")
        blobs.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(os.path.join(directory, MANIFEST_FILE), "w") as fh:
        fh.write("\n".join(names) + "\n")
    with open(os.path.join(directory, PARAMS_FILE), "wb") as fh:
        fh.write(b"".join(blobs))


def read_params(directory):
    """Return an ordered ``{name: array}`` mapping."""
    entries = []
    with open(os.path.join(directory, MANIFEST_FILE)) as fh:
        for line in fh:
            if line.strip():
                name, shape = line.split()
                entries.append((name, tuple(int(n) for n in shape.split("x"))))
    with open(os.path.join(directory, PARAMS_FILE), "rb") as fh:
        raw = fh.read()
    out, offset = {}, 0
    for name, shape in entries:
        count = int(np.prod(shape))
        if offset + 4 * count > len(raw):
            raise ValueError(f"{PARAMS_FILE} is truncated at tensor {name}")
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{PARAMS_FILE} has {len(raw) - offset} trailing bytes")
    return out


def config_to_text(config):
    return "".join(f"{f.name} = {getattr(config, f.name)}\n" for f in fields(config))


def config_from_text(text):
    types = {f.name: f.type for f in fields(McfConfig)}
    values = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, raw = (s.strip() for s in line.partition("="))
        if key not in types:
            raise ValueError(f"unknown checkpoint config key {key!r}")
        kind = types[key]
        values[key] = float(raw) if kind == "float" else int(raw) if kind == "int" else raw
    return McfConfig(**values)


def save_checkpoint(model, directory):
    """Write to a sibling temp directory first so a failure leaves no partial checkpoint."""
    tmp = directory.rstrip("/") + ".tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    os.makedirs(tmp)
    with open(os.path.join(tmp, CONFIG_FILE), "w") as fh:
        fh.write(config_to_text(model.config))
    write_params(model, tmp)
    shutil.rmtree(directory, ignore_errors=True)
    os.replace(tmp, directory)


def load_checkpoint(directory):
    with open(os.path.join(directory, CONFIG_FILE)) as fh:
        config = config_from_text(fh.read())
    model = McfModel(config)
    model.load_state_dict(read_params(directory))
    return model
