"""Flat binary checkpoints with a JSON config sidecar.

One version header line, then per-tensor records of (name, rank, extents,
float64 payload), written in sorted name order so identical parameters give
identical bytes. Control-branch tensors live under the "control/" prefix.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ValidationError

HEADER = b"LFCKPT 1\n"


def save_params(path, named: dict, config: dict) -> None:
    """Write name -> float64 array records plus the config sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(HEADER)
        for name in sorted(named):
            arr = np.ascontiguousarray(named[name], dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    with open(path.with_name(path.name + ".json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path):
    """Returns (name -> array dict, config dict); bit-exact round trip."""
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(HEADER):
        raise ValidationError(f"{path}: not a checkpoint (bad header)")
    named = {}
    off = len(HEADER)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValidationError(f"{path}: truncated checkpoint")
        out = blob[off : off + n]
        off += n
        return out

    while off < len(blob):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = take(8 * count)
        named[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    sidecar = path.with_name(path.name + ".json")
    try:
        with open(sidecar) as fh:
            config = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{sidecar}: bad config sidecar: {e}") from e
    return named, config


def save_model(path, model) -> None:
    """Checkpoint a controlled model: base, control, and layout tensors."""
    named = {}
    for n, p in model.base.params.items():
        named[f"base/{n}"] = p.value.data
    for n, p in model.control.items():
        named[f"control/{n}"] = p.value.data
    for n, p in model.layout_params.items():
        named[n] = p.value.data  # already under layout/
    config = {"model": asdict(model.base.cfg), "control": asdict(model.ctl)}
    save_params(path, named, config)


def save_base(path, base) -> None:
    """Checkpoint a bare base model (no control or layout tensors)."""
    named = {f"base/{n}": p.value.data for n, p in base.params.items()}
    save_params(path, named, {"model": asdict(base.cfg)})


def load_base(path):
    """Rebuild a BaseModel from a base-only checkpoint; parameters unfrozen."""
    from . import autodiff as ad
    from .dit import BaseModel, ModelConfig

    named, config = load_params(path)
    cfg = ModelConfig(**config["model"])
    params = {}
    for name, arr in named.items():
        if not name.startswith("base/"):
            raise ValidationError(f"{path}: unknown tensor group for {name!r}")
        short = name[len("base/"):]
        params[short] = ad.Parameter(short, arr)
    if not params:
        raise ValidationError(f"{path}: checkpoint holds no base tensors")
    return BaseModel(cfg, params=params)


def load_model(path):
    """Rebuild a ControlledModel from a checkpoint; base arrives frozen."""
    from . import autodiff as ad
    from .control import ControlConfig, ControlledModel
    from .dit import BaseModel, ModelConfig

    named, config = load_params(path)
    cfg = ModelConfig(**config["model"])
    ctl = ControlConfig(**config["control"])
    base_params = {}
    control_params = {}
    layout_params = {}
    for name, arr in named.items():
        if name.startswith("base/"):
            short = name[len("base/"):]
            base_params[short] = ad.Parameter(short, arr)
        elif name.startswith("control/"):
            short = name[len("control/"):]
            control_params[short] = ad.Parameter(short, arr)
        elif name.startswith("layout/"):
            layout_params[name] = ad.Parameter(name, arr)
        else:
            raise ValidationError(f"{path}: unknown tensor group for {name!r}")
    if not base_params or not control_params:
        raise ValidationError(f"{path}: checkpoint missing base or control tensors")
    base = BaseModel(cfg, params=base_params)
    return ControlledModel(base, ctl, control=control_params, layout_params=layout_params)
