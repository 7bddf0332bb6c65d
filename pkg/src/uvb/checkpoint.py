"""Binary checkpoint format.

Layout (all integers and reals little-endian)::

    b"UVB1"                 magic
    u32  format version
    u32  header length in bytes
    header                  UTF-8 text, ``key = value`` lines: the training
                            config, the resolved model description, the epoch
                            and Adam step counters, and one
                            ``layout.<name> = <offset> <dim> <dim>...`` line per
                            parameter tensor
    f64[n]                  parameters in layout order
    f64[n]                  Adam first moments
    f64[n]                  Adam second moments
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, parse_text
from .energy import DEEN, UVB, EnergyModel
from .nets import ParamSet, layout_for
from .train import AdamState

MAGIC = b"UVB1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    model: EnergyModel
    adam: AdamState
    epoch: int


def _model_header(model: EnergyModel) -> dict[str, str]:
    if isinstance(model, UVB):
        return {
            "model.kind": "uvb",
            "model.sigma": repr(float(model.sigma)),
            "model.d": str(model.d),
            "model.dz": str(model.dz),
            "model.enc_hidden": " ".join(map(str, model.enc_hidden)),
            "model.dec_hidden": " ".join(map(str, model.dec_hidden)),
            "model.dec_readout": model.dec_readout,
            "model.k_samples": str(model.k_samples),
        }
    if isinstance(model, DEEN):
        return {
            "model.kind": "deen",
            "model.sigma": repr(float(model.sigma)),
            "model.d": str(model.d),
            "model.hidden": " ".join(map(str, model.hidden)),
        }
    raise CheckpointError(f"cannot checkpoint a {type(model).__name__}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split())


def _model_shell(h: dict[str, str]) -> EnergyModel:
    kind = h.get("model.kind")
    sigma = float(h["model.sigma"])
    d = int(h["model.d"])
    if kind == "uvb":
        return UVB(sigma=sigma, d=d, dz=int(h["model.dz"]), enc_hidden=_ints(h["model.enc_hidden"]),
                   dec_hidden=_ints(h["model.dec_hidden"]), dec_readout=h["model.dec_readout"],
                   k_samples=int(h["model.k_samples"]))
    if kind == "deen":
        return DEEN(sigma=sigma, d=d, hidden=_ints(h["model.hidden"]))
    raise CheckpointError(f"unknown model kind {kind!r}")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    header = dict(parse_text(ckpt.config.to_text()))
    header = {f"config.{k}": v for k, v in header.items()}
    header.update(_model_header(model))
    header["epoch"] = str(ckpt.epoch)
    header["adam.t"] = str(ckpt.adam.t)
    header["n_params"] = str(len(model.params))
    for name, (offset, shape) in model.params.layout.items():
        header[f"layout.{name}"] = " ".join(str(v) for v in (offset, *shape))
    text = "".join(f"{k} = {v}\n" for k, v in header.items()).encode("utf-8")
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (model.params.values, ckpt.adam.m, ckpt.adam.v)
    )
    return MAGIC + struct.pack("<II", VERSION, len(text)) + text + body


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a UVB1 checkpoint")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = parse_text(raw[12 : 12 + hlen].decode("utf-8"))
    config = TrainConfig.from_mapping({k[7:]: v for k, v in header.items() if k.startswith("config.")})
    shell = _model_shell(header)
    layout = layout_for(shell.nets)
    stored = {k[7:]: _ints(v) for k, v in header.items() if k.startswith("layout.")}
    if {k: (v[0], v[1:]) for k, v in stored.items()} != layout:
        raise CheckpointError(f"{path}: parameter layout does not match the model description")
    n = int(header["n_params"])
    body = raw[12 + hlen :]
    if len(body) != 3 * 8 * n:
        raise CheckpointError(f"{path}: expected {3 * 8 * n} payload bytes, found {len(body)}")
    arrays = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(3, n)
    model = dataclasses.replace(shell, params=ParamSet(arrays[0].copy(), layout))
    adam = AdamState(arrays[1].copy(), arrays[2].copy(), int(header["adam.t"]))
    return Checkpoint(config, model, adam, int(header["epoch"]))
