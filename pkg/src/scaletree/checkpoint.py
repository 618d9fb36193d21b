"""Binary checkpoints: named float64 payloads plus a JSON metadata line.

Layout: a magic line with the format version, one "meta" line of JSON
(epoch, optimizer scalars, config snapshot, parameter order), then per
tensor a textual header line "tensor <name> <n> <c> <h> <w>" followed by the
raw little-endian float64 payload, and a final "end" line. Adam moments are
stored as tensors named adam.m.<param> / adam.v.<param>. Saving a freshly
loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .model import ModelSpec, ScaleTreeNet, build_model
from .optim import AdamState

MAGIC = b"scaletree-ckpt 1\n"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Version mismatch, truncation, or shape disagreement."""


@dataclass
class Checkpoint:
    epoch: int
    config: dict
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    adam_scalars: dict


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    n, c, h, w = arr.shape
    f.write(f"tensor {name} {n} {c} {h} {w}\n".encode("ascii"))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path: str, model: ScaleTreeNet, opt_state: Optional[AdamState],
                    epoch: int, config: dict) -> None:
    params = model.named_parameters()
    names = list(params)
    meta = {
        "epoch": int(epoch),
        "config": dict(config),
        "param_order": names,
        "adam": None,
    }
    if opt_state is not None:
        meta["adam"] = {
            "lr": opt_state.lr,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "step": opt_state.step,
        }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(b"meta " + json.dumps(meta, sort_keys=True).encode("ascii") + b"\n")
        for name in names:
            _write_tensor(f, name, params[name].data)
        if opt_state is not None:
            for name, m in zip(names, opt_state.m):
                _write_tensor(f, f"adam.m.{name}", m)
            for name, v in zip(names, opt_state.v):
                _write_tensor(f, f"adam.v.{name}", v)
        f.write(b"end\n")


def _read_line(raw: bytes, pos: int, path: str) -> Tuple[bytes, int]:
    end = raw.find(b"\n", pos)
    if end < 0:
        raise CheckpointError(f"{path}: truncated header at byte offset {pos}")
    return raw[pos:end], end + 1


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not raw.startswith(MAGIC):
        head = raw[: len(MAGIC)].decode("ascii", "replace").strip()
        raise CheckpointError(
            f"{path}: unsupported format (found {head!r}, expected "
            f"version {FORMAT_VERSION})"
        )
    pos = len(MAGIC)
    line, pos = _read_line(raw, pos, path)
    if not line.startswith(b"meta "):
        raise CheckpointError(f"{path}: missing meta line at byte offset {pos}")
    meta = json.loads(line[5:].decode("ascii"))

    tensors: Dict[str, np.ndarray] = {}
    while True:
        line, pos = _read_line(raw, pos, path)
        if line == b"end":
            break
        fields = line.decode("ascii", "replace").split()
        if len(fields) != 6 or fields[0] != "tensor":
            raise CheckpointError(
                f"{path}: malformed tensor header {line!r} at byte offset {pos}"
            )
        name = fields[1]
        shape = tuple(int(v) for v in fields[2:])
        nbytes = 8 * int(np.prod(shape))
        payload = raw[pos : pos + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError(
                f"{path}: truncated payload for {name} at byte offset {pos} "
                f"(need {nbytes} bytes, have {len(payload)})"
            )
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        pos += nbytes

    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    adam_m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    adam_v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
    return Checkpoint(
        epoch=meta["epoch"],
        config=meta["config"],
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_scalars=meta.get("adam") or {},
    )


def model_spec_from_config(config: dict) -> ModelSpec:
    """Build a ModelSpec from the flat config snapshot keys."""
    return ModelSpec(
        enhancer_count=int(config.get("enhancer_count", 6)),
        d_channels=int(config.get("d_channels", 18)),
        head_channels=int(config.get("head_channels", 32)),
        in_channels=int(config.get("in_channels", 1)),
        block_kind=str(config.get("block_kind", "tree")),
        leaf_assignment=str(config.get("leaf_assignment", "reverse")),
        aux_levels=str(config.get("aux_levels", "hml")),
    )


def restore_model(path: str) -> Tuple[ScaleTreeNet, Optional[AdamState], int, dict]:
    """Rebuild the model from the config snapshot and load all state."""
    ckpt = load_checkpoint(path)
    model = build_model(model_spec_from_config(ckpt.config), seed=int(ckpt.config.get("seed", 0)))
    params = model.named_parameters()
    if set(params) != set(ckpt.params):
        missing = set(params) ^ set(ckpt.params)
        raise CheckpointError(
            f"{path}: parameter names do not match the rebuilt model "
            f"(difference: {sorted(missing)[:4]}...)"
        )
    for name, tensor in params.items():
        stored = ckpt.params[name]
        if stored.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: shape of {name} is {stored.shape}, model expects "
                f"{tensor.data.shape}"
            )
        tensor.data[...] = stored

    opt_state = None
    if ckpt.adam_scalars:
        names = list(params)
        opt_state = AdamState(
            lr=ckpt.adam_scalars["lr"],
            beta1=ckpt.adam_scalars["beta1"],
            beta2=ckpt.adam_scalars["beta2"],
            eps=ckpt.adam_scalars["eps"],
            step=ckpt.adam_scalars["step"],
            m=[ckpt.adam_m[n] for n in names],
            v=[ckpt.adam_v[n] for n in names],
        )
    return model, opt_state, ckpt.epoch, ckpt.config
