"""Versioned checkpoint container.

Layout: 8-byte magic ``TMCKPT01``, little-endian uint32 header length, a
UTF-8 JSON header (format version, config, config hash, step counter, and
per-tensor name/shape/dtype/offset records), the concatenated little-endian
tensor payloads, and a trailing SHA-256 digest of everything before it.
Loading is all-or-nothing: digest, version, and config hash are verified
before any tensor is materialized.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigHashMismatch, VersionMismatch
from .model import MatcherConfig, MatcherModel, build_model

MAGIC = b"TMCKPT01"
FORMAT_VERSION = 1

_TORCH_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
}


def _tensor_bytes(t: torch.Tensor) -> tuple[bytes, str, list[int]]:
    arr = t.detach().cpu().numpy()
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return np.ascontiguousarray(le).tobytes(), arr.dtype.name, list(arr.shape)


def named_state_tensors(model: MatcherModel, optimizer: torch.optim.Optimizer | None) -> dict[str, torch.Tensor]:
    """Model tensors plus optimizer moments keyed by parameter name."""
    tensors = dict(model.state_dict())
    if optimizer is not None:
        name_of = {id(p): n for n, p in model.named_parameters()}
        for param, state in optimizer.state.items():
            pname = name_of.get(id(param))
            if pname is None:
                continue
            for key, value in state.items():
                if isinstance(value, torch.Tensor):
                    tensors[f"optim.{pname}.{key}"] = value
    return tensors


def save_checkpoint(
    path: Path | str,
    model: MatcherModel,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
) -> Path:
    tensors = named_state_tensors(model, optimizer)
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        data, dtype, shape = _tensor_bytes(tensors[name])
        entries.append(
            {
                "name": name,
                "shape": shape,
                "dtype": dtype,
                "offset": len(payload),
                "nbytes": len(data),
            }
        )
        payload.extend(data)
    header = json.dumps(
        {
            "version": FORMAT_VERSION,
            "config": model.cfg.to_dict(),
            "config_hash": model.cfg.hash(),
            "step": step,
            "entries": entries,
        },
        sort_keys=True,
    ).encode()
    body = MAGIC + struct.pack("<I", len(header)) + header + bytes(payload)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.write_bytes(body + digest)
    return path


def read_checkpoint_raw(path: Path | str) -> tuple[dict, bytes]:
    """Verify container integrity and return (header, payload bytes)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 + 32 or data[: len(MAGIC)] != MAGIC:
        raise VersionMismatch(f"{path} is not a checkpoint container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IOError(f"{path}: checkpoint digest mismatch (truncated or corrupted)")
    header_len = struct.unpack("<I", body[len(MAGIC) : len(MAGIC) + 4])[0]
    header_start = len(MAGIC) + 4
    if header_start + header_len > len(body):
        raise IOError(f"{path}: truncated checkpoint header")
    header = json.loads(body[header_start : header_start + header_len].decode())
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"unsupported checkpoint format version {header.get('version')}"
        )
    return header, body[header_start + header_len :]


def load_checkpoint(
    path: Path | str,
    expected_cfg: MatcherConfig | None = None,
    force: bool = False,
) -> tuple[MatcherModel, dict[str, torch.Tensor], dict]:
    """Rebuild the model (and raw optimizer tensors) from a container.

    When ``expected_cfg`` is given its hash must match the stored one
    unless ``force`` is set."""
    header, payload = read_checkpoint_raw(path)
    cfg = MatcherConfig.from_dict(header["config"])
    if expected_cfg is not None and expected_cfg.hash() != header["config_hash"] and not force:
        raise ConfigHashMismatch(
            f"checkpoint built for config {header['config_hash']}, expected {expected_cfg.hash()}"
        )
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["entries"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise IOError(f"{path}: truncated tensor payload for {entry['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<"))
        arr = arr.reshape(entry["shape"]).astype(entry["dtype"])
        tensors[entry["name"]] = torch.from_numpy(arr)
    model = build_model(cfg, seed=0)
    model_state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    model.load_state_dict(model_state)
    optim_state = {k[len("optim.") :]: v for k, v in tensors.items() if k.startswith("optim.")}
    return model, optim_state, header


def restore_optimizer(
    optimizer: torch.optim.Optimizer, model: MatcherModel, optim_state: dict[str, torch.Tensor]
) -> None:
    """Install saved moments into a freshly built optimizer."""
    params = dict(model.named_parameters())
    grouped: dict[str, dict[str, torch.Tensor]] = {}
    for key, tensor in optim_state.items():
        pname, field_name = key.rsplit(".", 1)
        grouped.setdefault(pname, {})[field_name] = tensor
    for pname, state in grouped.items():
        optimizer.state[params[pname]] = dict(state)
