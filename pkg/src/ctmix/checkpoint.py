"""Checkpoint blob format and pretrained-weight loading.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON header
``{"meta": {...}, "tensors": [{name, shape, dtype, offset}, ...]}``, then the
raw C-order tensor bytes. Offsets are relative to the payload start.

A mapping spec is plain text, one ``old_prefix -> new_prefix`` rewrite per
line; ``#`` starts a comment.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, NotFound
from .modeling import INFLATE_CENTER, INFLATE_REPEAT, inflate_2d_weights

MAGIC = b"CTMIXCK1"

logger = logging.getLogger(__name__)


def save_checkpoint(path: Path | str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write tensors and metadata as one binary blob."""
    entries = []
    payload = io.BytesIO()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": payload.tell(),
            }
        )
        payload.write(arr.tobytes())
    header = json.dumps({"meta": meta, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def load_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint blob back into (tensors, meta)."""
    path = Path(path)
    if not path.exists():
        raise NotFound(f"checkpoint does not exist: {path}")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint blob (bad magic)")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    try:
        header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc
    payload = blob[header_start + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"tensor {entry['name']} overruns payload in {path}")
        arr = np.frombuffer(payload[start:end], dtype=dtype).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, header["meta"]


def parse_mapping_spec(text: str) -> list[tuple[str, str]]:
    """Parse ``old_prefix -> new_prefix`` lines into rewrite pairs."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" not in line:
            raise CheckpointError(f"mapping line {lineno} lacks '->': {line!r}")
        old, new = (part.strip() for part in line.split("->", 1))
        rules.append((old, new))
    # longest prefix wins when several rules match
    rules.sort(key=lambda r: len(r[0]), reverse=True)
    return rules


def apply_mapping(name: str, rules: list[tuple[str, str]]) -> str:
    for old, new in rules:
        if name.startswith(old):
            return new + name[len(old) :]
    return name


def load_pretrained(
    model: torch.nn.Module,
    path: Path | str,
    mapping: str | None = None,
    strict: bool = True,
    inflate_mode: str | None = None,
) -> dict:
    """Initialize model tensors from a checkpoint, with renames and inflation.

    2D conv kernels in the checkpoint are inflated to the model's 3D shape
    when ``inflate_mode`` is given ("center" or "repeat"). In strict mode any
    missing or shape-mismatched tensor raises CheckpointError listing the
    offending names; otherwise they are skipped with a warning and reported.
    """
    if inflate_mode not in (None, INFLATE_CENTER, INFLATE_REPEAT):
        raise CheckpointError(f"unknown inflation mode {inflate_mode!r}")
    tensors, meta = load_checkpoint(path)
    rules = parse_mapping_spec(mapping) if mapping else []
    renamed = {apply_mapping(name, rules): arr for name, arr in tensors.items()}

    state = model.state_dict()
    loaded, missing, mismatched = [], [], []
    new_state = {}
    for name, param in state.items():
        if name not in renamed:
            missing.append(name)
            continue
        src = renamed[name]
        target_shape = tuple(param.shape)
        if tuple(src.shape) == target_shape:
            new_state[name] = torch.from_numpy(np.ascontiguousarray(src)).to(param.dtype)
            loaded.append(name)
        elif (
            inflate_mode is not None
            and src.ndim == 4
            and len(target_shape) == 5
            and tuple(src.shape[:2]) == target_shape[:2]
            and tuple(src.shape[2:]) == target_shape[3:]
        ):
            new_state[name] = inflate_2d_weights(
                torch.from_numpy(np.ascontiguousarray(src)), target_shape[2], inflate_mode
            ).to(param.dtype)
            loaded.append(name)
        else:
            mismatched.append(f"{name}: checkpoint {tuple(src.shape)} vs model {target_shape}")
    unused = sorted(set(renamed) - set(loaded))

    if strict and (missing or mismatched or unused):
        raise CheckpointError(
            "strict load failed; "
            f"missing={missing[:8]} mismatched={mismatched[:8]} unused={unused[:8]}"
        )
    if missing or mismatched:
        logger.warning(
            "partial checkpoint load: %d missing (fresh init), %d mismatched, %d unused",
            len(missing), len(mismatched), len(unused),
        )
    model.load_state_dict({**{k: v for k, v in state.items()}, **new_state})
    return {"loaded": loaded, "missing": missing, "mismatched": mismatched, "unused": unused, "meta": meta}


def model_state_numpy(model: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Detach a model's state dict to numpy arrays, optionally prefixed."""
    return {
        prefix + name: tensor.detach().cpu().numpy().copy()
        for name, tensor in model.state_dict().items()
    }
