"""Checkpoint archives: single-file weight stores with content digests.

Entries are namespaced ("deploy/...", "verify/...", "stego/..."); the SHA-512
digest covers every entry's name, shape, dtype, and little-endian bytes plus
the embedded config snapshot, so any byte corruption fails loudly on load.
Licensed (stripped) checkpoints must not contain verify-namespace entries.
"""

from __future__ import annotations

import hashlib
import io
import os
import tempfile

import numpy as np
import torch

from .models import ModelSpec, build_model
from .stego import StegoNetwork
from .training import is_verification_entry, strip_verification

FORMAT_VERSION = 1


class ArchiveError(RuntimeError):
    pass


class ArchiveCorrupt(ArchiveError):
    pass


def _entries_digest(entries: dict, config_snapshot: str, kind: str) -> str:
    h = hashlib.sha512()
    h.update(kind.encode())
    h.update(config_snapshot.encode())
    for name in sorted(entries):
        tensor = entries[name]
        arr = tensor.detach().cpu().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.asarray(arr.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()


def save_archive(path, entries: dict, config_snapshot: str = "",
                 kind: str = "dual", extra: dict | None = None) -> str:
    """Write an archive atomically; returns its content digest."""
    digest = _entries_digest(entries, config_snapshot, kind)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "entries": {k: v.detach().cpu() for k, v in entries.items()},
        "config_snapshot": config_snapshot,
        "digest": digest,
        "extra": extra or {},
    }
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return digest


def load_archive(path) -> dict:
    """Load and digest-verify an archive."""
    try:
        with open(path, "rb") as fh:
            payload = torch.load(io.BytesIO(fh.read()), weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ArchiveCorrupt(f"cannot deserialize archive {path}: {exc}") from exc
    for field in ("kind", "entries", "config_snapshot", "digest"):
        if field not in payload:
            raise ArchiveCorrupt(f"archive {path} lacks field {field!r}")
    recomputed = _entries_digest(payload["entries"], payload["config_snapshot"],
                                 payload["kind"])
    if recomputed != payload["digest"]:
        raise ArchiveCorrupt(
            f"digest mismatch for {path}: stored {payload['digest'][:16]}..., "
            f"recomputed {recomputed[:16]}...")
    return payload


# ----- model checkpoints -----------------------------------------------------


def model_entries(model) -> dict:
    """State-dict tensors namespaced deploy/ vs verify/."""
    out = {}
    for name, tensor in model.state_dict().items():
        ns = "verify" if is_verification_entry(name) else "deploy"
        out[f"{ns}/{name}"] = tensor
    return out


def save_model_checkpoint(path, model, config_snapshot: str = "",
                          stripped: bool = False, extra: dict | None = None) -> str:
    if stripped:
        model = strip_verification(model)
    entries = model_entries(model)
    if stripped:
        leaked = [k for k in entries if k.startswith("verify/")]
        if leaked:
            raise ArchiveError(
                f"stripped checkpoint still carries verification entries: {leaked[:5]}")
    kind = "deployment" if stripped else "dual"
    extra = dict(extra or {})
    extra["model_spec"] = model.spec.to_dict()
    return save_archive(path, entries, config_snapshot, kind=kind, extra=extra)


def load_model_checkpoint(path):
    """Rebuild the model held in a checkpoint; returns (model, payload)."""
    payload = load_archive(path)
    if payload["kind"] not in ("dual", "deployment"):
        raise ArchiveError(f"{path} is not a model checkpoint (kind={payload['kind']})")
    spec = ModelSpec.from_dict(payload["extra"]["model_spec"])
    model = build_model(spec)
    if payload["kind"] == "deployment":
        model = strip_verification(model)
    state = {name.split("/", 1)[1]: tensor
             for name, tensor in payload["entries"].items()}
    model.load_state_dict(state)
    model.eval()
    return model, payload


# ----- stego checkpoints -------------------------------------------------------


def save_stego_checkpoint(path, network: StegoNetwork, config_snapshot: str = "",
                          extra: dict | None = None) -> str:
    entries = {f"stego/{k}": v for k, v in network.state_dict().items()}
    extra = dict(extra or {})
    extra["stego_arch"] = {
        "image_channels": network.image_channels,
        "num_blocks": len(network.blocks),
        "clamp": network.blocks[0].clamp if len(network.blocks) else 2.0,
        "growth": network.blocks[0].phi.conv1.out_channels if len(network.blocks) else 16,
    }
    return save_archive(path, entries, config_snapshot, kind="stego", extra=extra)


def load_stego_checkpoint(path):
    payload = load_archive(path)
    if payload["kind"] != "stego":
        raise ArchiveError(f"{path} is not a stego checkpoint (kind={payload['kind']})")
    arch = payload["extra"]["stego_arch"]
    net = StegoNetwork(image_channels=arch["image_channels"],
                       num_blocks=arch["num_blocks"], clamp=arch["clamp"],
                       growth=arch["growth"])
    state = {name.split("/", 1)[1]: tensor
             for name, tensor in payload["entries"].items()}
    net.load_state_dict(state)
    net.eval()
    return net, payload
