# app/storage.py - Versioned checkpoint directory and GaussianSet binary format
import json
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from app.models import GaussianSet, LocalFrameSet
from app.utils import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "GSAV-CKPT"
CHECKPOINT_VERSION = 1
GAUSSIAN_MAGIC = b"GSAVGS"
GAUSSIAN_VERSION = 2
_HEADER = struct.Struct("<6sHQQ")  # magic, version, N, point-feature width

# Field order and per-Gaussian widths of the binary body; each field is stored column-major
_FIELDS = (
    ("local_position", 3, "<f8"),
    ("log_scale", 3, "<f8"),
    ("rotation", 4, "<f8"),
    ("color_raw", 3, "<f8"),
    ("opacity_logit", 1, "<f8"),
    ("parent_face", 1, "<i8"),
    ("point_feature", None, "<f8"),
    ("canonical_position", 3, "<f8"),
)


# ================================
# GAUSSIAN SET FILES
# ================================

def write_gaussian_set(path: Path, gaussians: GaussianSet):
    """Header, then every field as one little-endian array, column after column"""
    g = gaussians.detach()
    num, width = len(g), g.point_feature.shape[1]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(GAUSSIAN_MAGIC, GAUSSIAN_VERSION, num, width))
        for name, _, dtype in _FIELDS:
            array = getattr(g, name).cpu().numpy().astype(dtype)
            f.write(array.tobytes(order="F"))


def read_gaussian_set(path: Path, dtype: torch.dtype = torch.float64) -> GaussianSet:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}")
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{Path(path).name} is truncated")
    magic, version, num, width = _HEADER.unpack_from(data, 0)
    if magic != GAUSSIAN_MAGIC:
        raise CheckpointError(f"{Path(path).name} has a bad header")
    if version != GAUSSIAN_VERSION:
        raise CheckpointError(f"{Path(path).name} has version {version}, expected {GAUSSIAN_VERSION}")

    offset = _HEADER.size
    tensors = {}
    for name, cols, np_dtype in _FIELDS:
        cols = width if cols is None else cols
        count = num * cols
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise CheckpointError(f"{Path(path).name} is truncated in field {name}")
        array = np.frombuffer(data, dtype=np_dtype, count=count, offset=offset)
        offset += nbytes
        shape = (num,) if name in ("opacity_logit", "parent_face") else (num, cols)
        t = torch.from_numpy(np.array(array.reshape(shape, order="F"), order="C"))
        tensors[name] = t.long() if name == "parent_face" else t.to(dtype)
    if offset != len(data):
        raise CheckpointError(f"{Path(path).name} has {len(data) - offset} trailing bytes")
    return GaussianSet(**tensors)


# ================================
# CHECKPOINT DIRECTORY
# ================================

@dataclass
class CheckpointData:
    meta: Dict[str, Any]
    gaussians: Dict[str, GaussianSet]
    networks: Dict[str, Any]
    optimizer: Optional[Dict[str, Any]] = None
    generator: Optional[torch.Tensor] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path, meta: Dict[str, Any], gaussians: Dict[str, GaussianSet], networks: Dict[str, Any],
                    optimizer: Optional[Dict[str, Any]] = None, generator: Optional[torch.Tensor] = None,
                    extra: Optional[Dict[str, Any]] = None):
    """
    Directory layout:
        checkpoint.meta   JSON header (magic, version, stage, step, configs)
        <name>.gs         one GaussianSet binary per avatar part
        networks.pt       network weights, optimizer moments, RNG state, avatar tensors
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    header = {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION,
              "parts": sorted(gaussians), **meta}
    for name, g in gaussians.items():
        write_gaussian_set(root / f"{name}.gs", g)
    torch.save({
        "networks": networks,
        "optimizer": optimizer,
        "generator": generator,
        "extra": extra or {},
    }, root / "networks.pt")
    # meta last: a directory without it is an incomplete checkpoint
    (root / "checkpoint.meta").write_text(json.dumps(header, indent=2))
    logger.info(f"💾 Checkpoint written to {root} (stage {meta.get('stage')}, step {meta.get('step')})")


def load_checkpoint(path, dtype: torch.dtype = torch.float64) -> CheckpointData:
    root = Path(path)
    try:
        header = json.loads((root / "checkpoint.meta").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint.meta in {root}: {e}")
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{root} is not a checkpoint (bad magic)")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} is incompatible with "
                              f"version {CHECKPOINT_VERSION}")

    gaussians = {name: read_gaussian_set(root / f"{name}.gs", dtype) for name in header.get("parts", [])}
    try:
        blob = torch.load(root / "networks.pt", map_location="cpu")
    except (OSError, RuntimeError, EOFError) as e:
        raise CheckpointError(f"cannot read networks.pt: {e}")
    return CheckpointData(
        meta=header,
        gaussians=gaussians,
        networks=blob.get("networks", {}),
        optimizer=blob.get("optimizer"),
        generator=blob.get("generator"),
        extra=blob.get("extra", {}),
    )


def frames_to_dict(frames: LocalFrameSet) -> Dict[str, torch.Tensor]:
    return {"rotation": frames.rotation, "origin": frames.origin, "scale": frames.scale}


def frames_from_dict(data: Dict[str, torch.Tensor]) -> LocalFrameSet:
    return LocalFrameSet(rotation=data["rotation"], origin=data["origin"], scale=data["scale"])
