"""Export trained checkpoints into the FGW1 named-tensor container.

FGW1 is a flat binary bundle: the magic bytes "FGW1", a little-endian u32
header length, a UTF-8 JSON manifest of [{name, shape, dtype: "f32"}, ...]
sorted ascending by name, then each tensor's raw little-endian float32 data
in manifest order, C layout. Readers validate strictly, so this writer is
strict too: every declared tensor must arrive complete, in float32, at its
declared shape.

A conversion is driven by a name map rather than hardcoded tensor names. The
map lists, for every container tensor, which checkpoint entry feeds it, the
shape it must have once written, and optionally a transpose flag for weights
the source framework stores the other way around. Checkpoint entries the map
never mentions are ignored; a container tensor without a usable source is a
hard error.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FGW1"
_HEADER_LEN = struct.Struct("<I")

# torch checkpoints often wrap the state dict one level down under one of these
_STATE_DICT_KEYS = ("state_dict", "model_state_dict", "model", "weights")


class NameMapError(ValueError):
    """The name-map file is malformed or self-contradictory."""


class CheckpointError(ValueError):
    """The checkpoint cannot be read or does not satisfy the name map."""


@dataclass(frozen=True)
class MapEntry:
    """One container tensor: its source, required written shape, orientation."""

    source: str
    target: str
    shape: tuple[int, ...]
    transpose: bool = False

    @property
    def source_shape(self) -> tuple[int, ...]:
        return self.shape[::-1] if self.transpose else self.shape


def load_name_map(path: str | Path) -> list[MapEntry]:
    """Parse and validate a name-map file.

    The file is JSON: {"entries": [{"source", "target", "shape",
    "transpose"?}, ...]}. Every target may appear only once, so a valid map
    pins down the complete output manifest.
    """
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise NameMapError(f"cannot read name map {path}: {exc}") from exc
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise NameMapError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("entries"), list):
        raise NameMapError(f"{path}: expected an object with an \"entries\" array")
    if not obj["entries"]:
        raise NameMapError(f"{path}: the entries array is empty")

    entries: list[MapEntry] = []
    seen_targets: set[str] = set()
    for pos, item in enumerate(obj["entries"]):
        where = f"{path}: entry {pos}"
        if not isinstance(item, dict):
            raise NameMapError(f"{where}: not an object")
        source = item.get("source")
        target = item.get("target")
        shape = item.get("shape")
        transpose = item.get("transpose", False)
        if not isinstance(source, str) or not source:
            raise NameMapError(f"{where}: \"source\" must be a non-empty string")
        if not isinstance(target, str) or not target:
            raise NameMapError(f"{where}: \"target\" must be a non-empty string")
        if (not isinstance(shape, list) or not shape
                or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape)):
            raise NameMapError(f"{where}: \"shape\" must be a non-empty array of sizes")
        if not isinstance(transpose, bool):
            raise NameMapError(f"{where}: \"transpose\" must be true or false")
        if transpose and len(shape) != 2:
            raise NameMapError(
                f"{where}: transpose only applies to 2-d tensors, shape is {shape}")
        if target in seen_targets:
            raise NameMapError(
                f"{path}: target {target!r} mapped more than once; each appears exactly once")
        seen_targets.add(target)
        entries.append(MapEntry(source, target, tuple(shape), transpose))
    return entries


def _to_float32_array(name: str, value) -> np.ndarray:
    """Coerce one checkpoint entry to a float32 ndarray, refusing other dtypes."""
    try:
        import torch
    except ImportError:
        torch = None
    if torch is not None and isinstance(value, torch.Tensor):
        if value.dtype != torch.float32:
            raise CheckpointError(
                f"checkpoint tensor {name!r} is {value.dtype}; only float32 is supported")
        return value.detach().cpu().contiguous().numpy()
    arr = np.asarray(value)
    if arr.dtype != np.float32:
        raise CheckpointError(
            f"checkpoint tensor {name!r} is {arr.dtype}; only float32 is supported")
    return arr


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Load a checkpoint as a flat name -> float32 array mapping.

    `.npz` archives load through numpy. Anything else is treated as a torch
    checkpoint (torch.load with weights_only=True); a dict wrapped under a
    conventional state-dict key is unwrapped one level. Dtype checks happen
    lazily in remap_tensors, so unused non-float entries never hurt.
    """
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    if p.suffix == ".npz":
        try:
            with np.load(p) as archive:
                return {name: archive[name] for name in archive.files}
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read npz checkpoint {path}: {exc}") from exc
    try:
        import torch
    except ImportError as exc:
        raise CheckpointError(
            f"{path}: reading framework checkpoints needs the torch extra installed") from exc
    try:
        state = torch.load(p, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if isinstance(state, dict):
        for key in _STATE_DICT_KEYS:
            if isinstance(state.get(key), dict):
                state = state[key]
                break
    if not isinstance(state, dict):
        raise CheckpointError(f"{path}: checkpoint is not a name -> tensor mapping")
    return dict(state)


def remap_tensors(
    checkpoint: Mapping[str, np.ndarray],
    entries: list[MapEntry],
) -> dict[str, np.ndarray]:
    """Apply the name map: rename, optionally transpose, validate shapes.

    Raises:
        CheckpointError: a source is absent, has a dtype other than float32,
            or its shape disagrees with what the map declares.
    """
    out: dict[str, np.ndarray] = {}
    for entry in entries:
        if entry.source not in checkpoint:
            raise CheckpointError(
                f"checkpoint has no tensor {entry.source!r} (needed for {entry.target!r})")
        arr = _to_float32_array(entry.source, checkpoint[entry.source])
        if tuple(arr.shape) != entry.source_shape:
            raise CheckpointError(
                f"tensor {entry.source!r} has shape {tuple(arr.shape)}, but "
                f"{entry.target!r} needs {entry.source_shape}"
                + (" (before transpose)" if entry.transpose else ""))
        out[entry.target] = np.ascontiguousarray(arr.T if entry.transpose else arr)
    return out


def write_container(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Serialize named float32 tensors as FGW1, manifest sorted by name."""
    if not tensors:
        raise NameMapError("refusing to write an empty container")
    manifest = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = tensors[name]
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} is {arr.dtype}; FGW1 holds only float32")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "f32"})
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(MAGIC + _HEADER_LEN.pack(len(header)) + header + bytes(payload))


def shape_report(entries: list[MapEntry]) -> str:
    """Human-readable summary of what was written, one line per tensor."""
    rows = sorted(entries, key=lambda e: e.target)
    width = max(len(e.target) for e in rows)
    lines = []
    total = 0
    for e in rows:
        count = int(np.prod(e.shape)) if e.shape else 1
        total += count
        note = f"  (transposed from {e.source})" if e.transpose else ""
        lines.append(f"{e.target:<{width}}  {'x'.join(map(str, e.shape))}{note}")
    lines.append(f"{len(rows)} tensors, {total} parameters")
    return "\n".join(lines)


def convert_checkpoint(
    checkpoint_path: str | Path,
    map_path: str | Path,
    out_path: str | Path,
) -> list[MapEntry]:
    """Full conversion: read, remap, validate, write. Returns the map entries."""
    entries = load_name_map(map_path)
    checkpoint = read_checkpoint(checkpoint_path)
    tensors = remap_tensors(checkpoint, entries)
    write_container(out_path, tensors)
    return entries
