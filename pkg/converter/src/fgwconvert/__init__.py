"""Checkpoint-to-FGW1 export tool."""

from .convert import (
    CheckpointError,
    MapEntry,
    NameMapError,
    convert_checkpoint,
    load_name_map,
    read_checkpoint,
    remap_tensors,
    shape_report,
    write_container,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "MapEntry",
    "NameMapError",
    "convert_checkpoint",
    "load_name_map",
    "read_checkpoint",
    "remap_tensors",
    "shape_report",
    "write_container",
    "__version__",
]
