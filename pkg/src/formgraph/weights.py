"""Model parameter container and its binary file format.

The on-disk format is deliberately minimal so other toolchains can produce it:

    bytes 0..3   magic "FGW1"
    bytes 4..7   little-endian uint32, byte length of the manifest
    manifest     UTF-8 JSON array of {"name", "shape", "dtype": "f32"},
                 sorted ascending by name
    payload      each tensor's raw little-endian float32 data, C order,
                 concatenated in manifest order

A given set of named tensors has exactly one valid encoding, so write followed
by read is bit-exact and files can be compared byte for byte.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .constants import (
    ATTENTION_HEADS,
    HIDDEN_DIM,
    STAGE_DEPTHS,
    VISUAL_FEATURE_DIM,
)
from .errors import UsageError, WeightFormatError
from .features import edge_spatial_dim, node_spatial_dim
from .gnn import AttentionWeights, GCNStage, GNBlock, LinearHead, Mlp2
from .proposal import ProposalWeights, proposal_feature_dim

MAGIC = b"FGW1"
_HEADER_LEN = struct.Struct("<I")

# mlp2 input widths inside a block: [edge; src; dst] and [aggregate; node]
_EDGE_MLP_IN = 3 * HIDDEN_DIM
_NODE_MLP_IN = 2 * HIDDEN_DIM
_EDGE_SCORE_COUNT = 4


def expected_manifest(class_count: int) -> dict[str, tuple[int, ...]]:
    """Every tensor name the model uses, with its shape, for one class count."""
    if class_count < 1:
        raise UsageError(f"class count must be positive, got {class_count}")
    c = class_count
    shapes: dict[str, tuple[int, ...]] = {
        "proposal.w1": (HIDDEN_DIM, proposal_feature_dim(c)),
        "proposal.b1": (HIDDEN_DIM,),
        "proposal.w2": (1, HIDDEN_DIM),
        "proposal.b2": (1,),
        "init.node.w": (HIDDEN_DIM, VISUAL_FEATURE_DIM + node_spatial_dim(c)),
        "init.node.b": (HIDDEN_DIM,),
        "init.edge.w": (HIDDEN_DIM, VISUAL_FEATURE_DIM + edge_spatial_dim(c)),
        "init.edge.b": (HIDDEN_DIM,),
    }
    for stage, depth in enumerate(STAGE_DEPTHS, start=1):
        for block in range(1, depth + 1):
            prefix = f"stage{stage}.block{block}"
            for role, width in (("edge_mlp", _EDGE_MLP_IN), ("node_mlp", _NODE_MLP_IN)):
                shapes[f"{prefix}.{role}.w1"] = (HIDDEN_DIM, width)
                shapes[f"{prefix}.{role}.b1"] = (HIDDEN_DIM,)
                shapes[f"{prefix}.{role}.gamma"] = (HIDDEN_DIM,)
                shapes[f"{prefix}.{role}.beta"] = (HIDDEN_DIM,)
                shapes[f"{prefix}.{role}.w2"] = (HIDDEN_DIM, HIDDEN_DIM)
                shapes[f"{prefix}.{role}.b2"] = (HIDDEN_DIM,)
            for proj in ("wq", "wk", "wv", "wo"):
                shapes[f"{prefix}.attn.{proj}"] = (HIDDEN_DIM, HIDDEN_DIM)
        shapes[f"stage{stage}.node_head.w"] = (c, HIDDEN_DIM)
        shapes[f"stage{stage}.node_head.b"] = (c,)
        shapes[f"stage{stage}.edge_head.w"] = (_EDGE_SCORE_COUNT, HIDDEN_DIM)
        shapes[f"stage{stage}.edge_head.b"] = (_EDGE_SCORE_COUNT,)
        if stage > 1:
            shapes[f"stage{stage}.reintro_node.w"] = (
                HIDDEN_DIM,
                HIDDEN_DIM + VISUAL_FEATURE_DIM + node_spatial_dim(c),
            )
            shapes[f"stage{stage}.reintro_node.b"] = (HIDDEN_DIM,)
            shapes[f"stage{stage}.reintro_edge.w"] = (
                HIDDEN_DIM,
                HIDDEN_DIM + VISUAL_FEATURE_DIM + edge_spatial_dim(c),
            )
            shapes[f"stage{stage}.reintro_edge.b"] = (HIDDEN_DIM,)
    return shapes


class ModelWeights:
    """Validated bundle of every named tensor the pipeline needs."""

    def __init__(self, tensors: Mapping[str, np.ndarray], class_count: int):
        expected = expected_manifest(class_count)
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing:
            raise WeightFormatError(f"missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        if extra:
            raise WeightFormatError(f"unexpected tensors: {extra[:5]}{'...' if len(extra) > 5 else ''}")
        for name, shape in expected.items():
            got = tuple(tensors[name].shape)
            if got != shape:
                raise WeightFormatError(f"tensor {name} has shape {got}, expected {shape}")
        self.class_count = class_count
        self.tensors = {name: np.asarray(tensors[name]) for name in sorted(expected)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["proposal.w1"].dtype

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights({k: v.astype(dtype) for k, v in self.tensors.items()}, self.class_count)

    # -- structured accessors ------------------------------------------------

    def proposal(self) -> ProposalWeights:
        t = self.tensors
        return ProposalWeights(t["proposal.w1"], t["proposal.b1"], t["proposal.w2"], t["proposal.b2"])

    def init_node(self) -> LinearHead:
        return LinearHead(self.tensors["init.node.w"], self.tensors["init.node.b"])

    def init_edge(self) -> LinearHead:
        return LinearHead(self.tensors["init.edge.w"], self.tensors["init.edge.b"])

    def _mlp2(self, prefix: str) -> Mlp2:
        t = self.tensors
        return Mlp2(
            w1=t[f"{prefix}.w1"],
            b1=t[f"{prefix}.b1"],
            w2=t[f"{prefix}.w2"],
            b2=t[f"{prefix}.b2"],
            gamma=t[f"{prefix}.gamma"],
            beta=t[f"{prefix}.beta"],
        )

    def stage(self, index: int) -> GCNStage:
        """Assemble stage `index` (1-based) from its tensors."""
        if not 1 <= index <= len(STAGE_DEPTHS):
            raise UsageError(f"stage index {index} outside 1..{len(STAGE_DEPTHS)}")
        t = self.tensors
        blocks = []
        for b in range(1, STAGE_DEPTHS[index - 1] + 1):
            prefix = f"stage{index}.block{b}"
            blocks.append(
                GNBlock(
                    edge_mlp=self._mlp2(f"{prefix}.edge_mlp"),
                    node_mlp=self._mlp2(f"{prefix}.node_mlp"),
                    attn=AttentionWeights(
                        wq=t[f"{prefix}.attn.wq"],
                        wk=t[f"{prefix}.attn.wk"],
                        wv=t[f"{prefix}.attn.wv"],
                        wo=t[f"{prefix}.attn.wo"],
                        heads=ATTENTION_HEADS,
                    ),
                )
            )
        reintro_node = reintro_edge = None
        if index > 1:
            reintro_node = LinearHead(t[f"stage{index}.reintro_node.w"], t[f"stage{index}.reintro_node.b"])
            reintro_edge = LinearHead(t[f"stage{index}.reintro_edge.w"], t[f"stage{index}.reintro_edge.b"])
        return GCNStage(
            blocks=tuple(blocks),
            node_head=LinearHead(t[f"stage{index}.node_head.w"], t[f"stage{index}.node_head.b"]),
            edge_head=LinearHead(t[f"stage{index}.edge_head.w"], t[f"stage{index}.edge_head.b"]),
            reintro_node=reintro_node,
            reintro_edge=reintro_edge,
        )

    # -- construction and io ---------------------------------------------------

    @classmethod
    def random(cls, seed: int, class_count: int, dtype=np.float32) -> "ModelWeights":
        """Fresh untrained weights: He-ish fan-in scaling, neutral norms, zero biases.

        Tensors are drawn in canonical (sorted-name) order so a seed fully
        determines the result.
        """
        rng = np.random.default_rng(seed)
        tensors: dict[str, np.ndarray] = {}
        for name, shape in sorted(expected_manifest(class_count).items()):
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("b", "b1", "b2", "beta"):
                tensors[name] = np.zeros(shape, dtype=dtype)
            elif leaf == "gamma":
                tensors[name] = np.ones(shape, dtype=dtype)
            else:
                fan_in = shape[-1]
                draw = rng.standard_normal(shape) / math.sqrt(fan_in)
                tensors[name] = draw.astype(dtype)
        return cls(tensors, class_count)

    def save(self, path: str | Path) -> None:
        """Write as FGW1; requires float32 tensors so the write is lossless."""
        if self.dtype != np.float32:
            raise UsageError(f"FGW1 stores float32; convert weights from {self.dtype} first")
        write_fgw(path, self.tensors)

    @classmethod
    def load(cls, path: str | Path) -> "ModelWeights":
        tensors = read_fgw(path)
        if "proposal.w1" not in tensors:
            raise WeightFormatError("container lacks proposal.w1; cannot infer class count")
        feat = tensors["proposal.w1"].shape[-1]
        c, rem = divmod(feat - 25, 2)
        if rem or c < 1:
            raise WeightFormatError(f"proposal feature width {feat} matches no class count")
        return cls(tensors, c)


def write_fgw(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Serialize named float32 tensors to the FGW1 container."""
    if not tensors:
        raise UsageError("refusing to write an empty container")
    manifest = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = tensors[name]
        if not isinstance(name, str) or not name:
            raise UsageError(f"invalid tensor name {name!r}")
        if arr.dtype != np.float32:
            raise UsageError(f"tensor {name} is {arr.dtype}; FGW1 holds only float32")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "f32"})
        payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + _HEADER_LEN.pack(len(header)) + header + bytes(payload)
    Path(path).write_bytes(blob)


def read_fgw(path: str | Path) -> dict[str, np.ndarray]:
    """Parse an FGW1 container into named float32 arrays.

    Raises:
        WeightFormatError: bad magic, malformed or out-of-order manifest,
            unsupported dtype, or a payload whose length disagrees with the
            manifest.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise WeightFormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise WeightFormatError(f"{path}: not an FGW1 container")
    (header_len,) = _HEADER_LEN.unpack_from(blob, 4)
    if 8 + header_len > len(blob):
        raise WeightFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, list) or not manifest:
        raise WeightFormatError(f"{path}: manifest must be a non-empty array")

    names = []
    for entry in manifest:
        if not isinstance(entry, dict) or not {"name", "shape", "dtype"} <= set(entry):
            raise WeightFormatError(f"{path}: manifest entry {entry!r} lacks name/shape/dtype")
        if entry["dtype"] != "f32":
            raise WeightFormatError(f"{path}: unsupported dtype {entry['dtype']!r}")
        names.append(entry["name"])
    if names != sorted(names) or len(set(names)) != len(names):
        raise WeightFormatError(f"{path}: manifest names are not unique ascending")

    tensors: dict[str, np.ndarray] = {}
    offset = 8 + header_len
    for entry in manifest:
        shape = tuple(int(d) for d in entry["shape"])
        if any(d < 0 for d in shape):
            raise WeightFormatError(f"{path}: negative dimension in {entry['name']}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise WeightFormatError(f"{path}: payload truncated at tensor {entry['name']}")
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = flat.reshape(shape).astype(np.float32, copy=True)
        offset += nbytes
    if offset != len(blob):
        raise WeightFormatError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return tensors
