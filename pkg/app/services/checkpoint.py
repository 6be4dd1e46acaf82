"""
Checkpoint container and its binary file format.

Layout (all integers little-endian):
    b"PSGT" | u32 version | u32 len + topology JSON | u32 len + metadata JSON
    | u32 record count | records

Each record is u8 kind (1 param, 2 optimizer, 3 svm), u16 len + UTF-8 name,
u8 dtype tag (1 float32, 2 float64), u8 ndim, ndim x u32 dims, payload.
JSON is written with sorted keys so save -> load -> save is byte-exact.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, Optional, Union

import numpy as np

from ..exceptions import CheckpointFormatError, CheckpointLoadError

if TYPE_CHECKING:
    from .networks import ModelGraph
    from .training import AdadeltaState

logger = logging.getLogger(__name__)

MAGIC = b"PSGT"
FORMAT_VERSION = 1

KIND_PARAM = 1
KIND_OPTIMIZER = 2
KIND_SVM = 3
_KINDS = {KIND_PARAM: "params", KIND_OPTIMIZER: "optimizer", KIND_SVM: "svm"}

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}


@dataclass
class Checkpoint:
    """Serialized model parameters, optional optimizer state and SVM head."""
    topology: Dict[str, object]
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    svm: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_model(
        cls,
        model: "ModelGraph",
        state: Optional["AdadeltaState"] = None,
        metadata: Optional[Dict[str, object]] = None,
    ) -> "Checkpoint":
        """Snapshot (copy) the model parameters and optimizer accumulators."""
        metadata = dict(metadata or {})
        optimizer = {}
        if state is not None:
            for name in state.eg2:
                optimizer[f"eg2/{name}"] = state.eg2[name].astype(np.float32, copy=True)
                optimizer[f"edx2/{name}"] = state.edx2[name].astype(np.float32, copy=True)
            metadata["optimizer"] = {"name": "adadelta", "rho": state.rho, "eps": state.eps, "lr": state.lr}
        return cls(
            topology=model.topology(),
            params={name: value.astype(np.float32, copy=True) for name, value in model.params.items()},
            optimizer=optimizer,
            metadata=metadata,
        )

    def to_model(self) -> "ModelGraph":
        """Rebuild the graph described by the topology and load the weights."""
        from .networks import ModelGraph

        model = ModelGraph.from_topology(self.topology)
        restore_into(model, self)
        return model

    def optimizer_state(self) -> Optional["AdadeltaState"]:
        from .training import AdadeltaState

        if not self.optimizer:
            return None
        settings = self.metadata.get("optimizer", {})
        names = [key.split("/", 1)[1] for key in self.optimizer if key.startswith("eg2/")]
        return AdadeltaState(
            eg2={name: self.optimizer[f"eg2/{name}"].copy() for name in names},
            edx2={name: self.optimizer[f"edx2/{name}"].copy() for name in names},
            rho=float(settings.get("rho", 0.95)),
            eps=float(settings.get("eps", 1e-6)),
            lr=float(settings.get("lr", 1.0)),
        )


def restore_into(model: "ModelGraph", checkpoint: Checkpoint, include: Optional[Iterable[str]] = None) -> "ModelGraph":
    """
    Copy checkpoint parameters into a model in place.

    Args:
        model: Target graph
        checkpoint: Source weights
        include: Parameter names to copy (all model parameters when None)

    Raises:
        CheckpointLoadError: missing parameter or shape mismatch, naming it
    """
    targets = model.params
    names = list(include) if include is not None else list(targets)
    for name in names:
        if name not in targets:
            raise CheckpointLoadError(f"Model has no parameter '{name}'")
        if name not in checkpoint.params:
            raise CheckpointLoadError(f"Checkpoint is missing parameter '{name}'")
        source = checkpoint.params[name]
        if source.shape != targets[name].shape:
            raise CheckpointLoadError(
                f"Parameter '{name}' has shape {source.shape} in checkpoint, model expects {targets[name].shape}"
            )
    for name in names:
        targets[name][...] = checkpoint.params[name]
    return model


def _json_block(payload: Dict[str, object]) -> bytes:
    data = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(data)) + data


def _record(kind: int, name: str, array: np.ndarray) -> bytes:
    dtype = np.dtype(array.dtype).newbyteorder("<")
    if dtype not in _TAGS:
        array = array.astype("<f4")
        dtype = np.dtype("<f4")
    encoded = name.encode("utf-8")
    header = struct.pack("<BH", kind, len(encoded)) + encoded
    header += struct.pack("<BB", _TAGS[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    records = [
        _record(kind, name, array)
        for kind, group in ((KIND_PARAM, checkpoint.params), (KIND_OPTIMIZER, checkpoint.optimizer), (KIND_SVM, checkpoint.svm))
        for name, array in group.items()
    ]
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _json_block(checkpoint.topology),
        _json_block(checkpoint.metadata),
        struct.pack("<I", len(records)),
        *records,
    ]
    return b"".join(parts)


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(checkpoint))
    logger.info(f"Saved checkpoint to {path} ({len(checkpoint.params)} parameters)")
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if size < 0 or end > len(self.data):
            raise CheckpointFormatError(f"Checkpoint truncated while reading {what}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def json(self, what: str) -> Dict[str, object]:
        (size,) = self.unpack("<I", what)
        try:
            return json.loads(self.take(size, what).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"Corrupt {what}: {e}")


def parse_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("Not a checkpoint file (bad magic)")
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    topology = reader.json("topology")
    metadata = reader.json("metadata")
    (count,) = reader.unpack("<I", "record count")

    groups: Dict[str, Dict[str, np.ndarray]] = {"params": {}, "optimizer": {}, "svm": {}}
    for index in range(count):
        kind, name_len = reader.unpack("<BH", f"record {index}")
        if kind not in _KINDS:
            raise CheckpointFormatError(f"Record {index} has unknown kind {kind}")
        name = reader.take(name_len, f"record {index} name").decode("utf-8", errors="replace")
        tag, ndim = reader.unpack("<BB", f"record '{name}'")
        if tag not in _DTYPES:
            raise CheckpointFormatError(f"Record '{name}' has unknown dtype tag {tag}")
        shape = reader.unpack(f"<{ndim}I", f"record '{name}' shape")
        dtype = _DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = reader.take(size, f"record '{name}' payload")
        groups[_KINDS[kind]][name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{len(data) - reader.offset} trailing bytes after last record")
    return Checkpoint(topology=topology, metadata=metadata, **groups)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"Checkpoint file not found: {path}")
    checkpoint = parse_checkpoint(path.read_bytes())
    logger.info(f"Loaded checkpoint {path} (version {FORMAT_VERSION}, {len(checkpoint.params)} parameters)")
    return checkpoint
