"""
Checkpoint persistence: per-rank shard files, per-layer slice files and the
conversions between them.

Shard file:  header | records | little-endian float64 payloads in record order
Slice file:  header | little-endian float64 full-layer payload
"""
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from core.engine import LayerLayout
from core.errors import CheckpointFormatError, InvalidArgumentError, MissingShardError, ReshardingRequiredError
from core.fsdp import LayerShard, ShardedState, make_layer_shard, shard_bounds

LOGGER = logging.getLogger(__name__)

SHARD_MAGIC = b"SEERSHRD"
SLICE_MAGIC = b"SEERSLCE"
FORMAT_VERSION = 1
METADATA_FILE = "metadata.json"
SLICES_FILE = "slices.json"
PAYLOAD_DTYPE = np.dtype("<f8")

KIND_WEIGHTS = 0
KIND_MOMENTUM = 1
KIND_NAMES = {KIND_WEIGHTS: "weights", KIND_MOMENTUM: "momentum"}

SHARD_HEADER = np.dtype([("magic", "S8"), ("version", "<u4"), ("rank", "<u4"),
                         ("world_size", "<u4"), ("n_layers", "<u4")])
SHARD_RECORD = np.dtype([("layer", "<u4"), ("full_length", "<u8"), ("shard_offset", "<u8"),
                         ("shard_length", "<u8"), ("kind", "u1")])
SLICE_HEADER = np.dtype([("magic", "S8"), ("version", "<u4"), ("layer", "<u4"),
                         ("full_length", "<u8"), ("kind", "u1")])


def shard_file_name(rank: int) -> str:
    return f"shard_rank{rank:05d}.bin"


def slice_file_name(layer: int, kind: int) -> str:
    return f"slice_layer{layer:04d}_{KIND_NAMES[kind]}.bin"


def _write_json(path: Path, data: dict):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(data, sort_keys=True, indent=2))


def _read_json(path: Path, missing_error=CheckpointFormatError) -> dict:
    if not path.exists():
        raise missing_error(f"{path.name} not found in {path.parent}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"{path} is not valid JSON: {e}")


def _check(header, magic: bytes, path: Path):
    if header["magic"] != magic:
        raise CheckpointFormatError(f"{path.name}: bad magic {header['magic']!r}, expected {magic!r}")
    if int(header["version"]) != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path.name}: unsupported format version {int(header['version'])}")


@dataclass
class ShardFileHeader:
    path: Path
    rank: int
    world_size: int
    n_layers: int
    records: np.ndarray
    payload_offset: int

    def payload_offsets(self) -> List[int]:
        lengths = self.records["shard_length"].astype(np.int64)
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        return [self.payload_offset + 8 * int(s) for s in starts]


def read_shard_header(path: Path) -> ShardFileHeader:
    """Parse and validate header, records and total length without touching payloads"""
    with open(path, "rb") as f:
        raw = f.read(SHARD_HEADER.itemsize)
        if len(raw) < SHARD_HEADER.itemsize:
            raise CheckpointFormatError(f"{path.name}: truncated header")
        header = np.frombuffer(raw, dtype=SHARD_HEADER)[0]
        _check(header, SHARD_MAGIC, path)
        n_records = 2 * int(header["n_layers"])
        raw = f.read(SHARD_RECORD.itemsize * n_records)
        if len(raw) < SHARD_RECORD.itemsize * n_records:
            raise CheckpointFormatError(f"{path.name}: truncated record table")
        records = np.frombuffer(raw, dtype=SHARD_RECORD)
    payload_offset = SHARD_HEADER.itemsize + SHARD_RECORD.itemsize * n_records
    expected = payload_offset + 8 * int(records["shard_length"].sum())
    actual = os.path.getsize(path)
    if actual != expected:
        raise CheckpointFormatError(f"{path.name}: {actual} bytes on disk, records describe {expected}")
    return ShardFileHeader(path, int(header["rank"]), int(header["world_size"]), int(header["n_layers"]),
                           records, payload_offset)


def _read_payload(path: Path, offset: int, length: int) -> np.ndarray:
    with open(path, "rb") as f:
        f.seek(offset)
        raw = f.read(length * PAYLOAD_DTYPE.itemsize)
    if len(raw) != length * PAYLOAD_DTYPE.itemsize:
        raise CheckpointFormatError(f"{path.name}: truncated payload at offset {offset}")
    return np.frombuffer(raw, dtype=PAYLOAD_DTYPE).astype(np.float64)


def encode_shard_file(state: ShardedState) -> bytes:
    header = np.zeros(1, dtype=SHARD_HEADER)
    header["magic"] = SHARD_MAGIC
    header["version"] = FORMAT_VERSION
    header["rank"] = state.rank
    header["world_size"] = state.world_size
    header["n_layers"] = len(state.shards)
    records = np.zeros(2 * len(state.shards), dtype=SHARD_RECORD)
    payloads = []
    for i, shard in enumerate(state.shards):
        _, _, shard_length = shard_bounds(shard.full_length, state.world_size, state.rank)
        for j, (kind, data) in enumerate(((KIND_WEIGHTS, shard.params), (KIND_MOMENTUM, shard.momentum))):
            records[2 * i + j] = (i, shard.full_length, state.rank * shard_length, shard_length, kind)
            payloads.append(np.ascontiguousarray(data, dtype=PAYLOAD_DTYPE).tobytes())
    return header.tobytes() + records.tobytes() + b"".join(payloads)


def save_sharded(state: ShardedState, step: Optional[int], directory, seed: int = 0,
                 config_hash: str = "") -> List[Path]:
    """Write this rank's shard file; rank 0 also writes the metadata listing every shard"""
    directory = Path(directory)
    step = state.step if step is None else step
    written = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / shard_file_name(state.rank)
        with open(path, "wb") as f:
            f.write(encode_shard_file(state))
        written.append(path)
        if state.rank == 0:
            metadata = {
                "format_version": FORMAT_VERSION,
                "world_size": state.world_size,
                "files": [shard_file_name(r) for r in range(state.world_size)],
                "step": int(step),
                "seeds": {"data": int(seed)},
                "config_hash": config_hash,
                "dtype": str(state.shards[0].params.dtype) if state.shards else PAYLOAD_DTYPE.name,
                "layouts": [layout.to_dict() for layout in state.layouts],
            }
            _write_json(directory / METADATA_FILE, metadata)
            written.append(directory / METADATA_FILE)
    except OSError as e:
        raise CheckpointFormatError(f"Rank {state.rank} could not write checkpoint to {directory}: {e}")
    LOGGER.debug("Rank %d saved step %d to %s", state.rank, step, directory)
    return written


def read_metadata(directory) -> dict:
    return _read_json(Path(directory) / METADATA_FILE)


def load_sharded(directory, rank: int, world_size: int) -> ShardedState:
    directory = Path(directory)
    metadata = read_metadata(directory)
    if int(metadata["world_size"]) != world_size:
        raise ReshardingRequiredError(
            f"Checkpoint in {directory} was saved by {metadata['world_size']} ranks, "
            f"cannot load on {world_size}; convert it with `reshard --mode to-slices`")
    if not 0 <= rank < world_size:
        raise InvalidArgumentError(f"Rank {rank} is outside [0, {world_size})")
    path = directory / metadata["files"][rank]
    if not path.exists():
        raise MissingShardError(f"Shard file for rank {rank} is missing: {path.name}")
    header = read_shard_header(path)
    if header.rank != rank or header.world_size != world_size:
        raise CheckpointFormatError(f"{path.name} holds rank {header.rank}/{header.world_size}, "
                                    f"expected {rank}/{world_size}")
    layouts = [LayerLayout.from_dict(d) for d in metadata["layouts"]]
    if header.n_layers != len(layouts):
        raise CheckpointFormatError(f"{path.name} has {header.n_layers} layers, metadata {len(layouts)}")
    dtype = np.dtype(metadata.get("dtype", PAYLOAD_DTYPE.name))
    offsets = header.payload_offsets()
    shards = []
    for i in range(header.n_layers):
        data = {}
        for j in (2 * i, 2 * i + 1):
            record = header.records[j]
            data[int(record["kind"])] = _read_payload(path, offsets[j], int(record["shard_length"])).astype(dtype)
        full_length = int(header.records[2 * i]["full_length"])
        start, end, shard_length = shard_bounds(full_length, world_size, rank)
        shards.append(LayerShard(data[KIND_WEIGHTS], data[KIND_MOMENTUM], full_length,
                                 shard_length - (end - start)))
    return ShardedState(layouts, shards, world_size, rank, int(metadata["step"]))


def consolidate_to_sliced(shard_dir, slice_dir) -> List[Path]:
    """Stream one (layer, kind) at a time into full-layer slice files"""
    shard_dir, slice_dir = Path(shard_dir), Path(slice_dir)
    metadata = read_metadata(shard_dir)
    world_size = int(metadata["world_size"])
    headers = []
    for rank in range(world_size):
        path = shard_dir / metadata["files"][rank]
        if not path.exists():
            raise MissingShardError(f"Shard file for rank {rank} is missing: {path.name}")
        headers.append(read_shard_header(path))
    offsets = [h.payload_offsets() for h in headers]
    n_layers = headers[0].n_layers

    slice_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for layer in range(n_layers):
        for j in (2 * layer, 2 * layer + 1):
            record = headers[0].records[j]
            kind, full_length = int(record["kind"]), int(record["full_length"])
            full = np.empty(full_length, dtype=PAYLOAD_DTYPE)
            for rank, header in enumerate(headers):
                start, end, _ = shard_bounds(full_length, world_size, rank)
                shard = _read_payload(header.path, offsets[rank][j], int(header.records[j]["shard_length"]))
                full[start:end] = shard[:end - start]
            written.append(write_slice(slice_dir, layer, kind, full))
    slices_meta = {key: metadata[key] for key in ("step", "seeds", "config_hash", "dtype", "layouts")}
    slices_meta.update(format_version=FORMAT_VERSION, n_layers=n_layers,
                       files=[p.name for p in written])
    _write_json(slice_dir / SLICES_FILE, slices_meta)
    LOGGER.info("Converted %d shards into %d slices in %s", world_size, len(written), slice_dir)
    return written


def write_slice(slice_dir: Path, layer: int, kind: int, full) -> Path:
    header = np.zeros(1, dtype=SLICE_HEADER)
    header["magic"] = SLICE_MAGIC
    header["version"] = FORMAT_VERSION
    header["layer"] = layer
    header["full_length"] = full.shape[0]
    header["kind"] = kind
    path = slice_dir / slice_file_name(layer, kind)
    try:
        with open(path, "wb") as f:
            f.write(header.tobytes() + np.ascontiguousarray(full, dtype=PAYLOAD_DTYPE).tobytes())
    except OSError as e:
        raise CheckpointFormatError(f"Could not write slice {path}: {e}")
    return path


def read_slice(slice_dir: Path, layer: int, kind: int) -> np.ndarray:
    path = Path(slice_dir) / slice_file_name(layer, kind)
    if not path.exists():
        raise MissingShardError(f"Slice for layer {layer} ({KIND_NAMES[kind]}) is missing: {path.name}")
    with open(path, "rb") as f:
        raw = f.read(SLICE_HEADER.itemsize)
    if len(raw) < SLICE_HEADER.itemsize:
        raise CheckpointFormatError(f"{path.name}: truncated header")
    header = np.frombuffer(raw, dtype=SLICE_HEADER)[0]
    _check(header, SLICE_MAGIC, path)
    if int(header["layer"]) != layer or int(header["kind"]) != kind:
        raise CheckpointFormatError(f"{path.name} holds layer {int(header['layer'])} kind {int(header['kind'])}")
    full_length = int(header["full_length"])
    if os.path.getsize(path) != SLICE_HEADER.itemsize + 8 * full_length:
        raise CheckpointFormatError(f"{path.name}: payload length does not match {full_length} elements")
    return _read_payload(path, SLICE_HEADER.itemsize, full_length)


def read_slices_metadata(slice_dir) -> dict:
    return _read_json(Path(slice_dir) / SLICES_FILE, MissingShardError)


def load_sliced(slice_dir, rank: int, new_world: int) -> ShardedState:
    """Take this rank's contiguous sub-range of every layer, padding recomputed for new_world"""
    meta = read_slices_metadata(slice_dir)
    dtype = np.dtype(meta.get("dtype", PAYLOAD_DTYPE.name))
    layouts = [LayerLayout.from_dict(d) for d in meta["layouts"]]
    shards = []
    for layer, layout in enumerate(layouts):
        weights = read_slice(slice_dir, layer, KIND_WEIGHTS).astype(dtype)
        momentum = read_slice(slice_dir, layer, KIND_MOMENTUM).astype(dtype)
        if weights.shape[0] != layout.numel or momentum.shape[0] != layout.numel:
            raise CheckpointFormatError(f"Slice for layer {layer} does not match its layout ({layout.numel})")
        shards.append(make_layer_shard(weights, momentum, new_world, rank))
    return ShardedState(layouts, shards, new_world, rank, int(meta["step"]))


def slices_to_sharded(slice_dir, out_dir, world_size: int) -> List[Path]:
    meta = read_slices_metadata(slice_dir)
    written = []
    for rank in range(world_size):
        state = load_sliced(slice_dir, rank, world_size)
        written += save_sharded(state, int(meta["step"]), out_dir, int(meta["seeds"]["data"]),
                                meta["config_hash"])
    return written


def checkpoint_summary(directory) -> Dict:
    """Step, seeds and world size of a sharded or sliced checkpoint directory"""
    directory = Path(directory)
    if (directory / METADATA_FILE).exists():
        meta = read_metadata(directory)
        return {"kind": "sharded", "step": meta["step"], "world_size": meta["world_size"],
                "seeds": meta["seeds"], "config_hash": meta["config_hash"]}
    meta = read_slices_metadata(directory)
    return {"kind": "sliced", "step": meta["step"], "world_size": None,
            "seeds": meta["seeds"], "config_hash": meta["config_hash"]}
