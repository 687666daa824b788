"""Bit-exact serialization: tensors, vocabularies, manifests, checkpoints.

All binary formats are little-endian and versioned. Bulk tensors use a small
binary container; human-facing metadata (manifests, duration files, reports)
is JSON. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError
from .duration import AttentionMatrix
from .model import FeedForwardTransformer, ModelConfig, TeacherLite
from .tensor import Tensor
from .training import AdamState, OptimizerConfig, TrainingSample

TENSOR_MAGIC = b"FSTN"
TENSOR_VERSION = 1
DTYPE_F32, DTYPE_F64 = 0, 1
_DTYPE_NP = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}
_DTYPE_CODE = {"f32": DTYPE_F32, "f64": DTYPE_F64}

CHECKPOINT_MAGIC = b"FSCK"
CHECKPOINT_VERSION = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# tensor container


def tensor_to_bytes(array, dtype: str = "f64") -> bytes:
    if dtype not in _DTYPE_CODE:
        raise ConfigError(f"tensor dtype must be 'f32' or 'f64', got {dtype!r}")
    arr = array.data if isinstance(array, Tensor) else np.asarray(array, dtype=np.float64)
    code = _DTYPE_CODE[dtype]
    dims = arr.shape
    header = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *dims)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_NP[code]).tobytes()
    return header + payload


def tensor_from_buffer(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record; returns (array, offset past the record).

    Errors name the absolute byte offset at which parsing failed.
    """
    start = offset
    if len(buf) < offset + 7:
        raise FormatError(f"truncated tensor header at offset {start}")
    magic = buf[offset:offset + 4]
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset {start}")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version} at offset {start + 4}")
    if code not in _DTYPE_NP:
        raise FormatError(f"unknown dtype code {code} at offset {start + 5}")
    if rank > 3:
        raise FormatError(f"rank {rank} exceeds the rank-3 cap at offset {start + 6}")
    offset += 7
    if len(buf) < offset + 4 * rank:
        raise FormatError(f"truncated dims at offset {offset}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = count * _DTYPE_NP[code].itemsize
    if len(buf) < offset + nbytes:
        raise FormatError(
            f"truncated payload at offset {offset}: expected {nbytes} bytes, "
            f"got {len(buf) - offset}"
        )
    arr = np.frombuffer(buf, dtype=_DTYPE_NP[code], count=count, offset=offset)
    arr = arr.astype(np.float64).reshape(dims)
    return arr, offset + nbytes


def write_tensor(path, array, dtype: str = "f64") -> None:
    atomic_write_bytes(path, tensor_to_bytes(array, dtype))


def read_tensor(path) -> Tensor:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_buffer(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor at offset {end}")
    return Tensor(arr)


# ---------------------------------------------------------------------------
# vocabulary


def load_vocab(path) -> dict[str, int]:
    """One token per line; id = 0-based line number. Duplicates are rejected."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines = lines[:-1]
    if not lines:
        raise FormatError(f"{path}: vocabulary must be non-empty")
    vocab: dict[str, int] = {}
    for i, token in enumerate(lines):
        token = token.rstrip("\r")
        if token == "":
            raise FormatError(f"{path}:{i + 1}: empty vocabulary token")
        if token in vocab:
            raise FormatError(f"{path}:{i + 1}: duplicate token {token!r}")
        vocab[token] = i
    return vocab


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointData:
    kind: str  # "student" | "teacher"
    model_config: dict
    optimizer_config: dict | None
    step: int
    seed: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, data: CheckpointData) -> None:
    names = list(data.tensors)
    header = {
        "kind": data.kind,
        "model_config": data.model_config,
        "optimizer_config": data.optimizer_config,
        "step": data.step,
        "seed": data.seed,
        "tensors": names,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<BI", CHECKPOINT_VERSION, len(header_bytes))
    blob += header_bytes
    for name in names:
        blob += tensor_to_bytes(data.tensors[name], "f64")
    atomic_write_bytes(path, blob)


def load_checkpoint(path) -> CheckpointData:
    buf = Path(path).read_bytes()
    if len(buf) < 9:
        raise FormatError(f"{path}: truncated checkpoint header at offset 0")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at offset 0")
    version, header_len = struct.unpack_from("<BI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at offset 4")
    offset = 9
    if len(buf) < offset + header_len:
        raise FormatError(f"{path}: truncated header at offset {offset}")
    try:
        header = json.loads(buf[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unparseable header at offset {offset}: {e}") from e
    offset += header_len
    tensors: dict[str, np.ndarray] = {}
    for name in header["tensors"]:
        arr, offset = tensor_from_buffer(buf, offset)
        tensors[name] = arr
    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes at offset {offset}")
    return CheckpointData(
        kind=header["kind"],
        model_config=header["model_config"],
        optimizer_config=header.get("optimizer_config"),
        step=int(header["step"]),
        seed=int(header["seed"]),
        tensors=tensors,
    )


OPTIM_PREFIX = "optim."


def save_model(path, model, kind: str, step: int, seed: int,
               optimizer_config: OptimizerConfig | None = None,
               optimizer_state=None) -> None:
    tensors = {name: np.array(p.data) for name, p in model.named_parameters()}
    if optimizer_state is not None:
        for name, arr in optimizer_state.m.items():
            tensors[f"{OPTIM_PREFIX}m.{name}"] = np.array(arr)
        for name, arr in optimizer_state.v.items():
            tensors[f"{OPTIM_PREFIX}v.{name}"] = np.array(arr)
    save_checkpoint(path, CheckpointData(
        kind=kind,
        model_config=model.config.to_dict(),
        optimizer_config=optimizer_config.to_dict() if optimizer_config else None,
        step=step,
        seed=seed,
        tensors=tensors,
    ))


def _bind_parameters(model, data: CheckpointData, path) -> None:
    stored = {k: v for k, v in data.tensors.items() if not k.startswith(OPTIM_PREFIX)}
    for name, p in model.named_parameters():
        if name not in stored:
            raise IntegrityError(f"{path}: checkpoint missing tensor '{name}'")
        arr = stored.pop(name)
        if arr.shape != p.data.shape:
            raise IntegrityError(
                f"{path}: tensor '{name}' has shape {arr.shape}, expected {p.data.shape}"
            )
        p.data = arr
    if stored:
        extra = sorted(stored)[0]
        raise IntegrityError(f"{path}: checkpoint has unexpected tensor '{extra}'")


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, CheckpointData).

    Loaded weights reproduce forward outputs bitwise (64-bit storage).
    """
    data = load_checkpoint(path)
    config = ModelConfig.from_dict(data.model_config)
    if data.kind == "student":
        model = FeedForwardTransformer(config, seed=data.seed)
    elif data.kind == "teacher":
        model = TeacherLite(config, seed=data.seed)
    else:
        raise FormatError(f"{path}: unknown checkpoint kind {data.kind!r}")
    _bind_parameters(model, data, path)
    return model, data


def load_adam_state(data: CheckpointData) -> AdamState:
    """Reassemble optimizer moments persisted alongside the weights."""
    state = AdamState(t=data.step)
    for key, arr in data.tensors.items():
        if key.startswith(f"{OPTIM_PREFIX}m."):
            state.m[key[len(OPTIM_PREFIX) + 2:]] = np.array(arr)
        elif key.startswith(f"{OPTIM_PREFIX}v."):
            state.v[key[len(OPTIM_PREFIX) + 2:]] = np.array(arr)
    return state


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class ManifestEntry:
    id: str
    phoneme_ids: list[int]
    mel_path: str
    duration_path: str | None = None
    attention_dir: str | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "phoneme_ids": self.phoneme_ids, "mel_path": self.mel_path}
        if self.duration_path is not None:
            d["duration_path"] = self.duration_path
        if self.attention_dir is not None:
            d["attention_dir"] = self.attention_dir
        return d


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    text = "".join(json.dumps(e.to_dict()) + "\n" for e in entries)
    atomic_write_text(path, text)


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{lineno}: unparseable manifest line: {e}") from e
        for key in ("id", "phoneme_ids", "mel_path"):
            if key not in d:
                raise FormatError(f"{path}:{lineno}: manifest line missing '{key}'")
        unknown = set(d) - {"id", "phoneme_ids", "mel_path", "duration_path", "attention_dir"}
        if unknown:
            raise FormatError(f"{path}:{lineno}: unknown manifest field '{sorted(unknown)[0]}'")
        entries.append(ManifestEntry(
            id=str(d["id"]),
            phoneme_ids=[int(x) for x in d["phoneme_ids"]],
            mel_path=str(d["mel_path"]),
            duration_path=d.get("duration_path"),
            attention_dir=d.get("attention_dir"),
        ))
    return entries


def read_durations_json(path) -> list[int]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    values = obj["durations"] if isinstance(obj, dict) else obj
    return [int(v) for v in values]


def write_durations_json(path, durations, **extra) -> None:
    atomic_write_json(path, {"durations": [int(d) for d in durations], **extra})


def load_manifest_samples(path, require_durations: bool = False):
    """Resolve a manifest into TrainingSamples (paths relative to the manifest)."""
    base = Path(path).parent
    samples = []
    for entry in read_manifest(path):
        mel_file = base / entry.mel_path
        if not mel_file.exists():
            raise IntegrityError(f"{path}: sample '{entry.id}' mel file not found: {mel_file}")
        mel = read_tensor(mel_file).data
        if entry.duration_path is not None:
            dur_file = base / entry.duration_path
            if not dur_file.exists():
                raise IntegrityError(
                    f"{path}: sample '{entry.id}' duration file not found: {dur_file}"
                )
            durations = read_durations_json(dur_file)
            if sum(durations) != mel.shape[0]:
                raise IntegrityError(
                    f"{path}: sample '{entry.id}' duration sum {sum(durations)} "
                    f"does not match {mel.shape[0]} mel frames"
                )
        elif require_durations:
            raise ConfigError(
                f"{path}: sample '{entry.id}' has no durations; run extract-durations "
                f"or distill first"
            )
        else:
            durations = None
        if durations is None:
            samples.append((entry, mel, None))
        else:
            samples.append((entry, mel, TrainingSample(
                phonemes=entry.phoneme_ids, target_mel=mel,
                target_durations=durations, id=entry.id)))
    return samples


def load_attention_heads(directory):
    """Read per-head attention tensors (head_*.fstn) from a directory."""
    directory = Path(directory)
    files = sorted(directory.glob("head_*.fstn"))
    if not files:
        raise FormatError(f"{directory}: no head_*.fstn attention files")
    labels = [f.stem[len("head_"):] for f in files]
    heads = [AttentionMatrix(read_tensor(f)) for f in files]
    return heads, labels
