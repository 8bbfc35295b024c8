from .tools import atomic_write_bytes, publish_directory
from dataclasses import dataclass
from pathlib import Path
from typing import Any
import json
import numpy as np
import re
import struct
import tempfile

# Fixed 16-byte header: magic, dtype code, rank, five uint16 dims.
HEADER = struct.Struct("<4sBB5H")
MAGIC = b"MSDT"
MAX_RANK = 5
MAX_DIM = 0xFFFF

DTYPE_CODES: dict[int, np.dtype] = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<i8"),
}
CODE_BY_DTYPE: dict[str, int] = {dt.str: code for code, dt in DTYPE_CODES.items()}

CHECKPOINT_FORMAT = "misdd-checkpoint"
CHECKPOINT_VERSION = 1

# Characters allowed in blob file names; everything else becomes "_".
REGEX_UNSAFE = re.compile(r"[^A-Za-z0-9_.-]")


class CorruptFileError(ValueError):
    """Raised when a tensor file or manifest cannot be decoded."""


def encode_tensor(array: np.ndarray) -> bytes:
    """
    Serialises an array into the raw tensor format.

    Args:
        array (np.ndarray): Array of dtype float32, float64, uint8 or int64.

    Returns:
        bytes: Header followed by the C-order little-endian payload.

    Raises:
        ValueError: If the dtype, rank or a dimension is not representable.
    """
    array = np.asarray(array)
    little = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    code = CODE_BY_DTYPE.get(np.dtype(little).str)
    if code is None:
        raise ValueError(f"Unsupported tensor dtype: {array.dtype}")
    if array.ndim > MAX_RANK:
        raise ValueError(f"Tensor rank {array.ndim} exceeds {MAX_RANK}")
    if any(dim > MAX_DIM for dim in array.shape):
        raise ValueError(f"Tensor dimension exceeds {MAX_DIM}: {array.shape}")
    dims = list(array.shape) + [0] * (MAX_RANK - array.ndim)
    header = HEADER.pack(MAGIC, code, array.ndim, *dims)
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """
    Decodes bytes produced by encode_tensor.

    Args:
        data (bytes): Raw file content.
        source (str, optional): Name used in error messages.

    Returns:
        np.ndarray: The decoded array (a writable copy).

    Raises:
        CorruptFileError: On a bad magic, unknown dtype or size mismatch.
    """
    if len(data) < HEADER.size:
        raise CorruptFileError(f"{source}: truncated header")
    magic, code, rank, *dims = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFileError(f"{source}: bad magic {magic!r}")
    if code not in DTYPE_CODES or rank > MAX_RANK:
        raise CorruptFileError(f"{source}: bad dtype code {code} or rank {rank}")
    dtype = DTYPE_CODES[code]
    shape = tuple(dims[:rank])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - HEADER.size != expected:
        raise CorruptFileError(
            f"{source}: payload has {len(data) - HEADER.size} bytes, header declares {expected}"
        )
    return np.frombuffer(data, dtype=dtype, offset=HEADER.size).reshape(shape).copy()


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """
    Writes one raw tensor file atomically.

    Args:
        path (str | Path): Destination file.
        array (np.ndarray): The array to store.
    """
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    """
    Reads one raw tensor file.

    Args:
        path (str | Path): The file to read.

    Returns:
        np.ndarray: The stored array.
    """
    path = Path(path)
    return decode_tensor(path.read_bytes(), source=str(path))


def read_tensor_shape(path: str | Path) -> tuple[int, ...]:
    """
    Reads only the header of a raw tensor file.

    Args:
        path (str | Path): The file to inspect.

    Returns:
        tuple[int, ...]: The declared shape.
    """
    with open(path, "rb") as f:
        head = f.read(HEADER.size)
    if len(head) < HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, _, rank, *dims = HEADER.unpack(head)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    return tuple(dims[:rank])


def dumps_manifest(manifest: dict[str, Any]) -> str:
    """Serialise a manifest deterministically (sorted keys, fixed indent)."""
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class TensorRecord:
    """One named tensor inside a checkpoint container."""

    name: str
    array: np.ndarray
    trainable: bool = False

    @property
    def file_name(self) -> str:
        return REGEX_UNSAFE.sub("_", self.name.replace("/", "__")) + ".bin"


def save_checkpoint(
    path: str | Path,
    records: list[TensorRecord],
    meta: dict[str, Any] | None = None,
) -> Path:
    """
    Writes a checkpoint container: manifest.json plus one blob per tensor.

    The container is assembled in a temporary sibling directory and renamed into
    place, so an interrupted write never leaves a partial checkpoint visible.

    Args:
        path (str | Path): The checkpoint directory.
        records (list[TensorRecord]): The tensors to store, in manifest order.
        meta (dict[str, Any] | None, optional): JSON-serialisable metadata.

    Returns:
        Path: The checkpoint directory.

    Raises:
        ValueError: If two records share a name or a blob file name.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    names = [r.name for r in records]
    files = [r.file_name for r in records]
    if len(set(names)) != len(names) or len(set(files)) != len(files):
        raise ValueError("Checkpoint tensor names must be unique")

    staging = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    entries = []
    for record in records:
        array = np.asarray(record.array)
        (staging / record.file_name).write_bytes(encode_tensor(array))
        entries.append(
            {
                "name": record.name,
                "shape": list(array.shape),
                "dtype": array.dtype.name,
                "trainable": bool(record.trainable),
                "file": record.file_name,
            }
        )
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    (staging / "manifest.json").write_text(dumps_manifest(manifest), encoding="utf-8")
    publish_directory(staging, target)
    return target


def load_checkpoint(
    path: str | Path,
) -> tuple[list[TensorRecord], dict[str, Any]]:
    """
    Reads a checkpoint container written by save_checkpoint.

    Args:
        path (str | Path): The checkpoint directory.

    Returns:
        tuple[list[TensorRecord], dict[str, Any]]: The records in manifest order and the metadata.

    Raises:
        FileNotFoundError: If the manifest or a blob is missing.
        CorruptFileError: If the manifest is malformed or a blob disagrees with it.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"Checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptFileError(f"{manifest_path}: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptFileError(f"{manifest_path}: not a {CHECKPOINT_FORMAT} manifest")

    records = []
    for entry in manifest.get("tensors", []):
        blob = root / entry["file"]
        if not blob.is_file():
            raise FileNotFoundError(f"Checkpoint tensor '{entry['name']}' missing: {blob}")
        array = read_tensor(blob)
        if list(array.shape) != list(entry["shape"]) or array.dtype.name != entry["dtype"]:
            raise CorruptFileError(
                f"Checkpoint tensor '{entry['name']}' disagrees with its manifest entry"
            )
        records.append(TensorRecord(entry["name"], array, bool(entry["trainable"])))
    return records, manifest.get("meta", {})
