"""Persistence: raw little-endian tensor files with JSON sidecars, bundle manifests and
CSV tables.
"""
import json
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd
import torch

from .shared import MissingArtifactError

LOGGER = getLogger(__name__)

PathLike = Union[str, Path]

_DTYPES = {
    "real64": np.dtype("<f8"),
    "complex128": np.dtype("<c16"),
    "int64": np.dtype("<i8"),
    "bool": np.dtype("|b1"),
}

MANIFEST = "manifest.json"


def _dtype_name(array: np.ndarray) -> str:
    if np.iscomplexobj(array):
        return "complex128"
    if array.dtype == np.bool_:
        return "bool"
    if np.issubdtype(array.dtype, np.integer):
        return "int64"
    return "real64"


def save_tensor(directory: PathLike, name: str, value) -> Path:
    """Write ``<name>.bin`` and its ``<name>.json`` sidecar; return the ``.bin`` path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    array = np.asarray(value)
    dtype_name = _dtype_name(array)
    array = np.ascontiguousarray(array, dtype=_DTYPES[dtype_name])
    path = directory / f"{name}.bin"
    path.write_bytes(array.tobytes(order="C"))
    meta = {"name": name, "shape": list(array.shape), "dtype": dtype_name}
    write_json(directory / f"{name}.json", meta)
    return path


def load_tensor(directory: PathLike, name: str) -> np.ndarray:
    """Read a tensor written by :func:`save_tensor`."""
    directory = Path(directory)
    meta_path = directory / f"{name}.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no tensor {name!r} in {str(directory)!r}")
    meta = json.loads(meta_path.read_text(encoding="utf8"))
    dtype = _DTYPES[meta["dtype"]]
    data = np.frombuffer((directory / f"{name}.bin").read_bytes(), dtype=dtype)
    expected = int(np.prod(meta["shape"], dtype=np.int64))
    if data.size != expected:
        raise ValueError(
            f"tensor {name!r} holds {data.size} values, sidecar shape {meta['shape']}"
        )
    return data.reshape(meta["shape"]).copy()


def _json_default(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return value.as_posix()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def write_json(path: PathLike, content: Dict[str, Any]):
    Path(path).write_text(
        json.dumps(content, indent=2, sort_keys=True, default=_json_default) + "\n",
        encoding="utf8",
    )


def read_json(path: PathLike) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf8"))


def save_bundle(
    directory: PathLike, tensors: Dict[str, Any], manifest: Dict[str, Any]
) -> Path:
    """Write a directory of tensors plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in sorted(tensors):
        save_tensor(directory, name, tensors[name])
    write_json(directory / MANIFEST, dict(manifest, tensors=sorted(tensors)))
    LOGGER.debug(f"wrote bundle {directory} ({len(tensors)} tensors)")
    return directory


def load_bundle(directory: PathLike, producer: str = ""):
    """Return ``(tensors, manifest)`` for a bundle directory.

    A missing bundle raises ``MissingArtifactError`` naming ``producer``.
    """
    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        raise MissingArtifactError(str(directory), producer or "unknown")
    manifest = read_json(directory / MANIFEST)
    tensors = {name: load_tensor(directory, name) for name in manifest.get("tensors", [])}
    return tensors, manifest


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return path


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)
