"""Checkpoint container: a zip holding manifest.json plus one little-endian
.npy per named array. Zip entry timestamps are pinned so identical state
serializes to identical bytes."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import DataError
from .util import sha256_bytes, stable_json

FORMAT = "discorel-checkpoint-v1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0))
    return buf.getvalue()


def save_checkpoint(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = dict(manifest)
    manifest["format"] = FORMAT
    hashes = {}
    blobs = {}
    for name in sorted(arrays):
        blob = _npy_bytes(arrays[name])
        blobs[name] = blob
        hashes[name] = sha256_bytes(blob)
    manifest["array_hashes"] = hashes
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, stable_json(manifest) + "\n")
        for name in sorted(blobs):
            info = zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_EPOCH)
            zf.writestr(info, blobs[name])


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT:
            raise DataError(f"{path} is not a {FORMAT} file")
        arrays = {}
        for name, want in manifest["array_hashes"].items():
            blob = zf.read(f"arrays/{name}.npy")
            if sha256_bytes(blob) != want:
                raise DataError(f"corrupt checkpoint array {name!r} in {path}")
            arrays[name] = np.lib.format.read_array(io.BytesIO(blob))
    return manifest, arrays
