"""Container files: a JSON manifest plus raw little-endian float64 blobs.

The container is an uncompressed zip archive holding ``manifest.json`` and one
``blobs/<name>.f64`` member per array. Entry timestamps are pinned, so writing
the same content twice yields byte-identical files.
"""

from __future__ import annotations

import json
import os
import zipfile

import numpy as np

from ..errors import CheckpointError

FORMAT = "aet-container/1"
_EPOCH_STAMP = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> str:
    return f"blobs/{name}.f64"


def save_container(path, manifest: dict, arrays: dict) -> str:
    """Write ``arrays`` (name -> ndarray) and ``manifest`` to ``path`` atomically."""
    path = os.fspath(path)
    shapes = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            raise CheckpointError(f"array {name!r} is {arr.dtype}, expected float64")
        shapes[name] = list(arr.shape)
    header = {"format": FORMAT, "manifest": manifest, "arrays": shapes}
    tmp = path + ".tmp"
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH_STAMP)
            zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
            for name, arr in arrays.items():
                info = zipfile.ZipInfo(_member(name), date_time=_EPOCH_STAMP)
                zf.writestr(info, np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise CheckpointError(f"failed to write {path}: {e}") from e
    return path


def load_container(path):
    """Return ``(manifest, arrays)`` from a container written by :func:`save_container`."""
    path = os.fspath(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("manifest.json"))
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
            arrays = {}
            for name, shape in header["arrays"].items():
                raw = zf.read(_member(name))
                arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
                if arr.size != int(np.prod(shape)):
                    raise CheckpointError(f"{path}: blob {name!r} has {arr.size} values, expected shape {shape}")
                arrays[name] = arr.reshape(shape)
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read container {path}: {e}") from e
    return header["manifest"], arrays
