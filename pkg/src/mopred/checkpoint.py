"""Checkpoint archive: named float64 arrays plus a JSON header.

Layout is a zip file holding ``meta.json`` (format version, user header,
and a name->shape map) and one raw little-endian float64 payload per array
under ``arrays/<name>``.  Writes are atomic (temp file + rename) so an
interrupted save never clobbers the previous checkpoint.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], header: dict):
    meta = {
        "format_version": FORMAT_VERSION,
        "header": header,
        "arrays": {name: list(np.asarray(a).shape) for name, a in arrays.items()},
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".ckpt.tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
            for name, arr in arrays.items():
                payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                zf.writestr("arrays/" + name, payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json"))
            version = meta.get("format_version")
            if version != FORMAT_VERSION:
                raise DataError(f"unsupported checkpoint format_version {version!r}")
            arrays = {}
            for name, shape in meta["arrays"].items():
                raw = zf.read("arrays/" + name)
                arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            return arrays, meta["header"]
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
