"""Named-array container used for weights, checkpoints and feature dumps.

Layout: a zip archive (stored, fixed timestamps) holding ``meta.json`` and one
``arrays/<name>.npy`` member per array, in sorted name order. Writing the same
content twice gives byte-identical files.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = "glyphda-container"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class ContainerError(ValueError):
    pass


def write_container(path: str | os.PathLike, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    header = {"format": MAGIC, "version": VERSION, "meta": meta,
              "arrays": {k: {"shape": list(np.shape(v)), "dtype": str(np.asarray(v).dtype)} for k, v in sorted(arrays.items())}}
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _EPOCH), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.array(arrays[name], order="C"), allow_pickle=False)  # keeps 0-d shape
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", _EPOCH), buf.getvalue())
    os.replace(tmp, path)


def is_container(path: str | os.PathLike) -> bool:
    try:
        with zipfile.ZipFile(path) as zf:
            return "meta.json" in zf.namelist() and json.loads(zf.read("meta.json")).get("format") == MAGIC
    except (zipfile.BadZipFile, OSError, ValueError):
        return False


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("meta.json"))
            if header.get("format") != MAGIC:
                raise ContainerError(f"{path}: not a {MAGIC} file")
            arrays = {}
            for name, info in header["arrays"].items():
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")), allow_pickle=False)
                if list(arr.shape) != info["shape"]:
                    raise ContainerError(f"{path}: array {name!r} shape disagrees with header")
                arrays[name] = arr
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, EOFError) as e:
        raise ContainerError(f"{path}: corrupt container ({e})") from None
    return header["meta"], arrays
