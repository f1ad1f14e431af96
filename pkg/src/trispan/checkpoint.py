"""Parameter archives: one .npz file holding named arrays plus a metadata record.

The metadata is a JSON document stored under the reserved key ``__meta__``;
it always carries a ``version`` field.  Writes go through a temp file and an
atomic rename.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_archive(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    record = {"version": FORMAT_VERSION}
    if meta:
        record.update(meta)
    payload = {_META_KEY: np.asarray(json.dumps(record))}
    for name, arr in arrays.items():
        if name == _META_KEY:
            raise DataError(f"parameter name {name!r} is reserved")
        payload[name] = np.asarray(arr)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_archive(path: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        bundle = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from exc
    with bundle:
        if _META_KEY not in bundle.files:
            raise DataError(f"archive {path} is missing its metadata record")
        meta = json.loads(str(bundle[_META_KEY][()]))
        if "version" not in meta:
            raise DataError(f"archive {path} metadata lacks the mandatory version field")
        arrays = {name: bundle[name] for name in bundle.files if name != _META_KEY}
    return arrays, meta
