"""Deterministic on-disk archives for pipeline artifacts.

Artifacts (inversion trajectories, optimizer checkpoints, final states)
are zip files holding raw .npy payloads plus a meta.json.  numpy's savez
stamps zip entries with the current time, which breaks the byte-identical
rerun guarantee, so this module writes the zip itself with fixed entry
timestamps and stored (uncompressed) payloads.  Same arrays + same meta
in, same bytes out.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .errors import ConfigurationError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path, arrays: dict, meta: dict) -> None:
    """Write named float/int arrays and a JSON metadata block to `path`."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            arr = np.asarray(arrays[name])
            if arr.dtype == object:
                raise ConfigurationError(f"archive array {name!r} has object dtype")
            np.lib.format.write_array(buf, arr, version=(1, 0), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_archive(path):
    """Read back (arrays, meta) written by save_archive."""
    arrays = {}
    try:
        with zipfile.ZipFile(path, "r") as zf:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
            for entry in zf.namelist():
                if entry.endswith(".npy"):
                    buf = io.BytesIO(zf.read(entry))
                    arrays[entry[:-4]] = np.lib.format.read_array(buf, allow_pickle=False)
    except (zipfile.BadZipFile, KeyError, OSError) as exc:
        raise ConfigurationError(f"unreadable artifact archive {path}: {exc}") from exc
    return arrays, meta
