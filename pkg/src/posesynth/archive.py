"""Named-array archives: a zip of ``.npy`` members plus a JSON manifest.

Timestamps inside the zip are fixed so identical content gives identical bytes.
"""

import hashlib
import io
import json
import zipfile

import numpy as np

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_arrays(path, arrays, manifest=None):
    manifest = dict(manifest or {})
    manifest.setdefault("format_version", FORMAT_VERSION)
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            _member(zf, f"{name}.npy", buf.getvalue())
        _member(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1))


def load_arrays(path):
    """Return ``(arrays, manifest)``."""
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported archive version {manifest.get('format_version')}")
    return arrays, manifest


def read_manifest(path):
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


def array_digest(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
