"""Single-file containers for checkpoints and datasets.

Layout (both kinds)::

    MDNKIT-<KIND> <major>.<minor>\\n
    <header: one line of compact JSON, keys sorted>\\n
    <payload: concatenated arrays, float64 little-endian, row-major>

``KIND`` is ``CKPT`` or ``DATA``.  The header lists every array as
``{"name", "shape"}`` in payload order, the payload byte count and its
SHA-256 digest.  Loaders reject a newer major version, a wrong kind, a
payload whose length disagrees with the declared shapes, and any digest
mismatch.  Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .dynamics import Dataset, regenerate
from .mdn import Model
from .nn import ParamStore

FORMAT_MAJOR = 1
FORMAT_MINOR = 0
_DTYPE = np.dtype("<f8")
_KINDS = {"checkpoint": "CKPT", "dataset": "DATA"}
KNOWN_MODEL_KINDS = ("mdn", "mse", "rnn_mdn")


class PersistError(ValueError):
    """Malformed, truncated, corrupted or incompatible file."""


class FormatVersionError(PersistError):
    pass


# ------------------------------------------------------------------ container
def _encode(kind: str, header: dict, arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    chunks, specs = [], []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        specs.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes(order="C"))
    payload = b"".join(chunks)
    head = dict(header)
    head.update(arrays=specs, payload_bytes=len(payload), sha256=hashlib.sha256(payload).hexdigest())
    magic = f"MDNKIT-{_KINDS[kind]} {FORMAT_MAJOR}.{FORMAT_MINOR}\n".encode("ascii")
    text = json.dumps(head, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return magic + text + b"\n" + payload


def _decode(kind: str, blob: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    first = blob.find(b"\n")
    second = blob.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise PersistError("missing header lines")
    try:
        tag, ver = blob[:first].decode("ascii").split(" ")
        major, minor = (int(v) for v in ver.split("."))
    except ValueError:
        raise PersistError("bad magic line") from None
    if tag != f"MDNKIT-{_KINDS[kind]}":
        raise PersistError(f"expected a {kind} file, found {tag!r}")
    if major > FORMAT_MAJOR:
        raise FormatVersionError(f"file format {major}.{minor} is newer than supported {FORMAT_MAJOR}.x")
    if major < FORMAT_MAJOR:
        raise FormatVersionError(f"file format {major}.{minor} is no longer supported")
    try:
        head = json.loads(blob[first + 1:second].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PersistError(f"unreadable header: {exc}") from None
    payload = blob[second + 1:]
    if len(payload) != head.get("payload_bytes"):
        raise PersistError(f"payload is {len(payload)} bytes, header declares {head.get('payload_bytes')}")
    declared = sum(int(np.prod(s["shape"], dtype=np.int64)) for s in head["arrays"]) * _DTYPE.itemsize
    if declared != len(payload):
        raise PersistError(f"declared shapes need {declared} bytes, payload has {len(payload)}")
    if hashlib.sha256(payload).hexdigest() != head.get("sha256"):
        raise PersistError("payload checksum mismatch")
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    off = 0
    for spec in head["arrays"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_DTYPE, count=n, offset=off).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(np.float64)     # native-endian copy
        off += n * _DTYPE.itemsize
    return head, arrays


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# ------------------------------------------------------------------ checkpoints
def save_checkpoint(path, model: Model, seed: int = 0, step: int = 0, extra: dict | None = None) -> None:
    header = {"architecture": model.descriptor(), "K": model.K, "d": model.d_out, "seed": int(seed),
              "step": int(step), "extra": extra or {}}
    _atomic_write(path, _encode("checkpoint", header, model.params.arrays()))


def load_checkpoint(path, with_header: bool = False):
    head, arrays = _decode("checkpoint", _read(path))
    arch = dict(head.get("architecture") or {})
    if arch.get("kind") not in KNOWN_MODEL_KINDS:
        raise PersistError(f"unknown architecture tag {arch.get('kind')!r}")
    model = Model(**arch)
    expected = OrderedDict(model.shapes())
    got = OrderedDict((k, tuple(v.shape)) for k, v in arrays.items())
    if list(expected.items()) != list(got.items()):
        raise PersistError("stored arrays do not match the architecture")
    model.params = ParamStore.from_arrays(arrays)
    return (model, head) if with_header else model


# ------------------------------------------------------------------ datasets
def save_dataset(path, ds: Dataset) -> None:
    if len(ds) == 0:
        raise PersistError("refusing to save an empty dataset")
    header = {"meta": ds.meta, "N": len(ds), "d_in": ds.d_in, "d_out": ds.d_out}
    _atomic_write(path, _encode("dataset", header, OrderedDict(X=ds.X, Y=ds.Y)))


def load_dataset(path, with_header: bool = False):
    head, arrays = _decode("dataset", _read(path))
    if list(arrays) != ["X", "Y"]:
        raise PersistError("dataset payload must hold X then Y")
    X, Y = arrays["X"], arrays["Y"]
    if X.shape != (head["N"], head["d_in"]) or Y.shape != (head["N"], head["d_out"]):
        raise PersistError(f"payload shapes {X.shape}, {Y.shape} disagree with header "
                           f"N={head['N']}, d_in={head['d_in']}, d_out={head['d_out']}")
    ds = Dataset(X, Y, head["meta"])
    return (ds, head) if with_header else ds


def regenerate_from_file(path) -> Dataset:
    """Rebuild a stored dataset from its header alone."""
    _, head = load_dataset(path, with_header=True)
    return regenerate(head["meta"])
