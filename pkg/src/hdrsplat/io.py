"""File formats: the ``CHS1`` binary container, PFM and PNG images, pose lists.

Container layout (little-endian)::

    b"CHS1" | u32 version | u32 header length | header (UTF-8 JSON) | array payloads

The header lists ``{"name", "dtype", "shape"}`` for each array in the order its
payload follows, plus a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import png

MAGIC = b"CHS1"
CONTAINER_VERSION = 1

_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "i4": "<i4", "u1": "u1"}


class FormatError(ValueError):
    pass


def _dtype_code(a: np.ndarray) -> str:
    kind = a.dtype.kind + str(a.dtype.itemsize)
    if kind not in _DTYPES:
        raise FormatError(f"unsupported array dtype {a.dtype}")
    return kind


def pack_container(kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries, payloads = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    header = json.dumps(
        {"kind": kind, "meta": dict(meta or {}), "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return MAGIC + struct.pack("<II", CONTAINER_VERSION, len(header)) + header + b"".join(payloads)


def unpack_container(data: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if data[:4] != MAGIC:
        raise FormatError("not a CHS1 container")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"expected a {kind!r} container, found {header['kind']!r}")
    offset = 12 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(data, dtype=dt, count=n, offset=offset).reshape(e["shape"]).copy()
        offset += n * dt.itemsize
    if offset != len(data):
        raise FormatError("trailing bytes in container")
    return arrays, header["meta"]


def write_container(path, kind: str, arrays, meta=None) -> None:
    Path(path).write_bytes(pack_container(kind, arrays, meta))


def read_container(path, kind: str | None = None):
    return unpack_container(Path(path).read_bytes(), kind)


# ---------------------------------------------------------------------------
# images

def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0); rows stored bottom-to-top."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        ident = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        ident = b"PF"
    else:
        raise FormatError(f"PFM needs HxW or HxWx3, got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(ident + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        ident = f.readline().strip()
        if ident not in (b"PF", b"Pf"):
            raise FormatError(f"bad PFM identifier {ident!r}")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if ident == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def quantize(values: np.ndarray, bits: int = 8) -> np.ndarray:
    """Round-half-up of ``[0, 1]`` values to integer levels."""
    top = (1 << bits) - 1
    return np.floor(np.clip(values, 0.0, 1.0) * top + 0.5).astype(np.uint16 if bits > 8 else np.uint8)


def write_png(path, image: np.ndarray, bits: int = 8) -> None:
    """RGB PNG from values in ``[0, 1]`` (8 or 16 bit)."""
    if bits not in (8, 16):
        raise FormatError("PNG bit depth must be 8 or 16")
    q = quantize(np.asarray(image, dtype=np.float64), bits)
    h, w = q.shape[:2]
    writer = png.Writer(w, h, greyscale=False, bitdepth=bits, compression=9)
    with open(path, "wb") as f:
        writer.write(f, q.reshape(h, w * 3).tolist())


def read_png(path) -> np.ndarray:
    """RGB PNG to float64 in ``[0, 1]``."""
    w, h, rows, info = png.Reader(filename=str(path)).asRGB()
    arr = np.array([list(r) for r in rows], dtype=np.float64).reshape(h, w, 3)
    return arr / ((1 << info["bitdepth"]) - 1)


# ---------------------------------------------------------------------------
# timestamped pose lists (``t qw qx qy qz tx ty tz``)

def write_pose_list(path, times, vectors, header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    for t, vec in zip(times, vectors):
        lines.append(" ".join(repr(float(v)) for v in (t, *vec)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pose_list(path) -> tuple[np.ndarray, np.ndarray]:
    rows = [
        [float(v) for v in line.split()]
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.lstrip().startswith("#")
    ]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 8)
    return arr[:, 0], arr[:, 1:]
