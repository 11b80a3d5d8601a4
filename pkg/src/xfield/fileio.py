"""Binary file formats for volumes, projection stacks, and previews.

Both container formats share one layout: a 16-byte magic field (8
ASCII identifier bytes, zero padded), a 4-byte little-endian length,
that many bytes of UTF-8 JSON header, then a raw little-endian float32
payload. Write-then-read round-trips are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import FileFormatError
from .phantoms import ProjectionSet, VoxelVolume

VOLUME_MAGIC = b"XFEVOL01"
PROJECTION_MAGIC = b"XFEPRJ01"
_MAGIC_FIELD = 16


def _write_container(path, magic: bytes, header: dict, payload: np.ndarray) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic.ljust(_MAGIC_FIELD, b"\0"))
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        f.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def _read_container(path, magic: bytes) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _MAGIC_FIELD + 4:
        raise FileFormatError(f"{path}: file too short ({len(raw)} bytes)")
    if raw[:_MAGIC_FIELD] != magic.ljust(_MAGIC_FIELD, b"\0"):
        raise FileFormatError(
            f"{path}: bad magic {raw[:8]!r} at offset 0, expected {magic!r}"
        )
    header_len = int.from_bytes(raw[_MAGIC_FIELD : _MAGIC_FIELD + 4], "little")
    header_end = _MAGIC_FIELD + 4 + header_len
    if len(raw) < header_end:
        raise FileFormatError(
            f"{path}: truncated header, expected {header_len} bytes at offset "
            f"{_MAGIC_FIELD + 4}, file ends at {len(raw)}"
        )
    try:
        header = json.loads(raw[_MAGIC_FIELD + 4 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: unreadable JSON header: {exc}") from exc
    body = raw[header_end:]
    if len(body) % 4:
        raise FileFormatError(
            f"{path}: payload of {len(body)} bytes at offset {header_end} is "
            f"not a whole number of float32 values"
        )
    payload = np.frombuffer(body, dtype="<f4")
    return header, payload


def write_volume(path, vol: VoxelVolume) -> None:
    header = {
        "dims": list(vol.dims),
        "spacing": [float(s) for s in vol.spacing],
        "dtype": "f32le",
        "order": "x-fastest",
    }
    # stored x-fastest: transpose so x varies quickest in the flat stream
    payload = vol.data.transpose(2, 1, 0).reshape(-1)
    _write_container(path, VOLUME_MAGIC, header, payload)


def read_volume(path) -> VoxelVolume:
    header, payload = _read_container(path, VOLUME_MAGIC)
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = np.asarray(header["spacing"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: bad volume header: {exc}") from exc
    expected = int(np.prod(dims))
    if payload.size != expected:
        raise FileFormatError(
            f"{path}: payload holds {payload.size} floats "
            f"({payload.size * 4} bytes), dims {dims} require {expected} "
            f"({expected * 4} bytes)"
        )
    data = payload.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return VoxelVolume(dims, spacing, np.ascontiguousarray(data))


def write_projections(path, proj: ProjectionSet) -> None:
    v, h, w = proj.images.shape
    header = {
        "views": v,
        "height": h,
        "width": w,
        "angles": [float(a) for a in proj.angles],
        "i0": float(proj.i0),
        "noise_fraction": float(proj.noise_fraction),
        "seed": proj.seed,
    }
    _write_container(path, PROJECTION_MAGIC, header, proj.images.reshape(-1))


def read_projections(path) -> ProjectionSet:
    header, payload = _read_container(path, PROJECTION_MAGIC)
    try:
        v, h, w = int(header["views"]), int(header["height"]), int(header["width"])
        angles = np.asarray(header["angles"], dtype=np.float64)
        i0 = float(header["i0"])
        noise = float(header.get("noise_fraction", 0.0))
        seed = header.get("seed")
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: bad projection header: {exc}") from exc
    if angles.size != v:
        raise FileFormatError(f"{path}: {v} views but {angles.size} angles")
    if payload.size != v * h * w:
        raise FileFormatError(
            f"{path}: payload holds {payload.size} floats, header promises "
            f"{v * h * w}"
        )
    return ProjectionSet(
        images=np.ascontiguousarray(payload.reshape(v, h, w)),
        angles=angles,
        i0=i0,
        noise_fraction=noise,
        seed=seed,
    )


def write_pgm(path, image: np.ndarray, lo: float | None = None, hi: float | None = None):
    """8-bit binary PGM preview of a float image (lossy, for eyeballs)."""
    img = np.asarray(image, dtype=np.float64)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.clip((img - lo) * scale, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_raw_f32(path, array: np.ndarray) -> None:
    """Exact float32 dump (no header) alongside PGM previews."""
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
