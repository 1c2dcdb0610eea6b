"""File formats: MetaImage-style volumes and fields, manifests, PGM slices.

Volumes go to a text ``.mhd`` header plus a raw little-endian binary file
with x varying fastest; intensities are stored as 32-bit floats, vector
fields as 64-bit with 3 interleaved components per voxel.  Everything
written here is byte-deterministic: no timestamps, fixed key order,
round-trippable number formatting.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import ValidationError
from .grid import DisplacementField, GridDomain, ScalarVolume

__all__ = [
    "write_volume",
    "read_volume",
    "write_field",
    "read_field",
    "write_manifest",
    "write_pgm",
    "render_coronal_slice",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def _raw_name(mhd_path) -> str:
    base = os.path.basename(str(mhd_path))
    if not base.endswith(".mhd"):
        raise ValidationError(f"expected a .mhd path, got {mhd_path!r}")
    return base[:-4] + ".raw"


def _write_mhd(path, domain: GridDomain, element_type: str, channels: int, payload: bytes):
    raw_name = _raw_name(path)
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {domain.dims[0]} {domain.dims[1]} {domain.dims[2]}",
        f"ElementSpacing = {_fmt(domain.spacing[0])} {_fmt(domain.spacing[1])} {_fmt(domain.spacing[2])}",
        f"Offset = {_fmt(domain.origin[0])} {_fmt(domain.origin[1])} {_fmt(domain.origin[2])}",
        f"ElementNumberOfChannels = {channels}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {raw_name}",
    ]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(os.path.dirname(str(path)) or ".", raw_name), "wb") as fh:
        fh.write(payload)


def _parse_mhd(path):
    header = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: malformed header line {line!r}")
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    for key in ("NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile"):
        if key not in header:
            raise ValidationError(f"{path}: missing header key {key}")
    if header["NDims"] != "3":
        raise ValidationError(f"{path}: only NDims = 3 is supported, got {header['NDims']}")
    if header.get("BinaryDataByteOrderMSB", "False") != "False":
        raise ValidationError(f"{path}: big-endian data is not supported")
    try:
        dims = tuple(int(x) for x in header["DimSize"].split())
        spacing = tuple(float(x) for x in header["ElementSpacing"].split())
        origin = tuple(float(x) for x in header.get("Offset", "0 0 0").split())
    except ValueError as exc:
        raise ValidationError(f"{path}: malformed numeric header field: {exc}") from exc
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise ValidationError(f"{path}: DimSize/ElementSpacing/Offset must have 3 entries")
    raw = header["ElementDataFile"]
    raw_path = os.path.join(os.path.dirname(str(path)) or ".", raw)
    return header, GridDomain(dims, spacing, origin), raw_path


def _read_raw(raw_path, dtype, count, what):
    with open(raw_path, "rb") as fh:
        blob = fh.read()
    expected = count * np.dtype(dtype).itemsize
    if len(blob) != expected:
        raise ValidationError(
            f"{raw_path}: payload is {len(blob)} bytes, header implies {expected} ({what})"
        )
    return np.frombuffer(blob, dtype=dtype)


def write_volume(vol: ScalarVolume, path):
    """Write intensities as MET_FLOAT; lossless for float32-representable data."""
    payload = np.ascontiguousarray(vol.data.transpose(2, 1, 0)).astype("<f4").tobytes()
    _write_mhd(path, vol.domain, "MET_FLOAT", 1, payload)


def read_volume(path, background: float = -1000.0) -> ScalarVolume:
    header, domain, raw_path = _parse_mhd(path)
    if header["ElementType"] != "MET_FLOAT":
        raise ValidationError(
            f"{path}: expected MET_FLOAT intensities, got {header['ElementType']}"
        )
    if header.get("ElementNumberOfChannels", "1") != "1":
        raise ValidationError(f"{path}: scalar volume expected")
    flat = _read_raw(raw_path, "<f4", domain.n_voxels, "scalar volume")
    data = flat.reshape(domain.dims[2], domain.dims[1], domain.dims[0]).transpose(2, 1, 0)
    return ScalarVolume(data.astype(np.float64), domain.spacing, domain.origin, background)


def write_field(field: DisplacementField, path):
    """Write a displacement field as 3-channel MET_DOUBLE (bit-exact round trip)."""
    payload = np.ascontiguousarray(field.u.transpose(2, 1, 0, 3)).astype("<f8").tobytes()
    _write_mhd(path, field.domain, "MET_DOUBLE", 3, payload)


def read_field(path) -> DisplacementField:
    header, domain, raw_path = _parse_mhd(path)
    if header["ElementType"] != "MET_DOUBLE":
        raise ValidationError(
            f"{path}: expected MET_DOUBLE displacements, got {header['ElementType']}"
        )
    if header.get("ElementNumberOfChannels") != "3":
        raise ValidationError(f"{path}: displacement fields need 3 channels per voxel")
    flat = _read_raw(raw_path, "<f8", domain.n_voxels * 3, "vector field")
    u = flat.reshape(domain.dims[2], domain.dims[1], domain.dims[0], 3).transpose(2, 1, 0, 3)
    return DisplacementField(u.astype(np.float64), domain.spacing, domain.origin)


def write_manifest(out_dir, filenames, extra: dict = None) -> str:
    """Write manifest.json listing each file with its size and sha256."""
    entries = []
    for name in sorted(filenames):
        full = os.path.join(str(out_dir), name)
        with open(full, "rb") as fh:
            blob = fh.read()
        entries.append(
            {"name": name, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()}
        )
    doc = {"files": entries}
    if extra:
        doc.update(extra)
    path = os.path.join(str(out_dir), "manifest.json")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_pgm(path, image: np.ndarray):
    """Binary (P5) PGM of a uint8 image, rows top to bottom."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValidationError("PGM image must be a 2-D uint8 array")
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _draw_line(img, r0, c0, r1, c1, value):
    # dense sampling along the segment, enough points to leave no gaps
    n = int(max(abs(r1 - r0), abs(c1 - c0))) * 2 + 1
    rr = np.rint(np.linspace(r0, r1, n)).astype(int)
    cc = np.rint(np.linspace(c0, c1, n)).astype(int)
    keep = (rr >= 0) & (rr < img.shape[0]) & (cc >= 0) & (cc < img.shape[1])
    img[rr[keep], cc[keep]] = value


def render_coronal_slice(
    vol: ScalarVolume,
    field: DisplacementField = None,
    y_index: int = None,
    window=(-1000.0, 400.0),
    arrow_step: int = 6,
    arrow_scale: float = 1.0,
) -> np.ndarray:
    """Grayscale coronal slice (z up, x across) with optional motion arrows.

    Intensities are windowed to [lo, hi]; arrows show the in-plane (x, z)
    displacement at a sparse grid of voxels, drawn white with a bright tip.
    """
    lo, hi = float(window[0]), float(window[1])
    if hi <= lo:
        raise ValidationError("window must satisfy lo < hi")
    nx, ny, nz = vol.dims
    if y_index is None:
        y_index = ny // 2
    if not 0 <= y_index < ny:
        raise ValidationError(f"y_index {y_index} outside 0..{ny - 1}")
    sl = vol.data[:, y_index, :]  # (nx, nz)
    img = (np.clip(sl, lo, hi) - lo) / (hi - lo)
    img = np.flip(img.T, axis=0)  # rows: z top-down, cols: x
    img = np.round(img * 255.0).astype(np.uint8)
    if field is not None:
        field.domain.require_compatible(vol.domain, "slice rendering")
        for i in range(arrow_step // 2, nx, arrow_step):
            for k in range(arrow_step // 2, nz, arrow_step):
                ux, _, uz = field.u[i, y_index, k]
                dc = arrow_scale * ux / vol.spacing[0]
                dr = -arrow_scale * uz / vol.spacing[2]
                if dc * dc + dr * dr < 0.25:
                    continue
                r0, c0 = nz - 1 - k, i
                _draw_line(img, r0, c0, r0 + dr, c0 + dc, 255)
                tip_r, tip_c = int(round(r0 + dr)), int(round(c0 + dc))
                if 0 <= tip_r < img.shape[0] and 0 <= tip_c < img.shape[1]:
                    img[tip_r, tip_c] = 0
    return img
