"""Bit-exact readers and writers for depth grids, camera files, and dataset
manifests.

Depth formats:

* PFM      — ``Pf`` header, ``W H`` dims line, scale line whose sign encodes
  endianness (negative = little-endian), float32 rows stored bottom-to-top.
  PFM carries no mask, so non-finite values read as invalid and invalid
  pixels are written as NaN.
* PNG16    — 16-bit grayscale, value times ``scale`` meters per unit;
  0 is the invalid sentinel. Out-of-range values are clamped and counted.
* RAWF32   — this package's native interchange format: magic ``DKF1``, two
  little-endian uint32 dims, then row-major little-endian float32 with NaN
  marking invalid pixels. Unlike PFM/PNG16 it round-trips masks exactly.

Camera files are plain text, one ``key value`` pair per line (fx, fy, cx,
cy, width, height) or a nine-number row-major ``K`` line plus dims.

Manifests are tab-separated lines of
``rgb<TAB>pred<TAB>gt<TAB>camera[<TAB>sigma[<TAB>pred_camera]]`` with ``#``
comments, ``-`` placeholders for absent optional columns, and optional
``@dataset`` / ``@max_depth`` / ``@png_scale`` directive lines. Relative
paths resolve against the manifest's directory.
"""

from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DomainError, ParseError, UsageError
from .geometry import DepthMap, Intrinsics

__all__ = [
    "DepthFileFormat",
    "DatasetManifest",
    "ManifestRecord",
    "read_depth",
    "write_depth",
    "read_camera",
    "write_camera",
    "read_manifest",
    "write_manifest",
]

MAX_DIM = 2**16
DEFAULT_PNG16_SCALE = 1e-3


class DepthFileFormat(enum.Enum):
    PFM = "pfm"
    PNG16 = "png16"
    RAWF32 = "rawf32"


_EXTENSIONS = {
    ".pfm": DepthFileFormat.PFM,
    ".png": DepthFileFormat.PNG16,
    ".raw": DepthFileFormat.RAWF32,
    ".rawf32": DepthFileFormat.RAWF32,
}


def _infer_format(path: Path, fmt: DepthFileFormat | None) -> DepthFileFormat:
    if fmt is not None:
        return fmt
    ext = path.suffix.lower()
    if ext not in _EXTENSIONS:
        raise UsageError(f"cannot infer depth format from extension {ext!r} of {path}")
    return _EXTENSIONS[ext]


def _check_dims(width: int, height: int, path: Path, offset: int) -> None:
    if not (1 <= width <= MAX_DIM and 1 <= height <= MAX_DIM):
        raise ParseError(
            f"unreasonable dimensions {width}x{height} (cap {MAX_DIM})",
            path=path, offset=offset,
        )


def read_depth(
    path, fmt: DepthFileFormat | None = None, scale: float = DEFAULT_PNG16_SCALE
) -> DepthMap:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    data = path.read_bytes()
    if fmt is DepthFileFormat.PFM:
        return _read_pfm(data, path)
    if fmt is DepthFileFormat.PNG16:
        return _read_png16(path, scale)
    return _read_rawf32(data, path)


def write_depth(
    depth: DepthMap, path, fmt: DepthFileFormat | None = None,
    scale: float = DEFAULT_PNG16_SCALE,
) -> int:
    """Write a depth map; returns the number of clipped pixels (PNG16 only,
    always 0 for the float formats)."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt is DepthFileFormat.PFM:
        _write_pfm(depth, path)
        return 0
    if fmt is DepthFileFormat.PNG16:
        return _write_png16(depth, path, scale)
    _write_rawf32(depth, path)
    return 0


# --- PFM -------------------------------------------------------------------


def _read_pfm(data: bytes, path: Path) -> DepthMap:
    pos = 0

    def next_token() -> tuple[bytes, int]:
        nonlocal pos
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated header", path=path, offset=start)
        return data[start:pos], start

    magic, off = next_token()
    if magic != b"Pf":
        raise ParseError(f"bad magic {magic!r}, expected 'Pf'", path=path, offset=off)
    wtok, off = next_token()
    htok, off2 = next_token()
    try:
        width, height = int(wtok), int(htok)
    except ValueError:
        raise ParseError("dims are not integers", path=path, offset=off) from None
    _check_dims(width, height, path, off)
    stok, off = next_token()
    try:
        scale = float(stok)
    except ValueError:
        raise ParseError("bad scale token", path=path, offset=off) from None
    pos += 1  # single whitespace terminates the header
    expected = width * height * 4
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise ParseError(
            f"raster truncated: need {expected} bytes, have {len(raster)}",
            path=path, offset=pos + len(raster),
        )
    dtype = "<f4" if scale < 0 else ">f4"
    grid = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    grid = grid[::-1].astype(np.float64)  # stored bottom-to-top
    mask = np.isfinite(grid) & (grid > 0)
    return DepthMap(values=grid, mask=mask)


def _write_pfm(depth: DepthMap, path: Path) -> None:
    values = np.where(depth.mask, depth.values, np.nan).astype(np.float32)
    header = f"Pf\n{depth.width} {depth.height}\n-1.0\n".encode("ascii")
    path.write_bytes(header + values[::-1].astype("<f4").tobytes())


# --- PNG16 -----------------------------------------------------------------


def _read_png16(path: Path, scale: float) -> DepthMap:
    if not scale > 0:
        raise UsageError(f"PNG16 scale must be positive, got {scale}")
    try:
        img = Image.open(path)
        arr = np.asarray(img)
    except Exception as exc:
        raise ParseError(f"not a readable PNG: {exc}", path=path) from exc
    if arr.ndim != 2:
        raise ParseError(f"expected single-channel PNG, got shape {arr.shape}", path=path)
    arr = arr.astype(np.uint32)
    mask = arr != 0
    values = arr.astype(np.float64) * scale
    return DepthMap(values=np.where(mask, values, np.nan), mask=mask)


def _write_png16(depth: DepthMap, path: Path, scale: float) -> int:
    if not scale > 0:
        raise UsageError(f"PNG16 scale must be positive, got {scale}")
    units = np.zeros(depth.values.shape, dtype=np.float64)
    units[depth.mask] = np.round(depth.values[depth.mask] / scale)
    # 0 is the invalid sentinel: valid pixels quantizing to 0 become 1 unit
    too_low = depth.mask & (units < 1)
    too_high = depth.mask & (units > 65535)
    clipped = int(too_low.sum() + too_high.sum())
    units = np.clip(units, 0, 65535)
    units[too_low] = 1
    if clipped:
        warnings.warn(f"{clipped} depth values clipped to the PNG16 range", stacklevel=2)
    Image.fromarray(units.astype(np.uint16)).save(path)
    return clipped


# --- RAWF32 ----------------------------------------------------------------

RAWF32_MAGIC = b"DKF1"


def _read_rawf32(data: bytes, path: Path) -> DepthMap:
    if data[:4] != RAWF32_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {RAWF32_MAGIC!r}", path=path, offset=0)
    if len(data) < 12:
        raise ParseError("truncated header", path=path, offset=len(data))
    width, height = struct.unpack_from("<II", data, 4)
    _check_dims(width, height, path, 4)
    expected = 12 + width * height * 4
    if len(data) != expected:
        raise ParseError(
            f"raster size mismatch: need {expected} bytes, have {len(data)}",
            path=path, offset=min(len(data), expected),
        )
    grid = np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width)
    grid = grid.astype(np.float64)
    mask = np.isfinite(grid) & (grid > 0)
    return DepthMap(values=grid, mask=mask)


def _write_rawf32(depth: DepthMap, path: Path) -> None:
    values = np.where(depth.mask, depth.values, np.nan).astype("<f4")
    header = RAWF32_MAGIC + struct.pack("<II", depth.width, depth.height)
    path.write_bytes(header + values.tobytes())


# --- camera files ----------------------------------------------------------

_CAMERA_FIELDS = ("fx", "fy", "cx", "cy", "width", "height")


def read_camera(path) -> Intrinsics:
    path = Path(path)
    fields: dict[str, float] = {}
    k_row: list[float] | None = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip().replace("=", " ").replace(":", " ")
        if not line:
            continue
        tokens = line.split()
        key = tokens[0].lower()
        try:
            numbers = [float(t) for t in tokens[1:]]
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric value for {key!r}", path=path) from None
        if key == "k":
            if len(numbers) != 9:
                raise ParseError(f"line {lineno}: K needs 9 numbers", path=path)
            k_row = numbers
        elif key in _CAMERA_FIELDS:
            if len(numbers) != 1:
                raise ParseError(f"line {lineno}: {key} needs one value", path=path)
            fields[key] = numbers[0]
        else:
            warnings.warn(f"{path}: ignoring unknown camera field {key!r}", stacklevel=2)
    if k_row is not None:
        fields.setdefault("fx", k_row[0])
        fields.setdefault("fy", k_row[4])
        fields.setdefault("cx", k_row[2])
        fields.setdefault("cy", k_row[5])
    missing = [f for f in _CAMERA_FIELDS if f not in fields]
    if missing:
        raise ParseError(f"missing camera fields: {', '.join(missing)}", path=path)
    if fields["fx"] <= 0 or fields["fy"] <= 0:
        raise DomainError(f"{path}: focal lengths must be positive")
    return Intrinsics(
        fx=fields["fx"], fy=fields["fy"], cx=fields["cx"], cy=fields["cy"],
        width=int(fields["width"]), height=int(fields["height"]),
    )


def write_camera(K: Intrinsics, path) -> None:
    text = "".join(
        f"{name} {getattr(K, name):.17g}\n" if name not in ("width", "height")
        else f"{name} {getattr(K, name)}\n"
        for name in _CAMERA_FIELDS
    )
    Path(path).write_text(text)


# --- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    rgb: Path
    pred_depth: Path
    gt_depth: Path
    camera: Path
    sigma: Path | None = None
    pred_camera: Path | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    name: str
    max_depth: float
    png_scale: float = DEFAULT_PNG16_SCALE
    directory: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.max_depth > 0:
            raise DomainError(f"max_depth must be positive, got {self.max_depth}")


DEFAULT_MAX_DEPTH = 100.0


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    name = path.stem
    max_depth = DEFAULT_MAX_DEPTH
    png_scale = DEFAULT_PNG16_SCALE
    records: list[ManifestRecord] = []
    seen_pred: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.rstrip("\r")
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("@"):
            parts = stripped[1:].split(None, 1)
            if len(parts) != 2:
                raise ParseError(f"line {lineno}: bad directive {stripped!r}", path=path)
            key, value = parts[0].lower(), parts[1].strip()
            if key == "dataset":
                name = value
            elif key == "max_depth":
                max_depth = float(value)
            elif key == "png_scale":
                png_scale = float(value)
            else:
                warnings.warn(f"{path}: ignoring unknown directive @{key}", stacklevel=2)
            continue
        cols = [c.strip() for c in line.split("\t")]
        if len(cols) < 4:
            raise ParseError(f"line {lineno}: need at least 4 tab-separated paths", path=path)
        if any(not c for c in cols[:4]):
            raise ParseError(f"line {lineno}: empty required path", path=path)
        while len(cols) < 6:
            cols.append("-")

        def resolve(token: str) -> Path | None:
            if token in ("", "-"):
                return None
            p = Path(token)
            return p if p.is_absolute() else base / p

        if cols[1] in seen_pred:
            warnings.warn(f"{path}: duplicate prediction path {cols[1]!r}", stacklevel=2)
        seen_pred.add(cols[1])
        records.append(
            ManifestRecord(
                rgb=resolve(cols[0]),
                pred_depth=resolve(cols[1]),
                gt_depth=resolve(cols[2]),
                camera=resolve(cols[3]),
                sigma=resolve(cols[4]),
                pred_camera=resolve(cols[5]),
            )
        )
    return DatasetManifest(
        records=records, name=name, max_depth=max_depth, png_scale=png_scale, directory=base
    )


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent

    def rel(p: Path | None) -> str:
        if p is None:
            return "-"
        try:
            return str(Path(p).relative_to(base))
        except ValueError:
            return str(p)

    lines = [
        f"@dataset {manifest.name}",
        f"@max_depth {manifest.max_depth:.17g}",
        f"@png_scale {manifest.png_scale:.17g}",
    ]
    for r in manifest.records:
        lines.append("\t".join(
            rel(p) for p in (r.rgb, r.pred_depth, r.gt_depth, r.camera, r.sigma, r.pred_camera)
        ))
    path.write_text("\n".join(lines) + "\n")
