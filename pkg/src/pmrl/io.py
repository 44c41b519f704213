"""Raster, point-cloud and camera file formats.

PFM (Portable Float Map)
    ASCII header of three newline-terminated lines: ``PF`` (3 channels) or
    ``Pf`` (1 channel); ``<width> <height>``; a scale whose sign gives the
    byte order (negative means little-endian). Then ``height`` rows of
    float32 samples, bottom row first, channels interleaved. Writers here
    always emit little-endian (scale ``-1.0``).

PLY
    ``binary_little_endian 1.0`` with one element ``vertex`` carrying float32
    properties ``x y z nx ny nz`` in that order. Header, byte for byte::

        ply
        format binary_little_endian 1.0
        element vertex <N>
        property float x
        property float y
        property float z
        property float nx
        property float ny
        property float nz
        end_header

Camera text
    One camera per non-comment line, 25 whitespace-separated decimals:
    ``K`` (9, row-major), ``R`` (9, row-major, world→camera), ``t`` (3),
    width, height, d_min, d_max. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import ParseError
from .geometry import Camera

# -- PFM ------------------------------------------------------------------


def write_pfm(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim == 2:
        tag = b"Pf"
    elif array.ndim == 3 and array.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM stores [H,W] or [H,W,3] arrays, got {array.shape}")
    height, width = array.shape[:2]
    header = tag + b"\n" + f"{width} {height}\n".encode() + b"-1.0\n"
    data = np.ascontiguousarray(np.flipud(array), dtype="<f4")
    Path(path).write_bytes(header + data.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into float32 ``[H, W]`` or ``[H, W, 3]``."""
    buf = Path(path).read_bytes()
    pos = 0
    lines = []
    for what in ("type", "dimensions", "scale"):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise ParseError(path, pos, f"truncated header: missing {what} line")
        lines.append(buf[pos:end].strip())
        pos = end + 1
    tag, dims, scale = lines
    if tag == b"PF":
        channels = 3
    elif tag == b"Pf":
        channels = 1
    else:
        raise ParseError(path, 0, f"bad PFM type {tag!r}")
    try:
        width, height = (int(v) for v in dims.split())
        scale_value = float(scale)
    except ValueError as exc:
        raise ParseError(path, len(lines[0]) + 1, f"bad PFM header {dims!r} / {scale!r}") from exc
    if width <= 0 or height <= 0 or scale_value == 0:
        raise ParseError(path, len(lines[0]) + 1, "non-positive extents or zero scale")
    dtype = "<f4" if scale_value < 0 else ">f4"
    count = width * height * channels
    available = (len(buf) - pos) // 4
    if available < count:
        raise ParseError(
            path,
            pos + available * 4,
            f"truncated raster: expected {count} samples, found {available}",
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(data.reshape(shape)).copy()


# -- PLY ------------------------------------------------------------------

_PLY_PROPS = ("x", "y", "z", "nx", "ny", "nz")


def ply_header(n: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {p}" for p in _PLY_PROPS]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(path, points: np.ndarray, normals: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(points) != len(normals):
        raise ValueError("points and normals differ in count")
    body = np.ascontiguousarray(np.hstack([points, normals]), dtype="<f4")
    Path(path).write_bytes(ply_header(len(points)) + body.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    marker = b"end_header\n"
    end = buf.find(marker)
    if end < 0:
        raise ParseError(path, 0, "missing end_header")
    header = buf[:end].decode("ascii", errors="replace").splitlines()
    if not header or header[0] != "ply" or "format binary_little_endian 1.0" not in header:
        raise ParseError(path, 0, "only binary_little_endian PLY is supported")
    count = None
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[2])
    props = [line.split()[2] for line in header if line.startswith("property")]
    if count is None or tuple(props) != _PLY_PROPS:
        raise ParseError(path, 0, f"unexpected vertex layout {props}")
    pos = end + len(marker)
    need = count * 6 * 4
    if len(buf) - pos < need:
        raise ParseError(path, len(buf), f"truncated vertex data: need {need} bytes")
    data = np.frombuffer(buf, dtype="<f4", count=count * 6, offset=pos).reshape(count, 6)
    return data[:, :3].astype(np.float64), data[:, 3:].astype(np.float64)


# -- cameras --------------------------------------------------------------

CAMERA_HEADER = "# K(9 row-major) R(9 row-major, world->camera) t(3) width height d_min d_max"


def write_cameras(path, cameras: list[Camera]) -> None:
    lines = [CAMERA_HEADER]
    for cam in cameras:
        values = [*cam.K.reshape(-1), *cam.R.reshape(-1), *cam.t, cam.width, cam.height, cam.d_min, cam.d_max]
        lines.append(" ".join(repr(float(v)) if not isinstance(v, int) else str(v) for v in values))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[Camera]:
    text = Path(path).read_text()
    cameras = []
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            fields = stripped.split()
            if len(fields) != 25:
                raise ParseError(path, offset, f"camera line has {len(fields)} fields, expected 25")
            try:
                v = [float(f) for f in fields]
            except ValueError as exc:
                raise ParseError(path, offset, f"non-numeric camera field: {exc}") from exc
            try:
                cameras.append(
                    Camera(
                        np.array(v[0:9]).reshape(3, 3),
                        np.array(v[9:18]).reshape(3, 3),
                        np.array(v[18:21]),
                        int(v[21]),
                        int(v[22]),
                        v[23],
                        v[24],
                    )
                )
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise ParseError(path, offset, f"invalid camera: {exc}") from exc
        offset += len(line.encode())
    return cameras
