"""Point-cloud file formats: ASCII PLY, CSV, and the PGM debug raster.

PLY layout: `element vertex N` with float x/y/z properties and an
optional integer `label` property. CSV layout: header `x,y,z[,label]`.
Coordinates are written with repr() so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import os

import numpy as np

from .core import PointCloud
from .errors import ParseError

_COORD_TYPES = {"float", "float32", "double", "float64"}
_LABEL_TYPES = {"int", "int8", "int16", "int32", "uint8", "uint16", "uint32", "uchar", "char", "short", "ushort"}


def _parse_float(token: str, where: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"{where}: cannot parse '{token}' as a number") from None
    if not np.isfinite(value):
        raise ParseError(f"{where}: non-finite coordinate '{token}'")
    return value


def load_point_cloud(path: str | os.PathLike, format: str | None = None) -> PointCloud:
    """Load a cloud from ASCII PLY or CSV; format inferred from the
    extension when not given."""
    fmt = _resolve_format(path, format)
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if fmt == "ply":
        return _parse_ply(text, str(path))
    return _parse_csv(text, str(path))


def save_point_cloud(cloud: PointCloud, path: str | os.PathLike, format: str | None = None) -> None:
    """Write a cloud; refuses to write an empty one."""
    if len(cloud) == 0:
        raise ValueError("refusing to write an empty point cloud")
    fmt = _resolve_format(path, format)
    lines: list[str] = []
    if fmt == "ply":
        lines += ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
                  "property float x", "property float y", "property float z"]
        if cloud.labels is not None:
            lines.append("property int label")
        lines.append("end_header")
    else:
        lines.append("x,y,z,label" if cloud.labels is not None else "x,y,z")
    sep = " " if fmt == "ply" else ","
    for i, p in enumerate(cloud.points):
        row = sep.join(repr(float(v)) for v in p)
        if cloud.labels is not None:
            row += f"{sep}{int(cloud.labels[i])}"
        lines.append(row)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def _resolve_format(path: str | os.PathLike, format: str | None) -> str:
    fmt = (format or os.path.splitext(str(path))[1].lstrip(".")).lower()
    if fmt not in ("ply", "csv"):
        raise ValueError(f"unsupported format '{fmt}' (expected 'ply' or 'csv')")
    return fmt


def _parse_ply(text: str, path: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: not a PLY file (missing 'ply' magic)")
    n_vertex = None
    in_vertex_element = False
    vertex_props: list[tuple[str, str]] = []
    body_start = None
    for ln, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1:2] != ["ascii"]:
                raise ParseError(f"{path}:{ln}: only ASCII PLY is supported")
        elif parts[0] == "element":
            in_vertex_element = parts[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertex = int(parts[2])
                except (IndexError, ValueError):
                    raise ParseError(f"{path}:{ln}: malformed element line '{raw.strip()}'") from None
        elif parts[0] == "property" and in_vertex_element:
            if len(parts) != 3:
                raise ParseError(f"{path}:{ln}: malformed property line '{raw.strip()}'")
            vertex_props.append((parts[1], parts[2]))
        elif parts[0] == "end_header":
            body_start = ln
            break
    if body_start is None or n_vertex is None:
        raise ParseError(f"{path}: malformed header (missing end_header or vertex element)")

    names = [name for _, name in vertex_props]
    if names[:3] != ["x", "y", "z"]:
        raise ParseError(f"{path}: vertex properties must start with x, y, z (got {names})")
    for typ, name in vertex_props[:3]:
        if typ not in _COORD_TYPES:
            raise ParseError(f"{path}: coordinate property '{name}' has non-float type '{typ}'")
    has_label = "label" in names[3:]
    if has_label:
        label_col = names.index("label")
        typ = vertex_props[label_col][0]
        if typ not in _LABEL_TYPES:
            raise ParseError(f"{path}: label property has non-integer type '{typ}'")

    body = lines[body_start:]
    if len(body) < n_vertex:
        raise ParseError(f"{path}: header promises {n_vertex} vertices, body has {len(body)} lines")
    pts = np.empty((n_vertex, 3))
    labels = np.empty(n_vertex, dtype=np.int64) if has_label else None
    for i in range(n_vertex):
        ln = body_start + 1 + i
        tokens = body[i].split()
        if len(tokens) < len(vertex_props):
            raise ParseError(f"{path}:{ln}: vertex {i} has {len(tokens)} values, expected {len(vertex_props)}")
        for c in range(3):
            pts[i, c] = _parse_float(tokens[c], f"{path}:{ln}: vertex {i}")
        if has_label:
            try:
                labels[i] = int(tokens[label_col])
            except ValueError:
                raise ParseError(f"{path}:{ln}: vertex {i} has non-integer label '{tokens[label_col]}'") from None
    return PointCloud(pts, labels)


def _parse_csv(text: str, path: str) -> PointCloud:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty CSV file")
    header = [h.strip().lower() for h in lines[0].split(",")]
    first_row = 1
    if header[:3] != ["x", "y", "z"] or (len(header) > 3 and header[3] != "label"):
        # headerless numeric files are accepted as plain coordinate rows
        if _looks_numeric(lines[0]):
            header = ["x", "y", "z"] if len(lines[0].split(",")) == 3 else ["x", "y", "z", "label"]
            first_row = 0
        else:
            raise ParseError(f"{path}:1: expected header 'x,y,z[,label]', got '{lines[0].strip()}'")
    has_label = len(header) == 4
    rows = lines[first_row:]
    pts = np.empty((len(rows), 3))
    labels = np.empty(len(rows), dtype=np.int64) if has_label else None
    for i, raw in enumerate(rows):
        ln = i + 1 + first_row
        tokens = [t.strip() for t in raw.split(",")]
        if len(tokens) != len(header):
            raise ParseError(f"{path}:{ln}: row has {len(tokens)} columns, expected {len(header)}")
        for c in range(3):
            pts[i, c] = _parse_float(tokens[c], f"{path}:{ln}")
        if has_label:
            try:
                labels[i] = int(tokens[3])
            except ValueError:
                raise ParseError(f"{path}:{ln}: non-integer label '{tokens[3]}'") from None
    return PointCloud(pts, labels)


def _looks_numeric(line: str) -> bool:
    try:
        [float(t) for t in line.split(",")]
        return True
    except ValueError:
        return False


def write_pgm(bits: np.ndarray, path: str | os.PathLike) -> None:
    """Dump a binary occupancy grid as ASCII PGM (white = set)."""
    grid = np.asarray(bits)
    rows = ["P2", f"{grid.shape[1]} {grid.shape[0]}", "255"]
    rows += [" ".join("255" if v else "0" for v in row) for row in grid]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(rows) + "\n")
