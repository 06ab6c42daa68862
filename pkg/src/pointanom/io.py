"""Point cloud, label and score files.

XYZ
    One point per line, ``x y z`` separated by whitespace.  Text after
    ``#`` is a comment; blank lines are skipped.  Extra columns are an
    error.
ASCII PLY
    ``ply`` / ``format ascii 1.0`` header with a single ``vertex``
    element.  Scalar vertex properties are allowed in any order as long as
    ``x``, ``y`` and ``z`` are present; other properties (colors, normals)
    are read and ignored.  Any other element, list properties or binary
    formats are rejected.
Labels
    One ``0`` or ``1`` per line in point order.
Scores
    CSV with header ``point_id,score``.

Colored PLY output uses ``red green blue`` uchar properties.  Labels map to
pure red (anomaly) or pure green (normal).  Scores map linearly from green
(minimum) to red (maximum): ``t = (s - min) / (max - min)``,
``red = round(255 t)``, ``green = 255 - red``, ``blue = 0``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud

PLY_SCALARS = {"char", "uchar", "short", "ushort", "int", "uint", "float", "double",
               "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64"}


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _fmt(x: float) -> str:
    return repr(float(x))


def read_xyz(path) -> PointCloud:
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].split()
            if not body:
                continue
            if len(body) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 coordinates, got {len(body)}")
            try:
                pts.append([float(v) for v in body])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric coordinate") from None
    if not pts:
        raise DataError(f"{path}: no points")
    try:
        return PointCloud(np.array(pts))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        for p in cloud.points:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")


def read_ply(path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{path}: missing 'ply' magic line")
    props: list[str] = []
    n_vertex = None
    current = None
    header_end = None
    for lineno, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise DataError(f"{path}:{lineno}: unsupported PLY format {' '.join(tok[1:])}")
        elif tok[0] == "element":
            current = tok[1] if len(tok) > 1 else ""
            if current != "vertex":
                raise DataError(f"{path}:{lineno}: unsupported PLY element '{current}'")
            n_vertex = int(tok[2])
        elif tok[0] == "property":
            if current != "vertex":
                raise DataError(f"{path}:{lineno}: property outside the vertex element")
            if tok[1] == "list":
                raise DataError(f"{path}:{lineno}: list property '{tok[-1]}' not supported")
            if tok[1] not in PLY_SCALARS:
                raise DataError(f"{path}:{lineno}: unknown property type '{tok[1]}'")
            props.append(tok[2])
        elif tok[0] == "end_header":
            header_end = lineno
            break
        else:
            raise DataError(f"{path}:{lineno}: unexpected header line '{line.strip()}'")
    if header_end is None or n_vertex is None:
        raise DataError(f"{path}: incomplete PLY header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise DataError(f"{path}: vertex element lacks x/y/z properties") from None
    pts = []
    body = [(i, ln) for i, ln in enumerate(lines[header_end:], header_end + 1) if ln.strip()]
    if len(body) < n_vertex:
        raise DataError(f"{path}: expected {n_vertex} vertices, found {len(body)}")
    for lineno, line in body[:n_vertex]:
        tok = line.split()
        if len(tok) != len(props):
            raise DataError(f"{path}:{lineno}: expected {len(props)} values, got {len(tok)}")
        try:
            pts.append([float(tok[c]) for c in cols])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value") from None
    if len(body) > n_vertex:
        raise DataError(f"{path}:{body[n_vertex][0]}: data beyond the declared vertex count")
    try:
        return PointCloud(np.array(pts).reshape(-1, 3))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def read_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read an XYZ or ASCII PLY file (format inferred from the extension)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    fmt = (fmt or path.suffix.lstrip(".") or "xyz").lower()
    if fmt == "ply":
        return read_ply(path)
    if fmt in ("xyz", "txt", "pts"):
        return read_xyz(path)
    raise DataError(f"unsupported cloud format '{fmt}'")


def score_colors(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    span = s.max() - s.min() if s.size else 0.0
    t = (s - s.min()) / span if span > 0 else np.zeros_like(s)
    red = np.rint(255 * t).astype(np.uint8)
    return np.column_stack([red, 255 - red, np.zeros_like(red)])


def label_colors(labels) -> np.ndarray:
    lab = np.asarray(labels).astype(bool)
    return np.where(lab[:, None], [255, 0, 0], [0, 255, 0]).astype(np.uint8)


def write_labeled_ply(path, cloud: PointCloud, labels=None, scores=None) -> None:
    """ASCII PLY with per-vertex colors from labels or scores (exactly one)."""
    if (labels is None) == (scores is None):
        raise ValueError("pass exactly one of labels or scores")
    values = labels if labels is not None else scores
    if len(values) != len(cloud):
        raise ValueError("labels/scores length does not match the cloud")
    rgb = label_colors(labels) if labels is not None else score_colors(scores)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\ncomment pointanom anomaly map\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
        for p, c in zip(cloud.points, rgb):
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {c[0]} {c[1]} {c[2]}\n")


def read_labels(path, n: int | None = None) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {s!r}")
            out.append(int(s))
    lab = np.array(out, dtype=np.int8)
    if n is not None and len(lab) != n:
        raise DataError(f"{path}: {len(lab)} labels for {n} points")
    return lab


def write_labels(path, labels) -> None:
    with open(path, "w") as fh:
        fh.write("".join(f"{int(v)}\n" for v in labels))


def write_scores(path, scores) -> None:
    with open(path, "w") as fh:
        fh.write("point_id,score\n")
        for i, s in enumerate(scores):
            fh.write(f"{i},{_fmt(s)}\n")


def read_scores(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1]


def write_trace(path, values, name: str = "objective") -> None:
    """CSV of (iteration, value) for convergence plots."""
    with open(path, "w") as fh:
        fh.write(f"iteration,{name}\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{_fmt(v)}\n")
