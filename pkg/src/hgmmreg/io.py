"""Point cloud files, deterministic subsampling and synthetic test transforms.

Supported formats: PLY (ascii and binary little-endian; only vertex x/y/z is
kept) and whitespace-separated ``x y z`` text with ``#`` comments.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import RigidTransform, euler_xyz_to_matrix

FORMATS = ("ply-ascii", "ply-binary-le", "xyz-text")

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class CloudFormatError(ValueError):
    """Malformed or unsupported file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    source_id: str | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, t: RigidTransform) -> PointCloud:
        return PointCloud(t.apply(self.points), self.source_id)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


def _guess_format(path: Path) -> str:
    if path.suffix.lower() == ".ply":
        with open(path, "rb") as f:
            head = f.read(4096)
        m = re.search(rb"^format\s+(\S+)", head, re.M)
        if m and m.group(1) == b"ascii":
            return "ply-ascii"
        return "ply-binary-le"
    return "xyz-text"


def read_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read a cloud; ``fmt`` is one of :data:`FORMATS` or ``None`` to infer from the file."""
    path = Path(path)
    fmt = fmt or _guess_format(path)
    data = path.read_bytes()
    if fmt == "xyz-text":
        pts = _parse_xyz(data)
    elif fmt in ("ply-ascii", "ply-binary-le"):
        pts = _parse_ply(data, fmt)
    else:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    return PointCloud(pts, str(path))


def _parse_xyz(data: bytes) -> np.ndarray:
    rows = []
    offset = 0
    for line in data.splitlines(keepends=True):
        text = line.split(b"#", 1)[0].strip()
        if text:
            fields = text.split()
            if len(fields) < 3:
                raise CloudFormatError("expected at least 3 columns", offset)
            try:
                xyz = [float(v) for v in fields[:3]]
            except ValueError:
                raise CloudFormatError("non-numeric coordinate", offset) from None
            if not all(np.isfinite(xyz)):
                raise CloudFormatError("non-finite coordinate", offset)
            rows.append(xyz)
        offset += len(line)
    return np.array(rows, dtype=float).reshape(-1, 3)


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, ("list", count_dtype, item_dtype))


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise CloudFormatError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise CloudFormatError("missing end_header", len(data))
    nl = data.find(b"\n", end)
    body = nl + 1 if nl >= 0 else len(data)
    fmt = None
    elements: list[_Element] = []
    offset = 0
    for raw in data[:end].split(b"\n"):
        line = raw.strip().decode("ascii", errors="replace")
        words = line.split()
        if not words or words[0] in ("ply", "comment", "obj_info"):
            pass
        elif words[0] == "format":
            if len(words) < 2:
                raise CloudFormatError("malformed format line", offset)
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise CloudFormatError("malformed element line", offset)
            elements.append(_Element(words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise CloudFormatError("property before any element", offset)
            if len(words) == 5 and words[1] == "list":
                if words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise CloudFormatError("unknown list property type", offset)
                elements[-1].props.append((words[4], ("list", _PLY_TYPES[words[2]], _PLY_TYPES[words[3]])))
            elif len(words) == 3 and words[1] in _PLY_TYPES:
                elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
            else:
                raise CloudFormatError("malformed property line", offset)
        else:
            raise CloudFormatError(f"unexpected header keyword {words[0]!r}", offset)
        offset += len(raw) + 1
    if fmt is None:
        raise CloudFormatError("header has no format line", 0)
    return fmt, elements, body


def _parse_ply(data: bytes, expect: str) -> np.ndarray:
    fmt, elements, body = _parse_header(data)
    if fmt == "binary_big_endian":
        raise CloudFormatError("big-endian PLY is not supported", 0)
    if fmt not in ("ascii", "binary_little_endian"):
        raise CloudFormatError(f"unknown PLY format {fmt!r}", 0)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise CloudFormatError("no vertex element", 0)
    names = [p[0] for p in vertex.props]
    for axis in "xyz":
        if axis not in names:
            raise CloudFormatError(f"vertex element lacks property {axis!r}", 0)
        kind = vertex.props[names.index(axis)][1]
        if kind not in ("f4", "f8"):
            raise CloudFormatError(f"vertex property {axis!r} must be float or double", 0)
    if fmt == "ascii":
        return _ply_ascii(data, body, elements)
    return _ply_binary(data, body, elements)


def _ply_ascii(data: bytes, body: int, elements) -> np.ndarray:
    lines = data[body:].split(b"\n")
    offsets = np.cumsum([body] + [len(line) + 1 for line in lines])
    row = 0
    out = None
    for el in elements:
        if el.name != "vertex":
            row += el.count
            continue
        names = [p[0] for p in el.props]
        cols = [names.index(a) for a in "xyz"]
        has_list = any(isinstance(p[1], tuple) for p in el.props)
        out = np.empty((el.count, 3))
        for i in range(el.count):
            if row >= len(lines):
                raise CloudFormatError("truncated vertex data", len(data))
            words = lines[row].split()
            if has_list:
                words = _flatten_ascii_row(words, el.props, int(offsets[row]))
            if len(words) < len(el.props):
                raise CloudFormatError("vertex row has too few values", int(offsets[row]))
            try:
                xyz = [float(words[c]) for c in cols]
            except ValueError:
                raise CloudFormatError("non-numeric vertex coordinate", int(offsets[row])) from None
            if not all(np.isfinite(xyz)):
                raise CloudFormatError("non-finite vertex coordinate", int(offsets[row]))
            out[i] = xyz
            row += 1
        break
    return out


def _flatten_ascii_row(words, props, offset):
    # collapse each list property into one placeholder so column indices line up
    out, k = [], 0
    for _, kind in props:
        if k >= len(words):
            raise CloudFormatError("vertex row has too few values", offset)
        if isinstance(kind, tuple):
            n = int(words[k])
            out.append(b"0")
            k += 1 + n
        else:
            out.append(words[k])
            k += 1
    return out


def _scalar_dtype(props):
    return np.dtype([(name, "<" + kind) for name, kind in props])


def _skip_binary(data: bytes, pos: int, el) -> int:
    if not any(isinstance(p[1], tuple) for p in el.props):
        size = _scalar_dtype(el.props).itemsize * el.count
        if pos + size > len(data):
            raise CloudFormatError(f"truncated {el.name} data", len(data))
        return pos + size
    for _ in range(el.count):
        for _, kind in el.props:
            if isinstance(kind, tuple):
                cdt, idt = np.dtype("<" + kind[1]), np.dtype("<" + kind[2])
                if pos + cdt.itemsize > len(data):
                    raise CloudFormatError(f"truncated {el.name} data", len(data))
                n = int(np.frombuffer(data, cdt, 1, pos)[0])
                pos += cdt.itemsize + n * idt.itemsize
            else:
                pos += np.dtype(kind).itemsize
            if pos > len(data):
                raise CloudFormatError(f"truncated {el.name} data", len(data))
    return pos


def _ply_binary(data: bytes, body: int, elements) -> np.ndarray:
    pos = body
    for el in elements:
        if el.name != "vertex":
            pos = _skip_binary(data, pos, el)
            continue
        if any(isinstance(p[1], tuple) for p in el.props):
            raise CloudFormatError("list properties on vertices are not supported in binary PLY", pos)
        dt = _scalar_dtype(el.props)
        size = dt.itemsize * el.count
        if pos + size > len(data):
            raise CloudFormatError("truncated vertex data", len(data))
        rec = np.frombuffer(data, dt, el.count, pos)
        pts = np.stack([rec[a].astype(float) for a in "xyz"], axis=1)
        bad = ~np.isfinite(pts).all(axis=1)
        if bad.any():
            raise CloudFormatError("non-finite vertex coordinate", pos + int(np.argmax(bad)) * dt.itemsize)
        return pts
    raise CloudFormatError("no vertex element", body)


def write_cloud(cloud, path, fmt: str = "ply-binary-le") -> None:
    """Write ``cloud``; float64 coordinates, round-trips exactly through :func:`read_cloud`."""
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("refusing to write an empty cloud")
    path = Path(path)
    if fmt == "xyz-text":
        path.write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))
        return
    if fmt not in ("ply-ascii", "ply-binary-le"):
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    kind = "ascii" if fmt == "ply-ascii" else "binary_little_endian"
    header = (
        f"ply\nformat {kind} 1.0\nelement vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    ).encode("ascii")
    if fmt == "ply-ascii":
        payload = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()).encode("ascii")
    else:
        payload = pts.astype("<f8").tobytes()
    path.write_bytes(header + payload)


def subsample(cloud, n: int, seed: int) -> PointCloud:
    """Uniform sample of ``n`` points without replacement, kept in original order."""
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    if not 1 <= n <= len(pts):
        raise ValueError(f"sample size must be in [1, {len(pts)}], got {n}")
    if n == len(pts):
        return PointCloud(pts.copy(), getattr(cloud, "source_id", None))
    idx = np.sort(np.random.default_rng(seed).choice(len(pts), size=n, replace=False))
    return PointCloud(pts[idx], getattr(cloud, "source_id", None))


def unit_normalize(cloud) -> PointCloud:
    """Center on the centroid and scale so the bounding-box diagonal is 1."""
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    pts = pts - pts.mean(axis=0)
    diag = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
    if diag == 0:
        raise ValueError("cannot normalize a cloud with zero extent")
    return PointCloud(pts / diag, getattr(cloud, "source_id", None))


@dataclass(frozen=True)
class SyntheticTransformSpec:
    rot_range_deg: float = 15.0
    trans_range: float = 0.05
    seed: int = 0
    trials: int = 100

    def __post_init__(self):
        if self.rot_range_deg < 0 or self.trans_range < 0:
            raise ValueError("ranges must be non-negative")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def random_rigid_transform(spec: SyntheticTransformSpec, trial: int) -> RigidTransform:
    """Per-axis uniform Euler angles (intrinsic X-Y-Z) and translation; fixed per (seed, trial)."""
    if not 0 <= trial < spec.trials:
        raise ValueError(f"trial {trial} outside [0, {spec.trials})")
    rng = np.random.default_rng([spec.seed, trial])
    angles = np.radians(rng.uniform(-spec.rot_range_deg, spec.rot_range_deg, 3))
    t = rng.uniform(-spec.trans_range, spec.trans_range, 3)
    return RigidTransform(euler_xyz_to_matrix(angles), t)


def synthetic_object(n: int = 20000, seed: int = 0, noise: float = 0.002) -> PointCloud:
    """Procedural stand-in for a scanned object: a lumpy body, a head and a base plate.

    Asymmetric so that every rotation is observable; unit-normalized.
    """
    rng = np.random.default_rng(seed)
    n_body, n_head = int(0.6 * n), int(0.25 * n)
    n_base = n - n_body - n_head

    def lumpy(count, center, radii, lumps):
        v = rng.standard_normal((count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        theta = np.arccos(np.clip(v[:, 2], -1, 1))
        phi = np.arctan2(v[:, 1], v[:, 0])
        r = 1.0 + lumps * (np.sin(3 * theta) * np.cos(2 * phi) + 0.5 * np.cos(5 * phi) * np.sin(theta))
        return center + v * r[:, None] * radii

    body = lumpy(n_body, np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.7, 0.6]), 0.12)
    head = lumpy(n_head, np.array([0.9, 0.3, 0.55]), np.array([0.4, 0.3, 0.35]), 0.08)
    base = np.c_[rng.uniform(-1.2, 1.0, n_base), rng.uniform(-0.8, 0.6, n_base), np.full(n_base, -0.75)]
    pts = np.concatenate([body, head, base])
    pts += noise * rng.standard_normal(pts.shape)
    return unit_normalize(pts)
