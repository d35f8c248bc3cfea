"""PLY I/O, normalisation, random rotations and the synthetic distorted corpus."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
FLOAT_TYPES = {"f4", "f8"}
FORMATS = ("ascii", "binary_little_endian")
MAX_HEADER_BYTES = 1 << 16


class PlyError(ValueError):
    """Malformed or unsupported PLY input."""


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be N x 3 with N >= 1, got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        self.positions = pos
        if self.colors is not None:
            col = np.asarray(self.colors)
            if col.shape != pos.shape:
                raise ValueError(f"colors shape {col.shape} does not match positions {pos.shape}")
            if np.any(col < 0) or np.any(col > 255):
                raise ValueError("colors must lie in 0..255")
            self.colors = col.astype(np.uint8)

    def __len__(self):
        return self.positions.shape[0]

    def subset(self, idx):
        return PointCloud(self.positions[idx], None if self.colors is None else self.colors[idx])


# -- PLY -------------------------------------------------------------------


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, ("list", count_dtype, item_dtype))


def _parse_header(data: bytes):
    end = data.find(b"end_header", 0, MAX_HEADER_BYTES)
    if end < 0:
        raise PlyError("missing end_header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError("end_header not terminated by newline")
    try:
        text = data[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise PlyError("header is not ASCII") from exc
    lines = [ln.strip() for ln in text.replace("\r", "").split("\n")]
    if not lines or lines[0] != "ply":
        raise PlyError("missing 'ply' magic line")
    fmt = None
    elements = []
    for ln in lines[1:]:
        if not ln or ln.startswith(("comment", "obj_info")):
            continue
        parts = ln.split()
        kw = parts[0]
        if kw == "format":
            if fmt is not None:
                raise PlyError("duplicate format line")
            if len(parts) != 3 or parts[2] != "1.0":
                raise PlyError(f"bad format line {ln!r}")
            if parts[1] not in FORMATS:
                raise PlyError(f"unsupported format {parts[1]!r}")
            fmt = parts[1]
        elif kw == "element":
            if len(parts) != 3:
                raise PlyError(f"bad element line {ln!r}")
            try:
                count = int(parts[2])
            except ValueError as exc:
                raise PlyError(f"bad element count {parts[2]!r}") from exc
            if count < 0:
                raise PlyError("negative element count")
            if any(e.name == parts[1] for e in elements):
                raise PlyError(f"duplicate element {parts[1]!r}")
            elements.append(_Element(parts[1], count, []))
        elif kw == "property":
            if not elements:
                raise PlyError("property before any element")
            el = elements[-1]
            if len(parts) == 3:
                if parts[1] not in PLY_TYPES:
                    raise PlyError(f"unknown property type {parts[1]!r}")
                prop = (parts[2], PLY_TYPES[parts[1]])
            elif len(parts) == 5 and parts[1] == "list":
                if parts[2] not in PLY_TYPES or parts[3] not in PLY_TYPES:
                    raise PlyError(f"unknown list types in {ln!r}")
                prop = (parts[4], ("list", PLY_TYPES[parts[2]], PLY_TYPES[parts[3]]))
            else:
                raise PlyError(f"bad property line {ln!r}")
            if any(p[0] == prop[0] for p in el.props):
                raise PlyError(f"duplicate property {prop[0]!r} in element {el.name!r}")
            el.props.append(prop)
        else:
            raise PlyError(f"unexpected header line {ln!r}")
    if fmt is None:
        raise PlyError("missing format line")
    return fmt, elements, nl + 1


def _vertex_layout(el: _Element):
    names = [p[0] for p in el.props]
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
    types = dict(el.props)
    for axis in "xyz":
        if types[axis] not in FLOAT_TYPES:
            raise PlyError(f"vertex property {axis!r} must be float or double")
    rgb = [c in names for c in ("red", "green", "blue")]
    if any(rgb) and not all(rgb):
        raise PlyError("partial color properties")
    if all(rgb):
        for c in ("red", "green", "blue"):
            if types[c] != "u1":
                raise PlyError(f"color property {c!r} must be uchar")
    if any(isinstance(t, tuple) for t in types.values()):
        raise PlyError("list properties on vertex element are not supported")
    return all(rgb)


def _skip_binary_element(data, pos, el):
    fixed = all(not isinstance(t, tuple) for _, t in el.props)
    if fixed:
        size = sum(np.dtype(t).itemsize for _, t in el.props) * el.count
        if pos + size > len(data):
            raise PlyError(f"truncated payload in element {el.name!r}")
        return pos + size
    for _ in range(el.count):
        for _, t in el.props:
            if isinstance(t, tuple):
                cdt = np.dtype("<" + t[1])
                if pos + cdt.itemsize > len(data):
                    raise PlyError(f"truncated payload in element {el.name!r}")
                n = int(np.frombuffer(data, cdt, 1, pos)[0])
                if n < 0:
                    raise PlyError("negative list length")
                pos += cdt.itemsize + n * np.dtype(t[2]).itemsize
            else:
                pos += np.dtype(t).itemsize
            if pos > len(data):
                raise PlyError(f"truncated payload in element {el.name!r}")
    return pos


def parse_ply(data: bytes) -> PointCloud:
    """Parse an ASCII or binary little-endian PLY byte string.

    Only the ``vertex`` element is used; other elements are skipped with a
    warning. Every malformed input raises :class:`PlyError`.
    """
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise PlyError("expected bytes")
    data = bytes(data)
    fmt, elements, pos = _parse_header(data)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise PlyError("no vertex element")
    if vertex.count == 0:
        raise PlyError("zero vertices")
    has_color = _vertex_layout(vertex)
    others = [e.name for e in elements if e.name != "vertex"]
    if others:
        log.warning("ignoring PLY elements %s", others)

    if fmt == "ascii":
        body = data[pos:].decode("ascii", errors="replace").split("\n")
        row = 0
        for el in elements:
            if el is vertex:
                break
            row += el.count
        rows = [ln for ln in body if ln.strip()]
        if row + vertex.count > len(rows):
            raise PlyError(f"truncated payload: expected {vertex.count} vertex rows")
        ncol = len(vertex.props)
        try:
            table = [[float(v) for v in rows[row + k].split()] for k in range(vertex.count)]
        except ValueError as exc:
            raise PlyError(f"bad vertex row: {exc}") from exc
        if any(len(r) != ncol for r in table):
            raise PlyError(f"vertex rows must have {ncol} values")
        table = np.array(table, dtype=np.float64)
        cols = {name: table[:, i] for i, (name, _) in enumerate(vertex.props)}
    else:
        for el in elements:
            if el is vertex:
                break
            pos = _skip_binary_element(data, pos, el)
        dtype = np.dtype([(name, "<" + t) for name, t in vertex.props])
        need = dtype.itemsize * vertex.count
        if pos + need > len(data):
            raise PlyError(
                f"truncated payload: need {need} bytes for {vertex.count} vertices, "
                f"have {len(data) - pos}"
            )
        rec = np.frombuffer(data, dtype=dtype, count=vertex.count, offset=pos)
        cols = {name: rec[name] for name, _ in vertex.props}

    with np.errstate(invalid="ignore"):  # signalling NaNs in binary payloads
        positions = np.stack([cols[k].astype(np.float64) for k in "xyz"], axis=1)
    if not np.all(np.isfinite(positions)):
        raise PlyError("non-finite vertex positions")
    colors = None
    if has_color:
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        if fmt == "ascii":
            if np.any(colors < 0) or np.any(colors > 255) or np.any(colors != np.round(colors)):
                raise PlyError("ascii colors must be integers in 0..255")
        colors = colors.astype(np.uint8)
    return PointCloud(positions, colors)


def write_ply(pc: PointCloud, binary=True, dtype="float") -> bytes:
    """Serialise ``pc`` to PLY bytes (binary little-endian by default)."""
    fmt = "binary_little_endian" if binary else "ascii"
    np_t = PLY_TYPES[dtype]
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {len(pc)}"]
    lines += [f"property {dtype} {a}" for a in "xyz"]
    if pc.colors is not None:
        lines += [f"property uchar {c}" for c in ("red", "green", "blue")]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    if binary:
        fields = [(a, "<" + np_t) for a in "xyz"]
        if pc.colors is not None:
            fields += [(c, "u1") for c in ("red", "green", "blue")]
        rec = np.empty(len(pc), dtype=np.dtype(fields))
        for i, a in enumerate("xyz"):
            rec[a] = pc.positions[:, i]
        if pc.colors is not None:
            for i, c in enumerate(("red", "green", "blue")):
                rec[c] = pc.colors[:, i]
        return header + rec.tobytes()
    rows = []
    for k in range(len(pc)):
        vals = [repr(float(np.dtype(np_t).type(v))) for v in pc.positions[k]]
        if pc.colors is not None:
            vals += [str(int(c)) for c in pc.colors[k]]
        rows.append(" ".join(vals))
    return header + ("\n".join(rows) + "\n").encode("ascii")


def read_ply(path) -> PointCloud:
    return parse_ply(Path(path).read_bytes())


# -- geometry --------------------------------------------------------------


def normalize_unit_sphere(pc: PointCloud) -> PointCloud:
    """Centre on the centroid and scale so the farthest point has norm 1."""
    pos = pc.positions
    if len(pc) < 2:
        raise ValueError("normalisation needs at least two points")
    centred = pos - pos.mean(axis=0)
    radius = np.sqrt((centred * centred).sum(axis=1)).max()
    if not radius > 0:
        raise ValueError("all points coincide; cannot normalise")
    out = centred / radius
    # second centring pass removes the rounding residue of the first
    out = out - out.mean(axis=0)
    out = out / np.sqrt((out * out).sum(axis=1)).max()
    return PointCloud(out, pc.colors)


def rotation_matrix(seed) -> np.ndarray:
    """Uniform random rotation from ``seed`` (Shoemake quaternion method); seed 0 is identity."""
    if seed == 0:
        return np.eye(3)
    rng = np.random.default_rng(seed)
    u1, u2, u3 = rng.random(3)
    a, b = math.sqrt(1.0 - u1), math.sqrt(u1)
    w, x, y, z = (
        a * math.sin(2 * math.pi * u2),
        a * math.cos(2 * math.pi * u2),
        b * math.sin(2 * math.pi * u3),
        b * math.cos(2 * math.pi * u3),
    )
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate(pc: PointCloud, seed) -> PointCloud:
    return PointCloud(pc.positions @ rotation_matrix(seed).T, pc.colors)


# -- synthetic corpus ------------------------------------------------------

SHAPES = ("sphere", "cube", "torus", "blob")
DISTORTIONS = ("gaussian_noise", "color_noise", "downsample")
TYPE_WEIGHTS = {"gaussian_noise": 0.8, "color_noise": 1.0, "downsample": 0.9}
MAX_LEVEL = 7
# per-level distortion strengths (positions are in unit-sphere units)
NOISE_SIGMA = 0.02
COLOR_AMPLITUDE = 12.0
DROP_RATE = 0.12


def _sub_seed(*parts):
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_shape(shape, n_points, rng) -> np.ndarray:
    if shape == "sphere":
        v = rng.standard_normal((n_points, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if shape == "cube":
        face = rng.integers(0, 6, n_points)
        pts = rng.uniform(-1, 1, (n_points, 3))
        pts[np.arange(n_points), face % 3] = np.where(face < 3, -1.0, 1.0)
        return pts
    if shape == "torus":
        theta = rng.uniform(0, 2 * np.pi, n_points)
        phi = rng.uniform(0, 2 * np.pi, n_points)
        big, small = 1.0, 0.4
        return np.stack(
            [
                (big + small * np.cos(phi)) * np.cos(theta),
                (big + small * np.cos(phi)) * np.sin(theta),
                small * np.sin(phi),
            ],
            axis=1,
        )
    if shape == "blob":
        v = rng.standard_normal((n_points, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        radius = 1.0 + 0.25 * np.sin(3 * v[:, 0]) * np.cos(2 * v[:, 1])
        return v * radius[:, None] * np.array([1.0, 0.8, 0.6])
    raise ValueError(f"unknown shape {shape!r}")


def make_texture(positions, rng) -> np.ndarray:
    """Smooth base colour modulated by a striped pattern; seeded per content."""
    freq = rng.uniform(6.0, 14.0, size=3)
    direction = rng.standard_normal((3, 3))
    base = rng.uniform(70, 190, size=3)
    phase = positions @ direction.T * freq
    col = base + 55.0 * np.sin(phase)
    return np.clip(np.round(col), 0, 255).astype(np.uint8)


def make_content(index, n_points, seed) -> PointCloud:
    rng = np.random.default_rng(_sub_seed("content", seed, index))
    pos = make_shape(SHAPES[index % len(SHAPES)], n_points, rng)
    return normalize_unit_sphere(PointCloud(pos, make_texture(pos, rng)))


def distort(pc: PointCloud, kind, level, rng) -> PointCloud:
    """Apply one synthetic distortion at ``level`` in 1..7."""
    if not 1 <= int(level) <= MAX_LEVEL:
        raise ValueError(f"level must be in 1..{MAX_LEVEL}, got {level}")
    level = int(level)
    if kind == "gaussian_noise":
        sigma = NOISE_SIGMA * level
        return PointCloud(pc.positions + rng.normal(0.0, sigma, pc.positions.shape), pc.colors)
    if kind == "color_noise":
        amp = COLOR_AMPLITUDE * level
        noise = rng.uniform(-amp, amp, pc.colors.shape)
        col = np.clip(np.round(pc.colors.astype(np.float64) + noise), 0, 255)
        return PointCloud(pc.positions, col.astype(np.uint8))
    if kind == "downsample":
        keep = downsample_count(len(pc), level)
        idx = np.sort(rng.choice(len(pc), size=keep, replace=False))
        return pc.subset(idx)
    raise ValueError(f"unknown distortion {kind!r}")


def downsample_count(n_points, level):
    return int(round(n_points * (1.0 - DROP_RATE * level)))


def pseudo_mos(kind, level):
    """Linear synthetic label: 5 - 4 * (level / 7) * w_type."""
    if not 1 <= int(level) <= MAX_LEVEL:
        raise ValueError(f"level must be in 1..{MAX_LEVEL}, got {level}")
    return 5.0 - 4.0 * (level / MAX_LEVEL) * TYPE_WEIGHTS[kind]


@dataclass
class CorpusRecord:
    path: str
    content_id: str
    distortion_type: str
    level: int
    mos: float

    def __post_init__(self):
        self.level = int(self.level)
        self.mos = float(self.mos)
        if not 1 <= self.level <= MAX_LEVEL:
            raise ValueError(f"level must be in 1..{MAX_LEVEL}, got {self.level}")


MANIFEST_FIELDS = ("path", "content_id", "distortion_type", "level", "mos")


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.path, r.content_id, r.distortion_type, r.level, repr(r.mos)])


def read_manifest(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
        return [CorpusRecord(**row) for row in reader]


def reference_path(manifest_dir, content_id):
    """Reference clouds live next to the manifest as ``references/<content_id>.ply``."""
    return Path(manifest_dir) / "references" / f"{content_id}.ply"


def resolve(manifest_dir, path):
    p = Path(path)
    return p if p.is_absolute() else Path(manifest_dir) / p


def synthesize_corpus(out_dir, n_contents=8, types=DISTORTIONS, levels=range(1, 8),
                      n_points=6000, seed=0):
    """Generate references, distorted PLY files and ``manifest.csv`` under ``out_dir``.

    Returns the list of :class:`CorpusRecord`. Output is a pure function of
    the arguments.
    """
    levels = list(levels)
    for lv in levels:
        if not 1 <= int(lv) <= MAX_LEVEL:
            raise ValueError(f"level must be in 1..{MAX_LEVEL}, got {lv}")
    if n_contents < 2:
        raise ValueError("need at least two contents")
    for t in types:
        if t not in TYPE_WEIGHTS:
            raise ValueError(f"unknown distortion {t!r}")
    out = Path(out_dir)
    try:
        (out / "references").mkdir(parents=True, exist_ok=True)
        (out / "distorted").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"corpus directory {out} is not writable")

    records = []
    for c in range(n_contents):
        cid = f"c{c:02d}_{SHAPES[c % len(SHAPES)]}"
        ref = make_content(c, n_points, seed)
        reference_path(out, cid).write_bytes(write_ply(ref))
        for kind in types:
            for lv in levels:
                rng = np.random.default_rng(_sub_seed("distort", seed, c, kind, lv))
                pc = distort(ref, kind, lv, rng)
                rel = f"distorted/{cid}_{kind}_{int(lv)}.ply"
                (out / rel).write_bytes(write_ply(pc))
                records.append(CorpusRecord(rel, cid, kind, int(lv), pseudo_mos(kind, lv)))
    write_manifest(out / "manifest.csv", records)
    return records
