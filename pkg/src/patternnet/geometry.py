"""Point-cloud data model, file formats, normalization and synthetic shapes.

All operations are pure: they return new clouds and never mutate their
input, so datasets can be generated and augmented in parallel.

File formats
------------
* ``.xyz``   whitespace-separated ``x y z`` per line, ``#`` comments
* ``.ply``   ASCII PLY; only the vertex element's x/y/z properties are read
* anything else is the native binary format: magic ``PNPC``, u32 version,
  u32 point count, u8 flags (bit 0: class label, bit 1: part labels),
  little-endian f32 coordinates row-major, then u16 labels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPE_KINDS = ("sphere", "cube", "torus", "cross-planes")

_MAGIC = b"PNPC"
_VERSION = 1


class ParseError(ValueError):
    """Malformed file content (carries file and line/offset context)."""


class FormatError(ValueError):
    """Wrong magic number or unsupported format variant."""


@dataclass
class PointCloud:
    points: np.ndarray  # (M, 3) float64
    class_label: int | None = None
    part_labels: np.ndarray | None = None  # (M,) int
    id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be M x 3, got shape {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
            if self.part_labels.shape != (self.points.shape[0],):
                raise ValueError("part_labels length must equal the point count")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.class_label, None if self.part_labels is None else self.part_labels.copy(), self.id)


@dataclass
class ManifestEntry:
    path: str
    class_id: int
    part_path: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    part_names: list[str] | None = None
    seed: int = 0
    base_dir: Path = field(default_factory=Path, repr=False, compare=False)

    def __post_init__(self):
        c = len(self.class_names)
        for e in self.entries:
            if not 0 <= e.class_id < c:
                raise ValueError(f"class id {e.class_id} outside [0, {c})")

    def resolve(self, entry: ManifestEntry) -> Path:
        return (self.base_dir / entry.path).resolve()

    def load_clouds(self) -> list[PointCloud]:
        return [self.load_entry(e) for e in self.entries]

    def load_entry(self, entry: ManifestEntry) -> PointCloud:
        cloud = load_cloud(self.resolve(entry))
        cloud.class_label = entry.class_id
        return cloud


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "entries": [
            {"path": e.path, "class_id": e.class_id, "part_path": e.part_path}
            for e in manifest.entries
        ],
        "class_names": manifest.class_names,
        "part_names": manifest.part_names,
        "seed": manifest.seed,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    manifest = DatasetManifest(
        entries=[ManifestEntry(e["path"], e["class_id"], e.get("part_path")) for e in doc["entries"]],
        class_names=doc["class_names"],
        part_names=doc.get("part_names"),
        seed=doc.get("seed", 0),
        base_dir=path.parent,
    )
    for e in manifest.entries:
        if not manifest.resolve(e).exists():
            raise FileNotFoundError(f"manifest references missing file: {e.path}")
    return manifest


# -- normalization / augmentation ---------------------------------------------


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center the cloud on its centroid and scale the farthest point to norm 1."""
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius < 1e-12:
        raise ValueError("degenerate cloud: zero radius (all points coincident)")
    return cloud.with_points(centered / radius)


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _random_so3(rng: np.random.Generator) -> np.ndarray:
    # QR of a Gaussian matrix, sign-fixed to a uniform rotation
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def augment(
    cloud: PointCloud,
    seed: int,
    scale_range: tuple[float, float] = (0.8, 1.25),
    translate_limit: float = 0.1,
    full_so3: bool = False,
) -> PointCloud:
    """Random rotation (about z by default), isotropic scale, then translation."""
    rng = np.random.default_rng(seed)
    if full_so3:
        rot = _random_so3(rng)
    else:
        rot = rotation_about_z(rng.uniform(0.0, 2.0 * np.pi))
    scale = rng.uniform(scale_range[0], scale_range[1])
    shift = rng.uniform(-translate_limit, translate_limit, size=3)
    return cloud.with_points(cloud.points @ rot.T * scale + shift)


def add_gaussian_noise(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    """Perturb every coordinate with independent N(0, sigma^2) draws."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return cloud.with_points(cloud.points.copy())
    rng = np.random.default_rng(seed)
    return cloud.with_points(cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape))


# -- synthetic labeled shapes ---------------------------------------------------


def gen_shape(kind: str, n_points: int, seed: int, id: str | None = None) -> PointCloud:
    """Sample a labeled synthetic surface; part labels follow the geometry.

    sphere: hemispheres by sign(z).  cube: 3 parts by dominant face axis.
    torus (R=0.7, r=0.3): outer vs inner half.  cross-planes: plane membership.
    """
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n_points < 32:
        raise ValueError("n_points must be at least 32")
    rng = np.random.default_rng(seed)

    if kind == "sphere":
        vec = rng.standard_normal((n_points, 3))
        vec /= np.linalg.norm(vec, axis=1, keepdims=True)
        points = vec
        parts = (points[:, 2] < 0).astype(np.int64)
    elif kind == "cube":
        face = rng.integers(0, 6, size=n_points)
        uv = rng.uniform(-1.0, 1.0, size=(n_points, 2))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        points = np.empty((n_points, 3))
        for a in range(3):
            m = axis == a
            others = [i for i in range(3) if i != a]
            points[m, a] = sign[m]
            points[m, others[0]] = uv[m, 0]
            points[m, others[1]] = uv[m, 1]
        parts = axis.astype(np.int64)
    elif kind == "torus":
        big_r, small_r = 0.7, 0.3
        tube = np.empty(n_points)
        count = 0
        while count < n_points:  # rejection sampling for uniform surface density
            cand = rng.uniform(0.0, 2.0 * np.pi, size=2 * (n_points - count))
            accept = rng.uniform(0.0, 1.0, size=cand.size) <= (big_r + small_r * np.cos(cand)) / (big_r + small_r)
            kept = cand[accept][: n_points - count]
            tube[count : count + kept.size] = kept
            count += kept.size
        around = rng.uniform(0.0, 2.0 * np.pi, size=n_points)
        ring = big_r + small_r * np.cos(tube)
        points = np.stack([ring * np.cos(around), ring * np.sin(around), small_r * np.sin(tube)], axis=1)
        parts = (np.cos(tube) < 0).astype(np.int64)  # 0 = outer half, 1 = inner half
    else:  # cross-planes
        which = rng.integers(0, 2, size=n_points)
        uv = rng.uniform(-1.0, 1.0, size=(n_points, 2))
        points = np.zeros((n_points, 3))
        a = which == 0
        points[a, 0] = uv[a, 0]
        points[a, 2] = uv[a, 1]
        points[~a, 1] = uv[~a, 0]
        points[~a, 2] = uv[~a, 1]
        parts = which.astype(np.int64)

    return PointCloud(
        points=points,
        class_label=SHAPE_KINDS.index(kind),
        part_labels=parts,
        id=id if id is not None else f"{kind}-{seed}",
    )


# -- file I/O -------------------------------------------------------------------


def save_cloud(cloud: PointCloud, path) -> None:
    path = Path(path)
    if path.suffix == ".xyz":
        _save_xyz(cloud, path)
    elif path.suffix == ".ply":
        _save_ply(cloud, path)
    else:
        _save_binary(cloud, path)


def load_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix == ".xyz":
        return _load_xyz(path)
    if path.suffix == ".ply":
        return _load_ply(path)
    return _load_binary(path)


def _save_xyz(cloud: PointCloud, path: Path) -> None:
    lines = ["# x y z"]
    lines += [f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in cloud.points]
    path.write_text("\n".join(lines) + "\n")


def _load_xyz(path: Path) -> PointCloud:
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 coordinates, got {len(tokens)}")
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no points found")
    return PointCloud(np.array(rows), id=path.stem)


def _save_ply(cloud: PointCloud, path: Path) -> None:
    m = cloud.num_points
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {m}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    body = "\n".join(f"{float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in cloud.points)
    path.write_text(header + body + "\n")


def _load_ply(path: Path) -> PointCloud:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file (missing 'ply' magic)")
    elements: list[tuple[str, int]] = []
    properties: dict[str, list[str]] = {}
    current = None
    data_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise FormatError(f"{path}:{lineno}: only ASCII PLY is supported")
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError(f"{path}:{lineno}: malformed element declaration")
            try:
                count = int(tokens[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad element count {tokens[2]!r}") from None
            current = tokens[1]
            elements.append((current, count))
            properties[current] = []
        elif tokens[0] == "property":
            if current is None:
                raise ParseError(f"{path}:{lineno}: property before any element")
            properties[current].append(tokens[-1])
        elif tokens[0] == "end_header":
            data_start = lineno  # 0-based index into `lines` of first data line
            break
    if data_start is None:
        raise ParseError(f"{path}: missing end_header")
    names = dict(elements)
    if "vertex" not in names:
        raise ParseError(f"{path}: no vertex element")
    vprops = properties["vertex"]
    try:
        cols = [vprops.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise ParseError(f"{path}: vertex element lacks x/y/z properties") from None

    rows = []
    cursor = data_start
    for ename, count in elements:
        for _ in range(count):
            if cursor >= len(lines):
                raise ParseError(f"{path}: unexpected end of file in element {ename!r}")
            tokens = lines[cursor].split()
            cursor += 1
            if ename == "vertex":
                if len(tokens) < len(vprops):
                    raise ParseError(f"{path}:{cursor}: short vertex row")
                try:
                    rows.append([float(tokens[c]) for c in cols])
                except ValueError as exc:
                    raise ParseError(f"{path}:{cursor}: {exc}") from None
    return PointCloud(np.array(rows), id=path.stem)


def _save_binary(cloud: PointCloud, path: Path) -> None:
    flags = (1 if cloud.class_label is not None else 0) | (2 if cloud.part_labels is not None else 0)
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<IIB", _VERSION, cloud.num_points, flags)
    blob += cloud.points.astype("<f4").tobytes(order="C")
    if cloud.class_label is not None:
        blob += struct.pack("<H", cloud.class_label)
    if cloud.part_labels is not None:
        blob += cloud.part_labels.astype("<u2").tobytes()
    path.write_bytes(bytes(blob))


def _load_binary(path: Path) -> PointCloud:
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic (expected PNPC)")
    if len(blob) < 13:
        raise ParseError(f"{path}: truncated header at offset {len(blob)}")
    version, m, flags = struct.unpack_from("<IIB", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = 13
    need = m * 12
    if len(blob) < offset + need:
        raise ParseError(f"{path}: truncated coordinates at offset {len(blob)}")
    points = np.frombuffer(blob, dtype="<f4", count=m * 3, offset=offset).reshape(m, 3).astype(np.float64)
    offset += need
    class_label = None
    if flags & 1:
        if len(blob) < offset + 2:
            raise ParseError(f"{path}: truncated class label at offset {len(blob)}")
        (class_label,) = struct.unpack_from("<H", blob, offset)
        offset += 2
    part_labels = None
    if flags & 2:
        if len(blob) < offset + 2 * m:
            raise ParseError(f"{path}: truncated part labels at offset {len(blob)}")
        part_labels = np.frombuffer(blob, dtype="<u2", count=m, offset=offset).astype(np.int64)
    return PointCloud(points, class_label=class_label, part_labels=part_labels, id=path.stem)
