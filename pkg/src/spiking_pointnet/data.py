"""Point-cloud ingestion: OFF meshes, surface sampling, synthetic shapes, binary cache."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DegenerateMeshError(ValueError):
    pass


class CacheError(ValueError):
    pass


class CacheVersionError(CacheError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # [V, 3] float64
    faces: np.ndarray  # [F, 3] int64


@dataclass
class PointCloud:
    points: np.ndarray
    label: int
    class_name: str = ""


@dataclass
class DatasetManifest:
    class_names: list[str]
    split: str
    sample_count: int
    points_per_cloud: int
    source_checksums: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "split": self.split,
            "sample_count": self.sample_count,
            "points_per_cloud": self.points_per_cloud,
            "source_checksums": dict(sorted(self.source_checksums.items())),
        }


@dataclass
class Dataset:
    points: np.ndarray  # [N, n, 3] float32
    labels: np.ndarray  # [N] int32
    manifest: DatasetManifest

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> PointCloud:
        label = int(self.labels[i])
        return PointCloud(self.points[i], label, self.manifest.class_names[label])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        m = DatasetManifest(
            self.manifest.class_names,
            self.manifest.split,
            int(idx.size),
            self.manifest.points_per_cloud,
            self.manifest.source_checksums,
        )
        return Dataset(self.points[idx], self.labels[idx], m)


# --------------------------------------------------------------------------
# OFF


def parse_off(data: bytes | str) -> TriangleMesh:
    """Parse an OFF mesh, fanning polygons into triangles.

    Accepts the ModelNet quirk where the header and counts share a line
    (``OFF490 518 0``).  Comment and blank lines are skipped.
    """
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not valid UTF-8 text ({exc.reason})") from None
    else:
        text = data

    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if content:
            lines.append((lineno, content))
    if not lines:
        raise ParseError("empty file", 1)

    pos = 0
    lineno, first = lines[0]
    if first.startswith("OFF"):
        rest = first[3:].strip()
        pos = 1
        if rest:
            counts_line = (lineno, rest)
        else:
            if len(lines) < 2:
                raise ParseError("missing counts line", lineno)
            counts_line = lines[1]
            pos = 2
    else:
        counts_line = lines[0]
        pos = 1

    lineno, text_counts = counts_line
    tokens = text_counts.split()
    if len(tokens) < 2:
        raise ParseError(f"malformed counts line {text_counts!r}", lineno)
    try:
        n_vert, n_face = int(tokens[0]), int(tokens[1])
        if len(tokens) > 2:
            int(tokens[2])
    except ValueError:
        raise ParseError(f"non-integer count in {text_counts!r}", lineno) from None
    if n_vert < 0 or n_face < 0:
        raise ParseError("negative counts", lineno)
    if len(tokens) > 3:
        raise ParseError(f"malformed counts line {text_counts!r}", lineno)
    if pos + n_vert + n_face > len(lines):
        last = lines[-1][0]
        raise ParseError(f"expected {n_vert} vertices and {n_face} faces, file ends early", last)

    vertices = np.empty((n_vert, 3), dtype=np.float64)
    for i in range(n_vert):
        lineno, content = lines[pos + i]
        tok = content.split()
        if len(tok) < 3:
            raise ParseError(f"vertex needs 3 coordinates, got {len(tok)}", lineno)
        try:
            xyz = [float(t) for t in tok[:3]]
        except ValueError:
            raise ParseError(f"non-numeric vertex coordinate in {content!r}", lineno) from None
        if not all(math.isfinite(c) for c in xyz):
            raise ParseError("non-finite vertex coordinate", lineno)
        vertices[i] = xyz
    pos += n_vert

    faces = []
    for i in range(n_face):
        lineno, content = lines[pos + i]
        tok = content.split()
        try:
            ints = [int(t) for t in tok]
        except ValueError:
            raise ParseError(f"non-integer face entry in {content!r}", lineno) from None
        if not ints or ints[0] < 3 or len(ints) < ints[0] + 1:
            raise ParseError(f"malformed face {content!r}", lineno)
        idx = ints[1 : ints[0] + 1]
        for v in idx:
            if not 0 <= v < n_vert:
                raise ParseError(f"vertex index {v} out of range [0, {n_vert})", lineno)
        for j in range(1, len(idx) - 1):
            faces.append((idx[0], idx[j], idx[j + 1]))
    return TriangleMesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices
    a, b, c = v[mesh.faces[:, 0]], v[mesh.faces[:, 1]], v[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_mesh(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform on the surface (faces weighted by area)."""
    if len(mesh.faces) == 0:
        raise DegenerateMeshError("mesh has no faces")
    areas = triangle_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise DegenerateMeshError("all faces have zero area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    fold = u + v > 1
    u[fold], v[fold] = 1 - u[fold], 1 - v[fold]
    tri = mesh.vertices[mesh.faces[face]]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the farthest point to unit norm."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts - pts.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if radius > 0:
        pts = pts / radius
    return pts


@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = True
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(points: np.ndarray, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random rotation about z plus clipped Gaussian jitter.

    Accepts one cloud ``[n, 3]`` or a batch ``[B, n, 3]`` (one angle per cloud).
    """
    pts = np.asarray(points)
    batch = pts[None] if pts.ndim == 2 else pts
    out = np.empty_like(batch)
    for i, cloud in enumerate(batch):
        angle = rng.uniform(0.0, 2 * math.pi) if config.rotate else 0.0
        out[i] = cloud @ rotation_z(angle).T.astype(cloud.dtype)
    if config.jitter_sigma > 0:
        noise = np.clip(rng.normal(0.0, config.jitter_sigma, size=out.shape), -config.jitter_clip, config.jitter_clip)
        out = out + noise.astype(out.dtype)
    return out[0] if pts.ndim == 2 else out


# --------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("sphere", "cube", "pyramid", "torus")


def _sphere(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(n, rng):
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-1, 1, size=(n, 3))
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
    return pts


_PYRAMID = np.array([[-1, -1, -0.5], [1, -1, -0.5], [1, 1, -0.5], [-1, 1, -0.5], [0, 0, 1.0]])
_PYRAMID_FACES = np.array([[0, 1, 2], [0, 2, 3], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])


def _pyramid(n, rng):
    return sample_mesh(TriangleMesh(_PYRAMID.astype(np.float64), _PYRAMID_FACES), n, rng)


def _torus(n, rng, major=1.0, minor=0.35):
    # rejection sampling gives area-uniform points on the tube
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        theta = rng.uniform(0, 2 * np.pi, m)
        phi = rng.uniform(0, 2 * np.pi, m)
        keep = rng.uniform(0, major + minor, m) < major + minor * np.cos(phi)
        theta, phi = theta[keep], phi[keep]
        ring = major + minor * np.cos(phi)
        pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), minor * np.sin(phi)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


_GENERATORS = {"sphere": _sphere, "cube": _cube, "pyramid": _pyramid, "torus": _torus}


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def synth_shapes(
    classes=SHAPES,
    per_class: int = 250,
    n: int = 256,
    rng: np.random.Generator | int = 0,
    *,
    split: str = "train",
    scale_jitter: float = 0.2,
    jitter_sigma: float = 0.01,
    normalize: bool = True,
) -> Dataset:
    """Balanced dataset of analytic surfaces with random scale, rotation and jitter.

    Samples are ordered class by class; shuffle at training time.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    classes = sorted(classes)
    for c in classes:
        if c not in _GENERATORS:
            raise ValueError(f"unknown shape class {c!r}; choose from {SHAPES}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    clouds, labels = [], []
    for label, name in enumerate(classes):
        for _ in range(per_class):
            pts = _GENERATORS[name](n, rng)
            pts = pts * rng.uniform(1 - scale_jitter, 1 + scale_jitter)
            pts = pts @ _random_rotation(rng).T
            pts = pts + rng.normal(0, jitter_sigma, size=pts.shape)
            if normalize:
                pts = normalize_cloud(pts)
            clouds.append(pts.astype(np.float32))
            labels.append(label)
    manifest = DatasetManifest(classes, split, len(labels), n)
    return Dataset(np.stack(clouds), np.array(labels, dtype=np.int32), manifest)


# --------------------------------------------------------------------------
# ModelNet-style directories


def scan_modelnet(root) -> dict[str, dict[str, list[Path]]]:
    """``{split: {class_name: [off paths]}}`` for a ``class/split/*.off`` tree."""
    root = Path(root)
    layout: dict[str, dict[str, list[Path]]] = {"train": {}, "test": {}}
    if not root.is_dir():
        return layout
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for split in ("train", "test"):
            files = sorted((class_dir / split).glob("*.off"))
            if files:
                layout[split][class_dir.name] = files
    return layout


def load_modelnet_split(files_by_class: dict[str, list[Path]], class_names, n, seed, split, strict=False):
    """Parse, sample and normalize every file; returns (dataset, failures)."""
    clouds, labels, checksums, failures = [], [], {}, []
    for label, name in enumerate(class_names):
        for path in files_by_class.get(name, []):
            raw = path.read_bytes()
            digest = hashlib.sha256(raw).hexdigest()
            # per-file stream: results do not depend on processing order
            rng = np.random.default_rng(np.random.SeedSequence([seed, int(digest[:15], 16)]))
            try:
                mesh = parse_off(raw)
                pts = normalize_cloud(sample_mesh(mesh, n, rng))
            except (ParseError, DegenerateMeshError) as exc:
                if strict:
                    raise
                failures.append((path, str(exc)))
                continue
            clouds.append(pts.astype(np.float32))
            labels.append(label)
            checksums[f"{name}/{split}/{path.name}"] = digest
    points = np.stack(clouds) if clouds else np.zeros((0, n, 3), np.float32)
    manifest = DatasetManifest(list(class_names), split, len(labels), n, checksums)
    return Dataset(points, np.array(labels, dtype=np.int32), manifest), failures


# --------------------------------------------------------------------------
# binary cache

_CACHE_MAGIC = b"SPNDATA\x00"
_CACHE_VERSION = 1


def cache_header_size(manifest: DatasetManifest) -> int:
    return len(_CACHE_MAGIC) + 8 + len(_manifest_bytes(manifest))


def _manifest_bytes(manifest: DatasetManifest) -> bytes:
    return json.dumps(manifest.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def cache_write(dataset: Dataset, path) -> None:
    """Header (magic, version, manifest), then per sample: int32 label + n*3 float32."""
    manifest = dataset.manifest
    body = _manifest_bytes(manifest)
    n = manifest.points_per_cloud
    if dataset.points.shape[1:] != (n, 3):
        raise CacheError(f"points shape {dataset.points.shape} disagrees with n={n}")
    if len(dataset) != manifest.sample_count:
        raise CacheError(f"manifest says {manifest.sample_count} samples, dataset has {len(dataset)}")
    labels = np.asarray(dataset.labels, dtype="<i4")
    points = np.asarray(dataset.points, dtype="<f4")
    record = np.dtype([("label", "<i4"), ("points", "<f4", (n, 3))])
    rows = np.empty(len(dataset), dtype=record)
    rows["label"] = labels
    rows["points"] = points
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<II", _CACHE_VERSION, len(body)))
        fh.write(body)
        fh.write(rows.tobytes())


def cache_read(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CacheError(f"{path}: truncated header")
    if data[:8] != _CACHE_MAGIC:
        raise CacheVersionError(f"{path}: bad magic, not a dataset cache")
    version, length = struct.unpack("<II", data[8:16])
    if version != _CACHE_VERSION:
        raise CacheVersionError(f"{path}: unsupported cache version {version}")
    if 16 + length > len(data):
        raise CacheError(f"{path}: truncated manifest")
    try:
        meta = json.loads(data[16 : 16 + length])
        manifest = DatasetManifest(
            list(meta["class_names"]),
            meta["split"],
            int(meta["sample_count"]),
            int(meta["points_per_cloud"]),
            dict(meta.get("source_checksums", {})),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise CacheVersionError(f"{path}: unreadable manifest ({exc})") from None
    n = manifest.points_per_cloud
    record = np.dtype([("label", "<i4"), ("points", "<f4", (n, 3))])
    body = data[16 + length :]
    if len(body) != manifest.sample_count * record.itemsize:
        raise CacheError(
            f"{path}: expected {manifest.sample_count * record.itemsize} payload bytes, found {len(body)}"
        )
    rows = np.frombuffer(body, dtype=record)
    labels = rows["label"].astype(np.int32)
    if labels.size and (labels.min() < 0 or labels.max() >= len(manifest.class_names)):
        raise CacheError(f"{path}: label outside class table")
    return Dataset(rows["points"].astype(np.float32), labels, manifest)
