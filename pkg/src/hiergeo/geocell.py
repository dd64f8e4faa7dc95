"""Occupancy-balanced cube-face quadtree cells and nested class hierarchies.

The sphere is projected gnomonically onto the six faces of a cube; each face
is a quadtree in linear ``(u, v)`` coordinates. A hierarchy is built by
splitting every cell holding more than ``t_max`` training points and then
dropping leaves holding fewer than ``t_min``. Several hierarchies built from
the same points with decreasing ``t_max`` nest, which gives each fine class a
unique coarse parent.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_DEPTH = 30
PARTITION_FORMAT = "hiergeo-partition"
PARTITION_VERSION = 1
DEFAULT_T_MAX = (25000, 10000, 5000, 2000, 1000, 750, 500)
DEFAULT_T_MIN = 50

_SCALE = 1 << MAX_DEPTH


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    """Latitude/longitude in degrees; longitude is wrapped into [-180, 180)."""

    lat_deg: float
    lon_deg: float

    def __post_init__(self):
        lat, lon = float(self.lat_deg), float(self.lon_deg)
        if not (-90.0 <= lat <= 90.0) or not math.isfinite(lon):
            raise ValueError(f"invalid coordinate lat={self.lat_deg} lon={self.lon_deg}")
        lon = (lon + 180.0) % 360.0 - 180.0
        if lon >= 180.0:  # fmod rounding for tiny negatives
            lon -= 360.0
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "lon_deg", lon)

    def to_xyz(self) -> np.ndarray:
        return latlon_to_xyz(np.array([self.lat_deg]), np.array([self.lon_deg]))[0]


@dataclass(frozen=True, order=True)
class CellId:
    face: int
    depth: int
    i: int
    j: int

    def parent(self) -> "CellId":
        if self.depth == 0:
            raise PartitionError("a face cell has no parent")
        return CellId(self.face, self.depth - 1, self.i >> 1, self.j >> 1)

    def children(self) -> tuple["CellId", ...]:
        d = self.depth + 1
        return tuple(CellId(self.face, d, 2 * self.i + a, 2 * self.j + b) for a in (0, 1) for b in (0, 1))

    def ancestor(self, depth: int) -> "CellId":
        if not 0 <= depth <= self.depth:
            raise PartitionError(f"no ancestor of {self} at depth {depth}")
        shift = self.depth - depth
        return CellId(self.face, depth, self.i >> shift, self.j >> shift)

    def contains(self, other: "CellId") -> bool:
        """True when ``self`` is an ancestor of (or equal to) ``other``."""
        return (other.face == self.face and other.depth >= self.depth
                and other.ancestor(self.depth) == self)


# -- projection ---------------------------------------------------------------

def latlon_to_xyz(lat_deg, lon_deg) -> np.ndarray:
    lat = np.radians(np.asarray(lat_deg, dtype=np.float64))
    lon = np.radians(np.asarray(lon_deg, dtype=np.float64))
    c = np.cos(lat)
    return np.stack([c * np.cos(lon), c * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_latlon(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xyz = np.asarray(xyz, dtype=np.float64)
    lat = np.degrees(np.arctan2(xyz[..., 2], np.hypot(xyz[..., 0], xyz[..., 1])))
    lon = np.degrees(np.arctan2(xyz[..., 1], xyz[..., 0]))
    return lat, lon


def xyz_to_face_uv(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Face index and gnomonic (u, v) in [-1, 1].

    Faces 0..2 are +x, +y, +z and 3..5 are -x, -y, -z. On exact ties of
    |coordinate| the lowest axis wins.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    axis = np.argmax(np.abs(xyz), axis=-1)
    neg = np.take_along_axis(xyz, axis[..., None], axis=-1)[..., 0] < 0
    face = axis + 3 * neg
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        table = [
            (y / x, z / x),
            (-x / y, z / y),
            (-x / z, -y / z),
            (z / x, y / x),
            (z / y, -x / y),
            (-y / z, -x / z),
        ]
    u = np.select([face == f for f in range(6)], [t[0] for t in table])
    v = np.select([face == f for f in range(6)], [t[1] for t in table])
    return face.astype(np.int64), u, v


def _uv_to_leaf(w: np.ndarray) -> np.ndarray:
    s = 0.5 * (w + 1.0)
    return np.clip(np.floor(s * _SCALE), 0, _SCALE - 1).astype(np.int64)


def leaf_codes(lat_deg, lon_deg) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Face and (i, j) at ``MAX_DEPTH`` for arrays of coordinates.

    Cells at coarser depths are obtained by right-shifting ``i`` and ``j``,
    which makes ancestry consistent by construction.
    """
    face, u, v = xyz_to_face_uv(latlon_to_xyz(lat_deg, lon_deg))
    return face, _uv_to_leaf(u), _uv_to_leaf(v)


def point_to_cell(p: GeoPoint, depth: int) -> CellId:
    if not 0 <= depth <= MAX_DEPTH:
        raise PartitionError(f"depth must be in [0, {MAX_DEPTH}], got {depth}")
    face, i, j = leaf_codes([p.lat_deg], [p.lon_deg])
    shift = MAX_DEPTH - depth
    return CellId(int(face[0]), depth, int(i[0]) >> shift, int(j[0]) >> shift)


def spherical_mean(lat_deg, lon_deg) -> GeoPoint:
    """Normalised mean of unit vectors.

    Summation is exactly rounded so the result does not depend on input order.
    """
    xyz = latlon_to_xyz(lat_deg, lon_deg).reshape(-1, 3)
    total = np.array([math.fsum(xyz[:, k]) for k in range(3)])
    norm = float(np.linalg.norm(total))
    if norm < 1e-9:
        raise PartitionError("spherical mean is undefined: member vectors cancel")
    lat, lon = xyz_to_latlon(total / norm)
    return GeoPoint(float(lat), float(lon))


# -- partitions ---------------------------------------------------------------

@dataclass
class HierarchyPartition:
    level: int
    t_max: int
    t_min: int
    classes: list[CellId]
    counts: np.ndarray
    centroids: list[GeoPoint]
    class_of_cell: dict[CellId, int] = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if not self.class_of_cell:
            self.class_of_cell = {c: k for k, c in enumerate(self.classes)}
        # per depth: sorted integer keys face*4^d + i*2^d + j and their class indices
        self._index: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for d in sorted({c.depth for c in self.classes}):
            ks = [(_cell_key(c.face, c.i, c.j, d), k) for k, c in enumerate(self.classes) if c.depth == d]
            keys = np.array([a for a, _ in ks], dtype=np.int64)
            order = np.argsort(keys)
            self._index[d] = (keys[order], np.array([b for _, b in ks], dtype=np.int64)[order])

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def depths(self) -> list[int]:
        return list(self._index)

    def lookup_codes(self, face: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Class index for leaf codes, -1 where no retained cell contains the point."""
        face, i, j = np.asarray(face), np.asarray(i), np.asarray(j)
        out = np.full(face.shape, -1, dtype=np.int64)
        for d, (keys, cls) in self._index.items():
            shift = MAX_DEPTH - d
            q = _cell_key(face, i >> shift, j >> shift, d)
            pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
            hit = (keys[pos] == q) & (out == -1)
            out[hit] = cls[pos[hit]]
        return out

    def centroid_array(self) -> np.ndarray:
        return np.array([[c.lat_deg, c.lon_deg] for c in self.centroids], dtype=np.float64).reshape(-1, 2)


def _cell_key(face, i, j, depth: int):
    return (face << (2 * depth)) + (i << depth) + j


def class_centroid(partition: HierarchyPartition, class_index: int) -> GeoPoint:
    if not 0 <= class_index < len(partition):
        raise PartitionError(f"class {class_index} does not exist (partition has {len(partition)})")
    return partition.centroids[class_index]


def _as_latlon(points) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(points, np.ndarray):
        arr = points.reshape(-1, 2).astype(np.float64)
        return arr[:, 0], arr[:, 1]
    pts = list(points)
    if pts and isinstance(pts[0], GeoPoint):
        return (np.array([p.lat_deg for p in pts], dtype=np.float64),
                np.array([p.lon_deg for p in pts], dtype=np.float64))
    arr = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def _split_cells(face, ii, jj, t_min: int, t_max: int) -> list[tuple[CellId, np.ndarray]]:
    retained: list[tuple[CellId, np.ndarray]] = []
    stack = [(CellId(f, 0, 0, 0), np.flatnonzero(face == f)) for f in range(6)]
    while stack:
        cell, members = stack.pop()
        n = members.size
        if n > t_max and cell.depth < MAX_DEPTH:
            bit = MAX_DEPTH - cell.depth - 1
            bi = (ii[members] >> bit) & 1
            bj = (jj[members] >> bit) & 1
            for a in (0, 1):
                for b in (0, 1):
                    sub = members[(bi == a) & (bj == b)]
                    if sub.size:
                        stack.append((CellId(cell.face, cell.depth + 1, 2 * cell.i + a, 2 * cell.j + b), sub))
        elif n >= t_min:
            retained.append((cell, members))
    retained.sort(key=lambda item: item[0])
    return retained


def _check_thresholds(t_min: int, t_max: int) -> None:
    if t_min < 1 or t_max < t_min:
        raise PartitionError(f"need 1 <= t_min <= t_max, got t_min={t_min}, t_max={t_max}")


def _build_from_codes(lat, lon, face, ii, jj, t_min, t_max, level) -> HierarchyPartition:
    _check_thresholds(t_min, t_max)
    retained = _split_cells(face, ii, jj, t_min, t_max)
    classes = [c for c, _ in retained]
    counts = [m.size for _, m in retained]
    centroids = [spherical_mean(lat[m], lon[m]) for _, m in retained]
    return HierarchyPartition(level, int(t_max), int(t_min), classes, np.array(counts, dtype=np.int64), centroids)


def build_hierarchy(points, t_min: int, t_max: int, level: int = 1) -> HierarchyPartition:
    """Split cells holding more than ``t_max`` points; keep leaves with at least ``t_min``.

    Cells at ``MAX_DEPTH`` are kept even above ``t_max`` so coincident points
    cannot cause endless splitting. Classes are ordered by (face, depth, i, j).
    """
    lat, lon = _as_latlon(points)
    face, ii, jj = leaf_codes(lat, lon)
    return _build_from_codes(lat, lon, face, ii, jj, t_min, t_max, level)


@dataclass
class PartitionStack:
    hierarchies: list[HierarchyPartition]
    parent_maps: list[np.ndarray]

    @property
    def num_hierarchies(self) -> int:
        return len(self.hierarchies)

    @property
    def classes_per_hierarchy(self) -> list[int]:
        return [len(h) for h in self.hierarchies]

    @property
    def finest(self) -> HierarchyPartition:
        return self.hierarchies[-1]

    def labels_for(self, lat, lon) -> np.ndarray:
        """``[N, H]`` class indices, -1 where the point's cell was dropped."""
        face, ii, jj = leaf_codes(lat, lon)
        return np.stack([h.lookup_codes(face, ii, jj) for h in self.hierarchies], axis=-1).reshape(-1, len(self.hierarchies))

    def ancestor_table(self) -> np.ndarray:
        """``[C_fine, H]``: the class index of each fine class's ancestor per hierarchy."""
        n = len(self.finest)
        table = np.zeros((n, self.num_hierarchies), dtype=np.int64)
        idx = np.arange(n)
        table[:, -1] = idx
        for h in range(self.num_hierarchies - 2, -1, -1):
            idx = self.parent_maps[h][idx]
            table[:, h] = idx
        return table


def _parent_map(coarse: HierarchyPartition, fine: HierarchyPartition) -> np.ndarray:
    out = np.empty(len(fine), dtype=np.int64)
    for k, cell in enumerate(fine.classes):
        parent = -1
        for d in coarse.depths:
            if d > cell.depth:
                break
            parent = coarse.class_of_cell.get(cell.ancestor(d), -1)
            if parent >= 0:
                break
        if parent < 0:
            raise PartitionError(f"fine class {cell} has no ancestor in hierarchy {coarse.level}")
        out[k] = parent
    return out


def build_stack(points, t_max_list: Sequence[int] = DEFAULT_T_MAX, t_min: int = DEFAULT_T_MIN) -> PartitionStack:
    t_max_list = [int(t) for t in t_max_list]
    if not t_max_list:
        raise PartitionError("t_max list is empty")
    if any(b >= a for a, b in zip(t_max_list, t_max_list[1:])):
        raise PartitionError(f"t_max list must be strictly decreasing, got {t_max_list}")
    lat, lon = _as_latlon(points)
    face, ii, jj = leaf_codes(lat, lon)
    hierarchies = [_build_from_codes(lat, lon, face, ii, jj, t_min, t, level)
                   for level, t in enumerate(t_max_list, start=1)]
    parents = [_parent_map(c, f) for c, f in zip(hierarchies, hierarchies[1:])]
    return PartitionStack(hierarchies, parents)


def assign_labels(p: GeoPoint, stack: PartitionStack) -> list[int | None]:
    row = stack.labels_for([p.lat_deg], [p.lon_deg])[0]
    return [int(k) if k >= 0 else None for k in row]


# -- file format --------------------------------------------------------------

def partition_to_dict(stack: PartitionStack, extra: dict | None = None) -> dict:
    doc = {
        "format": PARTITION_FORMAT,
        "version": PARTITION_VERSION,
        "t_min": stack.hierarchies[0].t_min if stack.hierarchies else None,
        "t_max": [h.t_max for h in stack.hierarchies],
        "hierarchies": [
            {
                "level": h.level,
                "t_max": h.t_max,
                "t_min": h.t_min,
                "classes": [[c.face, c.depth, c.i, c.j] for c in h.classes],
                "counts": [int(n) for n in h.counts],
                "centroids": [[round(c.lat_deg, 9), round(c.lon_deg, 9)] for c in h.centroids],
            }
            for h in stack.hierarchies
        ],
        "parent_maps": [[int(x) for x in m] for m in stack.parent_maps],
    }
    doc.update(extra or {})
    return doc


def partition_from_dict(doc: dict) -> PartitionStack:
    if doc.get("format") != PARTITION_FORMAT or doc.get("version") != PARTITION_VERSION:
        raise PartitionError(f"not a {PARTITION_FORMAT} v{PARTITION_VERSION} document")
    hierarchies = []
    for h in doc["hierarchies"]:
        hierarchies.append(HierarchyPartition(
            int(h["level"]), int(h["t_max"]), int(h["t_min"]),
            [CellId(*map(int, c)) for c in h["classes"]],
            np.array(h["counts"], dtype=np.int64),
            [GeoPoint(lat, lon) for lat, lon in h["centroids"]],
        ))
    parents = [np.array(m, dtype=np.int64) for m in doc["parent_maps"]]
    if len(parents) != max(len(hierarchies) - 1, 0):
        raise PartitionError("parent map count does not match hierarchy count")
    for k, m in enumerate(parents):
        if len(m) != len(hierarchies[k + 1]) or (len(m) and (m.min() < 0 or m.max() >= len(hierarchies[k]))):
            raise PartitionError(f"parent map {k} is inconsistent with its hierarchies")
    return PartitionStack(hierarchies, parents)


def save_partition(stack: PartitionStack, path, extra: dict | None = None) -> str:
    """Write the stack as JSON and return the file's sha256."""
    text = json.dumps(partition_to_dict(stack, extra), indent=1, sort_keys=True) + "\n"
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_partition(path) -> tuple[PartitionStack, str]:
    raw = Path(path).read_bytes()
    return partition_from_dict(json.loads(raw)), hashlib.sha256(raw).hexdigest()

