"""Dataset utilities: location sampling, inequality statistics, splits and heatmaps.

The sampler picks a country with probability proportional to its surface
area, a city uniformly within it, and a point uniformly (by area) on the
geodesic disk of radius 5 km around the city centre. All randomness for a
manifest comes from one ``(n, 4)`` block of uniforms drawn from a seeded
generator, so entry ``k`` depends only on the seed and ``k``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geocell import GeoPoint
from .inference import EARTH_RADIUS_KM, haversine_km_array

SAMPLE_RADIUS_KM = 5.0


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class CountryRecord:
    name: str
    surface_area_km2: float
    cities: tuple[tuple[str, GeoPoint], ...]

    def __post_init__(self):
        if not self.surface_area_km2 > 0 or not math.isfinite(self.surface_area_km2):
            raise DataError(f"country {self.name!r}: surface area must be positive, got {self.surface_area_km2}")
        if not self.cities:
            raise DataError(f"country {self.name!r} has no cities")
        object.__setattr__(self, "cities", tuple(self.cities))


@dataclass(frozen=True)
class SampleManifestEntry:
    country: str
    city: str
    point: GeoPoint
    radius_km: float = SAMPLE_RADIUS_KM

    def to_dict(self) -> dict:
        return {"country": self.country, "city": self.city, "lat": self.point.lat_deg,
                "lon": self.point.lon_deg, "radius_km": self.radius_km}


@dataclass(frozen=True)
class ImageRecord:
    id: str
    lat: float
    lon: float
    photographer: str
    scene_id: int
    city: str | None = None

    @property
    def point(self) -> GeoPoint:
        return GeoPoint(self.lat, self.lon)


@dataclass
class DistributionStats:
    counts: list[int]
    lorenz: list[tuple[float, float]]
    gini: float


# -- sampling -----------------------------------------------------------------------

def destination(lat_deg, lon_deg, bearing_rad, dist_km):
    """Point reached by travelling ``dist_km`` along a great circle at ``bearing_rad``."""
    phi1, lam1 = np.radians(lat_deg), np.radians(lon_deg)
    delta = np.asarray(dist_km, dtype=np.float64) / EARTH_RADIUS_KM
    sin_phi2 = np.sin(phi1) * np.cos(delta) + np.cos(phi1) * np.sin(delta) * np.cos(bearing_rad)
    phi2 = np.arcsin(np.clip(sin_phi2, -1.0, 1.0))
    lam2 = lam1 + np.arctan2(np.sin(bearing_rad) * np.sin(delta) * np.cos(phi1),
                             np.cos(delta) - np.sin(phi1) * sin_phi2)
    return np.degrees(phi2), np.degrees(lam2)


def sample_locations(countries: Sequence[CountryRecord], n: int, seed: int) -> list[SampleManifestEntry]:
    if not countries:
        raise DataError("cannot sample from an empty country list")
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    u = np.random.default_rng(seed).random((n, 4))
    areas = np.array([c.surface_area_km2 for c in countries], dtype=np.float64)
    cdf = np.cumsum(areas / areas.sum())
    cdf[-1] = 1.0
    country_idx = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), len(countries) - 1)
    n_cities = np.array([len(c.cities) for c in countries])[country_idx]
    city_idx = np.minimum((u[:, 1] * n_cities).astype(np.int64), n_cities - 1)

    centres = np.array([[countries[c].cities[k][1].lat_deg, countries[c].cities[k][1].lon_deg]
                        for c, k in zip(country_idx, city_idx)])
    # sqrt keeps the density uniform in area on the (nearly flat) disk
    r = SAMPLE_RADIUS_KM * np.sqrt(u[:, 2])
    lat, lon = destination(centres[:, 0], centres[:, 1], 2.0 * np.pi * u[:, 3], r)
    return [SampleManifestEntry(countries[c].name, countries[c].cities[k][0], GeoPoint(a, b))
            for c, k, a, b in zip(country_idx, city_idx, lat, lon)]


# -- inequality ------------------------------------------------------------------------

def gini(counts: Iterable[float]) -> float:
    """Mean absolute difference over all ordered pairs divided by twice the mean."""
    x = np.asarray(list(counts), dtype=np.float64)
    if x.size == 0:
        raise ValueError("gini of an empty sequence")
    if (x < 0).any() or not np.isfinite(x).all():
        raise ValueError("gini needs finite nonnegative values")
    total = math.fsum(x)
    if total == 0:
        raise ValueError("gini is undefined when every count is zero")
    n = x.size
    # pairwise differences are shift invariant; subtracting the minimum makes equal counts give exactly 0
    y = np.sort(x) - x.min()
    weights = 2.0 * np.arange(1, n + 1) - n - 1
    return math.fsum(weights * y) / (n * total)


def lorenz(counts: Iterable[float]) -> list[tuple[float, float]]:
    """``(k/n, share of the k smallest values)`` for k = 0..n."""
    x = np.sort(np.asarray(list(counts), dtype=np.float64))
    n = x.size
    if n == 0:
        raise ValueError("lorenz curve of an empty sequence")
    total = x.sum()
    xs = np.arange(n + 1) / n
    if total == 0:
        return [(float(a), float(a)) for a in xs]
    ys = np.concatenate([[0.0], np.cumsum(x) / total])
    ys[-1] = 1.0
    return [(float(a), float(b)) for a, b in zip(xs, ys)]


def lorenz_area(points: Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under a Lorenz curve."""
    p = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(p[:, 0]) * (p[1:, 1] + p[:-1, 1]) / 2.0))


def distribution_stats(counts: Sequence[int]) -> DistributionStats:
    counts = [int(c) for c in counts]
    return DistributionStats(counts, lorenz(counts), gini(counts))


def per_city_counts(records: Sequence[ImageRecord], key=None) -> dict[str, int]:
    """Image counts grouped by ``key(record)`` (default: the record's city)."""
    key = key or (lambda r: r.city)
    out: dict[str, int] = {}
    for r in records:
        k = key(r)
        if k is None:
            raise DataError(f"record {r.id!r} has no city")
        out[k] = out.get(k, 0) + 1
    return out


def nearest_city(records: Sequence[ImageRecord], cities: Sequence[tuple[str, GeoPoint]]) -> list[str]:
    """Name of the closest city centre for each record."""
    if not cities:
        raise DataError("nearest_city needs at least one city")
    centres = np.array([[p.lat_deg, p.lon_deg] for _, p in cities])
    names = [c for c, _ in cities]
    out = []
    for r in records:
        d = haversine_km_array(np.broadcast_to([r.lat, r.lon], centres.shape), centres)
        out.append(names[int(np.argmin(d))])
    return out


# -- splits and grids ------------------------------------------------------------------------

def split_by_photographer(records: Sequence[ImageRecord], test_fraction: float, seed: int):
    """Partition photographers (not images) so the test side holds about ``test_fraction`` of the images.

    Photographers are shuffled and moved to the test side while it is below
    its target size.
    """
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1], got {test_fraction}")
    groups: dict[str, list[ImageRecord]] = {}
    for r in records:
        groups.setdefault(r.photographer, []).append(r)
    order = sorted(groups)
    np.random.default_rng(seed).shuffle(order)
    target = round(test_fraction * len(records))
    train, test = [], []
    for name in order:
        side = test if len(test) < target else train
        side.extend(groups[name])
    return train, test


def heatmap_grid(points, lat_bins: int, lon_bins: int) -> np.ndarray:
    """``[lat_bins, lon_bins]`` equirectangular counts; row 0 is the south edge, column 0 is lon -180."""
    if lat_bins < 1 or lon_bins < 1:
        raise ValueError("heatmap needs at least one bin per axis")
    arr = np.asarray([[p.lat_deg, p.lon_deg] if isinstance(p, GeoPoint) else p for p in points],
                     dtype=np.float64).reshape(-1, 2)
    lon = (arr[:, 1] + 180.0) % 360.0
    row = np.clip(np.floor((arr[:, 0] + 90.0) / 180.0 * lat_bins), 0, lat_bins - 1).astype(np.int64)
    col = np.clip(np.floor(lon / 360.0 * lon_bins), 0, lon_bins - 1).astype(np.int64)
    grid = np.zeros((lat_bins, lon_bins), dtype=np.int64)
    np.add.at(grid, (row, col), 1)
    return grid


# -- file formats -------------------------------------------------------------------------------

def _point(lat, lon, where: str) -> GeoPoint:
    try:
        return GeoPoint(float(lat), float(lon))
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: {exc}") from None


def load_countries(path) -> list[CountryRecord]:
    """Read a country database.

    ``.json``: ``{"countries": [{"name", "surface_area_km2", "cities": [{"name", "lat", "lon"}]}]}``.
    ``.csv``: one city per row with columns ``city, lat, lng, country, area_km2``
    (the layout of a simplemaps world-cities export plus a country area column).
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_countries_csv(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    rows = doc.get("countries") if isinstance(doc, dict) else doc
    if not isinstance(rows, list):
        raise DataError(f"{path}: expected a list of countries")
    out = []
    for k, c in enumerate(rows, 1):
        where = f"{path} country {k}"
        try:
            cities = tuple((str(ci["name"]), _point(ci["lat"], ci["lon"], where)) for ci in c["cities"])
            out.append(CountryRecord(str(c["name"]), float(c["surface_area_km2"]), cities))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{where}: missing or malformed field {exc}") from None
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from None
    return out


def _load_countries_csv(path: Path) -> list[CountryRecord]:
    areas: dict[str, float] = {}
    cities: dict[str, list] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"city", "lat", "lng", "country", "area_km2"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, 2):
            where = f"{path} row {row_no}"
            try:
                area = float(row["area_km2"])
            except (TypeError, ValueError):
                raise DataError(f"{where}: bad area {row['area_km2']!r}") from None
            name = row["country"]
            if name in areas and areas[name] != area:
                raise DataError(f"{where}: country {name!r} listed with two areas")
            areas[name] = area
            cities.setdefault(name, []).append((row["city"], _point(row["lat"], row["lng"], where)))
    try:
        return [CountryRecord(name, areas[name], tuple(cities[name])) for name in areas]
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_metadata(path) -> list[ImageRecord]:
    """Read line-delimited JSON image records ``{id, lat, lon, photographer, scene_id[, city]}``."""
    out = []
    with Path(path).open() as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path} line {line_no}"
            try:
                d = json.loads(line)
                rec = ImageRecord(str(d["id"]), float(d["lat"]), float(d["lon"]), str(d["photographer"]),
                                  int(d["scene_id"]), d.get("city"))
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
            except KeyError as exc:
                raise DataError(f"{where}: missing field {exc}") from None
            except (TypeError, ValueError) as exc:
                raise DataError(f"{where}: {exc}") from None
            if rec.scene_id < 0:
                raise DataError(f"{where}: scene_id must be nonnegative")
            _point(rec.lat, rec.lon, where)
            out.append(rec)
    return out


def record_to_dict(r: ImageRecord) -> dict:
    d = {"id": r.id, "lat": r.lat, "lon": r.lon, "photographer": r.photographer, "scene_id": r.scene_id}
    if r.city is not None:
        d["city"] = r.city
    return d
