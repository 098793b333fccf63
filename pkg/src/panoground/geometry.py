"""Equirectangular / spherical / perspective geometry.

Conventions used everywhere in the package:

* An equirectangular image is an (H, W, C) array. Pixel (u, v) has its
  centre at longitude ``(u + 0.5) / W * 360`` and latitude
  ``90 - (v + 0.5) / H * 180``; column 0 and column W are the same meridian.
* Longitude grows with u (left to right); latitude is positive upwards.
* A camera looks down +z of its own frame with +x to the right and +y up.
  World direction of (lon, lat) is ``(cos lat sin lon, sin lat, cos lat cos lon)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

DEFAULT_HFOV = 65.5
GRID_LONS = tuple(float(x) for x in range(0, 360, 30))
GRID_LATS = (-30.0, -15.0, 0.0, 15.0, 30.0)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SphericalDir:
    lon: float
    lat: float

    def __post_init__(self):
        if not math.isfinite(self.lon) or not math.isfinite(self.lat):
            raise GeometryError(f"non-finite direction ({self.lon}, {self.lat})")
        if not -90.0 <= self.lat <= 90.0:
            raise GeometryError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", float(self.lon) % 360.0)
        object.__setattr__(self, "lat", float(self.lat))


@dataclass(frozen=True)
class NFoVCamera:
    center: SphericalDir
    hfov: float
    vfov: float
    out_w: int
    out_h: int

    def __post_init__(self):
        for name in ("hfov", "vfov"):
            val = getattr(self, name)
            if not 0.0 < val < 180.0:
                raise GeometryError(f"{name}={val} must lie in (0, 180)")
        if self.out_w < 1 or self.out_h < 1:
            raise GeometryError(f"output size {self.out_w}x{self.out_h} must be positive")

    @classmethod
    def from_aspect(cls, lon: float, lat: float, hfov: float = DEFAULT_HFOV, out_w: int = 64, out_h: int = 48) -> "NFoVCamera":
        """Camera whose vertical extent follows the output aspect ratio."""
        if not 0.0 < hfov < 180.0:
            raise GeometryError(f"hfov={hfov} must lie in (0, 180)")
        vfov = 2.0 * math.degrees(math.atan(math.tan(math.radians(hfov) / 2.0) * out_h / out_w))
        return cls(SphericalDir(lon, lat), hfov, vfov, out_w, out_h)

    @property
    def lon(self) -> float:
        return self.center.lon

    @property
    def lat(self) -> float:
        return self.center.lat

    def with_center(self, lon: float, lat: float) -> "NFoVCamera":
        return NFoVCamera(SphericalDir(lon, lat), self.hfov, self.vfov, self.out_w, self.out_h)

    def with_output(self, out_w: int, out_h: int) -> "NFoVCamera":
        return NFoVCamera(self.center, self.hfov, self.vfov, out_w, out_h)


class CandidateGrid(Sequence[NFoVCamera]):
    """Ordered candidate viewpoints: latitude-major, then longitude."""

    def __init__(self, cameras: Sequence[NFoVCamera], lons: Sequence[float], lats: Sequence[float]):
        self.cameras = tuple(cameras)
        self.lons = tuple(lons)
        self.lats = tuple(lats)

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]

    def __iter__(self) -> Iterator[NFoVCamera]:
        return iter(self.cameras)

    def index_of(self, lon: float, lat: float) -> int:
        for i, cam in enumerate(self.cameras):
            if math.isclose(cam.lon, lon % 360.0, abs_tol=1e-9) and math.isclose(cam.lat, lat, abs_tol=1e-9):
                return i
        raise KeyError((lon, lat))

    def centers(self) -> list[tuple[float, float]]:
        return [(c.lon, c.lat) for c in self.cameras]

    def shift_index(self, i: int, steps: int) -> int:
        """Index of the candidate ``steps`` longitude steps away in the same ring."""
        n = len(self.lons)
        ring, k = divmod(i, n)
        return ring * n + (k + steps) % n


def candidate_grid(
    hfov: float = DEFAULT_HFOV,
    out_w: int = 64,
    out_h: int = 48,
    lons: Sequence[float] = GRID_LONS,
    lats: Sequence[float] = GRID_LATS,
) -> CandidateGrid:
    cams = [NFoVCamera.from_aspect(lon, lat, hfov, out_w, out_h) for lat in lats for lon in lons]
    return CandidateGrid(cams, lons, lats)


# -- pixel <-> direction ----------------------------------------------------

def pix_to_lonlat(u, v, W: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised pixel -> (lon, lat) in degrees, no range checks.

    Written as ``(2u + 1) / 2W`` and ``(H - 1 - 2v) / 2H`` so mirrored rows map
    to exactly negated latitudes.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    lon = (2.0 * u + 1.0) / (2.0 * W) * 360.0
    lat = (H - 1.0 - 2.0 * v) / (2.0 * H) * 180.0
    return lon, lat


def lonlat_to_pix(lon, lat, W: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    return lon / 360.0 * W - 0.5, (90.0 - lat) / 180.0 * H - 0.5


def pix_to_dir(u: float, v: float, W: int, H: int) -> SphericalDir:
    """Direction through fractional pixel (u, v); integer coordinates are pixel centres.

    Rows span v in [-0.5, H - 0.5] from pole to pole.
    """
    if not (0.0 <= u < W and -0.5 <= v <= H - 0.5):
        raise GeometryError(f"pixel ({u}, {v}) outside {W}x{H} image")
    lon, lat = pix_to_lonlat(u, v, W, H)
    return SphericalDir(float(lon), float(lat))


def dir_to_pix(d: SphericalDir, W: int, H: int) -> tuple[float, float]:
    """Fractional pixel coordinates, with u wrapped into [0, W)."""
    u, v = lonlat_to_pix(d.lon, d.lat, W, H)
    return float(u) % W, float(v)


def lonlat_to_xyz(lon, lat) -> np.ndarray:
    lon = np.radians(lon)
    lat = np.radians(lat)
    return np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], axis=-1)


# -- perspective sampling ---------------------------------------------------

def _split_lon(lon: float, W: int) -> tuple[int, float]:
    """Split a longitude into whole image columns plus a residual angle.

    Cameras whose longitudes differ by whole columns then share the same
    residual, so their sampling grids differ by an exact integer shift.
    """
    shift = int(math.floor(lon * W / 360.0))
    return shift, lon - shift * 360.0 / W


def _tangent_extent(cam: NFoVCamera) -> tuple[float, float]:
    return math.tan(math.radians(cam.hfov) / 2.0), math.tan(math.radians(cam.vfov) / 2.0)


def _ray_lonlat(cam: NFoVCamera, lon0: float, out_w: int, out_h: int, cells: bool = False) -> tuple[np.ndarray, np.ndarray]:
    tx, ty = _tangent_extent(cam)
    if cells:
        # centres of an out_w x out_h partition of the image plane
        xs = ((np.arange(out_w) + 0.5) / out_w * 2.0 - 1.0) * tx
        ys = (1.0 - (np.arange(out_h) + 0.5) / out_h * 2.0) * ty
    else:
        # outermost rays sit exactly on the frustum edges
        xs = np.linspace(-tx, tx, out_w) if out_w > 1 else np.zeros(1)
        ys = np.linspace(ty, -ty, out_h) if out_h > 1 else np.zeros(1)
    x, y = np.meshgrid(xs, ys)
    z = np.ones_like(x)
    phi = math.radians(cam.lat)
    cp, sp = math.cos(phi), math.sin(phi)
    y1 = y * cp + z * sp
    z1 = -y * sp + z * cp
    norm = np.sqrt(x * x + y1 * y1 + z1 * z1)
    lat = np.degrees(np.arcsin(np.clip(y1 / norm, -1.0, 1.0)))
    lon = lon0 + np.degrees(np.arctan2(x, z1))
    return lon, lat


def nfov_sampling_grid(cam: NFoVCamera, W: int, H: int, out_w: int | None = None, out_h: int | None = None) -> np.ndarray:
    """Fractional equirect coordinates (u, v) for every output pixel.

    Returns an (out_h, out_w, 2) array; u is reduced modulo W.
    """
    out_w = cam.out_w if out_w is None else out_w
    out_h = cam.out_h if out_h is None else out_h
    shift, lon0 = _split_lon(cam.lon, W)
    lon, lat = _ray_lonlat(cam, lon0, out_w, out_h)
    u, v = lonlat_to_pix(lon, lat, W, H)
    return np.stack([np.mod(u + shift, W), v], axis=-1)


@dataclass(frozen=True)
class Taps:
    """Bilinear taps into a flattened (H*W) grid.

    ``rows``/``cols`` are (P, 2) neighbour indices; ``fy``/``fx`` the
    fractional offsets, all for P sample points.
    """

    rows: np.ndarray
    cols: np.ndarray
    fy: np.ndarray
    fx: np.ndarray
    W: int
    H: int

    def flat_index(self) -> np.ndarray:
        r, c = self.rows, self.cols
        return np.stack([r[:, 0] * self.W + c[:, 0], r[:, 0] * self.W + c[:, 1],
                         r[:, 1] * self.W + c[:, 0], r[:, 1] * self.W + c[:, 1]], axis=1)

    def weights(self) -> np.ndarray:
        fx, fy = self.fx, self.fy
        return np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)


def sampling_taps(cam: NFoVCamera, W: int, H: int, out_w: int | None = None, out_h: int | None = None, cells: bool = False) -> Taps:
    """Bilinear taps for the camera's sampling grid (longitude wrap, latitude clamp).

    With ``cells`` the rays go through the centres of an out_w x out_h
    partition of the view instead of spanning it edge to edge.
    """
    out_w = cam.out_w if out_w is None else out_w
    out_h = cam.out_h if out_h is None else out_h
    shift, lon0 = _split_lon(cam.lon, W)
    lon, lat = _ray_lonlat(cam, lon0, out_w, out_h, cells)
    u, v = lonlat_to_pix(lon.reshape(-1), lat.reshape(-1), W, H)
    u0 = np.floor(u)
    fx = u - u0
    c0 = (u0.astype(np.int64) + shift) % W
    c1 = (c0 + 1) % W
    v = np.clip(v, 0.0, H - 1.0)
    v0 = np.floor(v)
    fy = v - v0
    r0 = v0.astype(np.int64)
    r1 = np.minimum(r0 + 1, H - 1)
    return Taps(np.stack([r0, r1], 1), np.stack([c0, c1], 1), fy, fx, W, H)


def bilinear_sample(img: np.ndarray, taps: Taps) -> np.ndarray:
    """Sample (H, W, C) ``img`` at the taps; returns (P, C).

    Uses nested lerps, so regions of constant value are reproduced exactly.
    """
    r, c = taps.rows, taps.cols
    fx = taps.fx[:, None]
    fy = taps.fy[:, None]
    p00 = img[r[:, 0], c[:, 0]]
    p01 = img[r[:, 0], c[:, 1]]
    p10 = img[r[:, 1], c[:, 0]]
    p11 = img[r[:, 1], c[:, 1]]
    top = p00 + fx * (p01 - p00)
    bot = p10 + fx * (p11 - p10)
    return top + fy * (bot - top)


def extract_nfov(img: np.ndarray, cam: NFoVCamera) -> np.ndarray:
    """Perspective view of an (H, W, C) panorama; returns (out_h, out_w, C)."""
    img = np.asarray(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    H, W, C = img.shape
    out = bilinear_sample(img, sampling_taps(cam, W, H)).reshape(cam.out_h, cam.out_w, C)
    return out[:, :, 0] if squeeze else out


def rotate_longitude(img: np.ndarray, shift_px: int) -> np.ndarray:
    """Cyclic column shift: column ``shift_px`` becomes column 0.

    Content previously at longitude ``lon`` ends up at ``lon - shift_px * 360 / W``.
    """
    img = np.asarray(img)
    if int(shift_px) != shift_px:
        raise GeometryError(f"shift {shift_px} is not a whole pixel count")
    return np.roll(img, -int(shift_px) % img.shape[1], axis=1)


# -- frustum masks ----------------------------------------------------------

def camera_frame_coords(cam: NFoVCamera, lon, lat, lon0: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directions (lon, lat) expressed in the camera frame (x right, y up, z forward)."""
    ref = cam.lon if lon0 is None else lon0
    dl = np.radians(np.asarray(lon, dtype=np.float64) - ref)
    la = np.radians(np.asarray(lat, dtype=np.float64))
    x1 = np.cos(la) * np.sin(dl)
    y1 = np.sin(la)
    z1 = np.cos(la) * np.cos(dl)
    phi = math.radians(cam.lat)
    cp, sp = math.cos(phi), math.sin(phi)
    return x1, y1 * cp - z1 * sp, y1 * sp + z1 * cp


def nfov_mask(cam: NFoVCamera, W: int, H: int) -> np.ndarray:
    """Boolean (H, W) mask of equirect pixels whose centre lies inside the frustum."""
    shift, lon0 = _split_lon(cam.lon, W)
    lon, lat = pix_to_lonlat(np.arange(W)[None, :], np.arange(H)[:, None], W, H)
    x, y, z = camera_frame_coords(cam, lon, lat, lon0=lon0)
    tx, ty = _tangent_extent(cam)
    mask = (z > 0) & (np.abs(x) <= tx * z) & (np.abs(y) <= ty * z)
    return np.roll(mask, shift, axis=1)
