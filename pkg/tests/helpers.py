"""Independent numerical oracles shared by the tests."""

import math

import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of float64 ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def brute_force_mask(cam, W: int, H: int) -> np.ndarray:
    """Per-pixel frustum test in an explicit camera basis (no shared code)."""
    lon0, lat0 = math.radians(cam.lon), math.radians(cam.lat)
    fwd = (math.cos(lat0) * math.sin(lon0), math.sin(lat0), math.cos(lat0) * math.cos(lon0))
    right = (math.cos(lon0), 0.0, -math.sin(lon0))
    up = (-math.sin(lat0) * math.sin(lon0), math.cos(lat0), -math.sin(lat0) * math.cos(lon0))
    tx, ty = math.tan(math.radians(cam.hfov / 2)), math.tan(math.radians(cam.vfov / 2))
    out = np.zeros((H, W), dtype=bool)
    for v in range(H):
        lat = math.radians(90.0 - (v + 0.5) / H * 180.0)
        for u in range(W):
            lon = math.radians((u + 0.5) / W * 360.0)
            d = (math.cos(lat) * math.sin(lon), math.sin(lat), math.cos(lat) * math.cos(lon))
            z = sum(a * b for a, b in zip(d, fwd))
            x = sum(a * b for a, b in zip(d, right))
            y = sum(a * b for a, b in zip(d, up))
            out[v, u] = z > 0 and abs(x) <= tx * z and abs(y) <= ty * z
    return out


def brute_force_counts(cam, boxes, W: int, H: int) -> tuple[int, int, int]:
    """(gt, pred, overlap) pixel counts by looping over every pixel."""
    view = brute_force_mask(cam, W, H)
    gt = pred = ov = 0
    for v in range(H):
        for u in range(W):
            inside = False
            for x, y, w, h in boxes:
                du = (u - x) % W
                if du < w and y <= v < y + h:
                    inside = True
            gt += inside
            pred += bool(view[v, u])
            ov += inside and bool(view[v, u])
    return gt, pred, ov
