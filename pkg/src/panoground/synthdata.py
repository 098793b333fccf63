"""Synthetic narrated-panorama dataset and the on-disk manifest format.

Layout::

    <root>/manifest.json
    <root>/frames/<video>/<frame:04d>.png

Each frame holds zero or more subtitle records ``{text, gt_boxes, ...}``;
boxes are ``[x, y, w, h]`` in pixels, and ``x + w`` may exceed the width for
boxes that wrap across the longitude seam.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import GtBox
from .geometry import SphericalDir
from .imageio import save_png

SCHEMA = "pg-data-1"

COLORS = {
    "red": (0.86, 0.14, 0.12),
    "green": (0.16, 0.70, 0.22),
    "blue": (0.14, 0.28, 0.92),
    "yellow": (0.94, 0.86, 0.10),
    "purple": (0.58, 0.18, 0.78),
    "orange": (0.97, 0.52, 0.08),
    "cyan": (0.08, 0.82, 0.86),
}
SHAPES = ("ball", "ring")
# never named in subtitles; only used for background clutter
CLUTTER_COLORS = ((0.95, 0.95, 0.93), (0.06, 0.06, 0.08), (0.96, 0.56, 0.74), (0.46, 0.28, 0.12), (0.55, 0.57, 0.62))
RING_INNER = 0.55

TEMPLATES = {
    0: ("the {t} is here", "look at the {t}", "you can see the {t} now", "this is the {t}"),
    1: ("the {t} is next to the {d1}", "look at the {t} not the {d1}", "see the {t} beside the {d1}"),
    2: ("the {t} is between the {d1} and the {d2}", "look at the {t} near the {d1} and the {d2}"),
}
DISTRACTOR_P = (0.5, 0.3, 0.2)


class ManifestError(ValueError):
    pass


# -- manifest types ---------------------------------------------------------

@dataclass
class Subtitle:
    text: str
    boxes: list[GtBox]
    extra: dict = field(default_factory=dict)


@dataclass
class Frame:
    image: str
    subtitles: list[Subtitle]


@dataclass
class Video:
    id: str
    frames: list[Frame]


@dataclass
class Manifest:
    root: Path
    width: int
    height: int
    videos: list[Video]
    meta: dict = field(default_factory=dict)

    def image_path(self, frame: Frame) -> Path:
        return self.root / frame.image

    def subset(self, ids: Sequence[str]) -> "Manifest":
        keep = set(ids)
        return Manifest(self.root, self.width, self.height, [v for v in self.videos if v.id in keep], dict(self.meta))

    def sentences(self) -> list[str]:
        return [s.text for v in self.videos for f in v.frames for s in f.subtitles]

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "width": self.width,
            "height": self.height,
            "meta": self.meta,
            "videos": [
                {
                    "id": v.id,
                    "frames": [
                        {
                            "image": f.image,
                            "subtitles": [
                                {"text": s.text, "gt_boxes": [b.as_list() for b in s.boxes], **s.extra}
                                for s in f.subtitles
                            ],
                        }
                        for f in v.frames
                    ],
                }
                for v in self.videos
            ],
        }

    def save(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")
        return path


def load(path: str | os.PathLike, check_images: bool = True) -> Manifest:
    """Read and validate a dataset directory (or a manifest file inside one)."""
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    if not mpath.exists():
        raise ManifestError(f"{mpath}: manifest not found")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: invalid JSON ({exc})") from None
    if doc.get("schema") != SCHEMA:
        raise ManifestError(f"{mpath}: unknown schema version {doc.get('schema')!r}")
    root = mpath.parent
    W, H = doc.get("width"), doc.get("height")
    if not isinstance(W, int) or not isinstance(H, int) or W < 1 or H < 1:
        raise ManifestError(f"{mpath}: width/height must be positive integers")
    videos = []
    seen = set()
    for vi, v in enumerate(doc.get("videos", [])):
        where = f"{mpath}: videos[{vi}]"
        vid = v.get("id")
        if not isinstance(vid, str) or not vid:
            raise ManifestError(f"{where}.id: missing video id")
        if vid in seen:
            raise ManifestError(f"{where}.id: duplicate video id {vid!r}")
        seen.add(vid)
        frames = []
        for fi, f in enumerate(v.get("frames", [])):
            fwhere = f"{where}.frames[{fi}]"
            image = f.get("image")
            if not isinstance(image, str):
                raise ManifestError(f"{fwhere}.image: missing image path")
            if check_images and not (root / image).is_file():
                raise ManifestError(f"{fwhere}.image: file not found: {root / image}")
            subs = []
            for si, s in enumerate(f.get("subtitles", [])):
                swhere = f"{fwhere}.subtitles[{si}]"
                if not isinstance(s.get("text"), str):
                    raise ManifestError(f"{swhere}.text: missing subtitle text")
                boxes = []
                for bi, b in enumerate(s.get("gt_boxes", [])):
                    try:
                        box = GtBox(*(int(x) for x in b))
                        box.validate(W, H)
                    except (TypeError, ValueError) as exc:
                        raise ManifestError(f"{swhere}.gt_boxes[{bi}]: {exc}") from None
                    boxes.append(box)
                extra = {k: val for k, val in s.items() if k not in ("text", "gt_boxes")}
                subs.append(Subtitle(s["text"], boxes, extra))
            frames.append(Frame(image, subs))
        videos.append(Video(vid, frames))
    return Manifest(root, W, H, videos, doc.get("meta", {}))


def split(manifest: Manifest, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> list[Manifest]:
    """Seeded video-level split; largest-remainder rounding of the counts."""
    ratios = [float(r) for r in ratios]
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    n = len(manifest.videos)
    if n < len(ratios):
        raise ValueError(f"cannot split {n} videos into {len(ratios)} parts")
    raw = [r * n for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    for i in sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))[: n - sum(counts)]:
        counts[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    ids = [manifest.videos[i].id for i in order]
    out, start = [], 0
    for c in counts:
        out.append(manifest.subset(ids[start:start + c]))
        start += c
    return out


# -- scene rendering --------------------------------------------------------

@dataclass
class SceneObject:
    name: str
    color: str
    shape: str
    center: SphericalDir
    angular_radius: float

    def __post_init__(self):
        if not 2.0 < self.angular_radius < 40.0:
            raise ValueError(f"angular radius {self.angular_radius} outside (2, 40)")

    @property
    def rgb(self) -> tuple[float, float, float]:
        return COLORS[self.color]

    def moved(self, dlon: float, dlat: float = 0.0) -> "SceneObject":
        lat = min(max(self.center.lat + dlat, -89.0), 89.0)
        return SceneObject(self.name, self.color, self.shape, SphericalDir(self.center.lon + dlon, lat), self.angular_radius)


def make_background(rng: np.random.Generator, W: int, H: int) -> np.ndarray:
    """Muted, smoothly varying texture, periodic in longitude."""
    gh, gw = max(2, H // 16), max(2, W // 16)
    coarse = rng.uniform(0.0, 1.0, size=(gh, gw, 3))
    gray = coarse.mean(axis=2, keepdims=True)
    coarse = 0.3 + 0.3 * (0.75 * gray + 0.25 * coarse)
    # bilinear upsampling, wrapping in width
    ys = (np.arange(H) + 0.5) / H * gh - 0.5
    xs = (np.arange(W) + 0.5) / W * gw - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 1)
    y1 = np.clip(y0 + 1, 0, gh - 1)
    fy = np.clip(ys - np.floor(ys), 0, 1)[:, None, None]
    x0 = np.floor(xs).astype(int) % gw
    x1 = (x0 + 1) % gw
    fx = (xs - np.floor(xs))[None, :, None]
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x1] * fx
    bot = coarse[y1][:, x0] * (1 - fx) + coarse[y1][:, x1] * fx
    bg = top * (1 - fy) + bot * fy
    shade = 0.9 + 0.1 * np.cos(np.radians((np.arange(H) + 0.5) / H * 180.0 - 90.0))[:, None, None]
    bg = bg * shade + rng.uniform(-0.02, 0.02, size=(H, W, 3))
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


def add_clutter(rng: np.random.Generator, background: np.ndarray, count: int) -> np.ndarray:
    """Paint ``count`` unnamed saturated patches, placed like the named objects."""
    H, W, _ = background.shape
    out = background.copy()
    for _ in range(count):
        rgb = CLUTTER_COLORS[int(rng.integers(len(CLUTTER_COLORS)))]
        c = SphericalDir(float(rng.uniform(0.0, 360.0)), float(rng.uniform(-35.0, 35.0)))
        blob = SceneObject("clutter", "", SHAPES[int(rng.integers(len(SHAPES)))], c, float(rng.uniform(8.0, 14.0)))
        out[object_mask(blob, W, H)] = rgb
    return out


def object_mask(obj: SceneObject, W: int, H: int) -> np.ndarray:
    """Pixels whose centre falls on the object's spherical cap (or annulus)."""
    cu = obj.center.lon * W / 360.0
    dlon = np.radians(((np.arange(W) + 0.5) - cu) * (360.0 / W))
    lat = np.radians((H - 1.0 - 2.0 * np.arange(H)) / (2.0 * H) * 180.0)
    olat = math.radians(obj.center.lat)
    cosang = np.cos(lat)[:, None] * math.cos(olat) * np.cos(dlon)[None, :] + (np.sin(lat) * math.sin(olat))[:, None]
    mask = cosang >= math.cos(math.radians(obj.angular_radius))
    if obj.shape == "ring":
        mask &= cosang < math.cos(math.radians(RING_INNER * obj.angular_radius))
    return mask


def render(objects: Sequence[SceneObject], background: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Paint objects over the background; returns (image, label map).

    Label value i+1 marks pixels showing object i; 0 is background.
    """
    H, W, _ = background.shape
    img = background.copy()
    labels = np.zeros((H, W), dtype=np.int16)
    for i, obj in enumerate(objects):
        m = object_mask(obj, W, H)
        img[m] = obj.rgb
        labels[m] = i + 1
    return img, labels


def tight_box(mask: np.ndarray) -> GtBox:
    """Smallest box covering the mask, allowing a wrap across the seam."""
    H, W = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    y, h = int(rows[0]), int(rows[-1] - rows[0] + 1)
    if cols.size == W:
        return GtBox(0, y, W, h)
    # the box starts right after the widest run of empty columns
    gaps = np.diff(np.concatenate([cols, [cols[0] + W]]))
    j = int(np.argmax(gaps))
    start = int(cols[(j + 1) % cols.size])
    end = int(cols[j]) + (W if cols[j] < start else 0)
    return GtBox(start, y, end - start + 1, h)


def _place_objects(rng: np.random.Generator, n: int) -> list[SceneObject]:
    colors = list(rng.permutation(list(COLORS)))[:n]
    objs: list[SceneObject] = []
    for color in colors:
        for _ in range(200):
            r = float(rng.uniform(8.0, 14.0))
            c = SphericalDir(float(rng.uniform(0.0, 360.0)), float(rng.uniform(-35.0, 35.0)))
            ok = all(_angle(c, o.center) > r + o.angular_radius + 20.0 for o in objs)
            if ok:
                break
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        objs.append(SceneObject(f"{color} {shape}", str(color), shape, c, r))
    return objs


def _angle(a: SphericalDir, b: SphericalDir) -> float:
    la, lb = math.radians(a.lat), math.radians(b.lat)
    c = math.sin(la) * math.sin(lb) + math.cos(la) * math.cos(lb) * math.cos(math.radians(a.lon - b.lon))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def _subtitle(rng: np.random.Generator, target: SceneObject, others: Sequence[SceneObject], distractor_p=DISTRACTOR_P) -> tuple[str, list[str]]:
    nd = int(rng.choice(3, p=distractor_p))
    nd = min(nd, len(others))
    picks = [others[i] for i in rng.permutation(len(others))[:nd]] if nd else []
    options = TEMPLATES[nd]
    text = options[int(rng.integers(len(options)))].format(t=target.name, **{f"d{i + 1}": o.name for i, o in enumerate(picks)})
    return text, [o.name for o in picks]


def video_scene(seed: int, index: int, frames: int, n_objects_range: tuple[int, int], W: int, H: int,
                distractor_p=DISTRACTOR_P, clutter: int = 0):
    """Per-frame object lists, background and subtitle picks for one video."""
    rng = np.random.default_rng([seed, index])
    lo, hi = n_objects_range
    n = int(rng.integers(lo, hi + 1))
    objects = _place_objects(rng, n)
    drift = rng.uniform(-1.5, 1.5, size=n)
    background = make_background(rng, W, H)
    if clutter:
        background = add_clutter(np.random.default_rng([seed, index, 1]), background, clutter)
    per_frame = []
    for t in range(frames):
        objs = [o.moved(drift[i] * t) for i, o in enumerate(objects)]
        ti = int(rng.integers(n))
        text, mentions = _subtitle(rng, objs[ti], [o for i, o in enumerate(objs) if i != ti], distractor_p)
        per_frame.append((objs, ti, text, mentions))
    return background, per_frame


def generate(
    out: str | os.PathLike,
    seed: int = 0,
    n_videos: int = 12,
    frames_per_video: int = 6,
    n_objects_range: tuple[int, int] = (2, 4),
    size: tuple[int, int] = (256, 512),
    distractor_p: Sequence[float] = DISTRACTOR_P,
    clutter: int = 0,
) -> Manifest:
    """Write a synthetic dataset to ``out`` and return its manifest."""
    lo, hi = n_objects_range
    if lo < 1 or hi < lo:
        raise ValueError(f"need at least one object per scene, got range {n_objects_range}")
    if hi > len(COLORS):
        raise ValueError(f"at most {len(COLORS)} objects per scene")
    if len(distractor_p) != 3 or not math.isclose(sum(distractor_p), 1.0, abs_tol=1e-9) or min(distractor_p) < 0:
        raise ValueError(f"distractor_p must be 3 probabilities summing to 1, got {distractor_p}")
    if clutter < 0:
        raise ValueError(f"clutter count must be >= 0, got {clutter}")
    if n_videos < 1 or frames_per_video < 1:
        raise ValueError("need at least one video and one frame")
    H, W = size
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    videos = []
    for vi in range(n_videos):
        vid = f"vid{vi:04d}"
        background, per_frame = video_scene(seed, vi, frames_per_video, (lo, hi), W, H, distractor_p, clutter)
        frames = []
        for t, (objs, ti, text, mentions) in enumerate(per_frame):
            img, labels = render(objs, background)
            rel = f"frames/{vid}/{t:04d}.png"
            save_png(root / rel, img)
            box = tight_box(labels == ti + 1)
            sub = Subtitle(text, [box], {"target": objs[ti].name, "distractors": mentions})
            frames.append(Frame(rel, [sub]))
        videos.append(Video(vid, frames))
    meta = {
        "generator": "panoground.synthdata",
        "seed": seed,
        "n_objects_range": [lo, hi],
        "distractor_p": [float(p) for p in distractor_p],
        "clutter": clutter,
        "fps": 1,
    }
    manifest = Manifest(root, W, H, videos, meta)
    manifest.save()
    return manifest
