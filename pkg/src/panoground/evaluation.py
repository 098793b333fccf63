"""Pixel-level recall/precision, baselines, dataset evaluation and timing benches."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Sequence

import numpy as np

from .geometry import CandidateGrid, NFoVCamera, nfov_mask

if TYPE_CHECKING:
    from .grounding import GroundingModel
    from .synthdata import Manifest


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class GtBox:
    x: int
    y: int
    w: int
    h: int

    def validate(self, W: int, H: int) -> None:
        if not 0 <= self.x < W:
            raise ValueError(f"box x={self.x} outside [0, {W})")
        if not 0 < self.w <= W:
            raise ValueError(f"box w={self.w} outside (0, {W}]")
        if self.y < 0 or self.h < 1 or self.y + self.h > H:
            raise ValueError(f"box rows [{self.y}, {self.y + self.h}) outside [0, {H}]")

    def mask(self, W: int, H: int) -> np.ndarray:
        """Boolean (H, W) footprint, unrolling boxes that wrap past column W."""
        self.validate(W, H)
        m = np.zeros((H, W), dtype=bool)
        cols = (self.x + np.arange(self.w)) % W
        m[self.y:self.y + self.h, cols] = True
        return m

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class FrameEval:
    recall: float
    precision: float
    gt_pixels: int
    pred_pixels: int
    overlap_pixels: int


def union_mask(boxes: Sequence[GtBox], W: int, H: int) -> np.ndarray:
    if not boxes:
        raise EvalError("frame has no ground-truth boxes")
    m = np.zeros((H, W), dtype=bool)
    for b in boxes:
        m |= b.mask(W, H)
    return m


def overlap_eval(pred: np.ndarray, gt: np.ndarray) -> FrameEval:
    gt_n = int(gt.sum())
    if gt_n == 0:
        raise EvalError("ground-truth region has zero area")
    pred_n = int(pred.sum())
    ov = int(np.count_nonzero(pred & gt))
    return FrameEval(ov / gt_n, ov / pred_n if pred_n else 0.0, gt_n, pred_n, ov)


def frame_eval(pred: NFoVCamera, boxes: Sequence[GtBox], W: int, H: int) -> FrameEval:
    """Recall = |GT ∩ view| / |GT|, precision = |GT ∩ view| / |view|, in pixels."""
    return overlap_eval(nfov_mask(pred, W, H), union_mask(boxes, W, H))


class CandidateMasks:
    """Lazily computed frustum masks of every candidate at one image size."""

    def __init__(self, grid: CandidateGrid, W: int, H: int):
        self.grid, self.W, self.H = grid, W, H
        self._masks: dict[int, np.ndarray] = {}

    def __getitem__(self, i: int) -> np.ndarray:
        if i not in self._masks:
            self._masks[i] = nfov_mask(self.grid[i], self.W, self.H)
        return self._masks[i]

    def __len__(self) -> int:
        return len(self.grid)

    def evaluate(self, i: int, gt: np.ndarray) -> FrameEval:
        return overlap_eval(self[i], gt)


# -- baselines --------------------------------------------------------------

class RandomSelection:
    """Uniform random candidate per frame from a seeded stream."""

    def __init__(self, grid: CandidateGrid, seed: int = 0):
        self.n = len(grid)
        self.rng = np.random.default_rng(seed)

    def __call__(self) -> int:
        return int(self.rng.integers(self.n))

    def draws(self, count: int) -> np.ndarray:
        return self.rng.integers(self.n, size=count)


def baseline_rs(grid: CandidateGrid, seed: int = 0) -> RandomSelection:
    return RandomSelection(grid, seed)


def baseline_cs(grid: CandidateGrid) -> int:
    """The candidate looking at the panorama centre (lon 180, lat 0)."""
    return grid.index_of(180.0, 0.0)


def oracle(boxes: Sequence[GtBox], grid: CandidateGrid, W: int, H: int, masks: CandidateMasks | None = None) -> int:
    """Candidate with the highest recall; ties by higher precision, then lower index."""
    masks = masks or CandidateMasks(grid, W, H)
    gt = union_mask(boxes, W, H)
    best, best_key = 0, None
    for i in range(len(grid)):
        fe = masks.evaluate(i, gt)
        key = (fe.recall, fe.precision)
        if best_key is None or key > best_key:
            best, best_key = i, key
    return best


# -- dataset evaluation -----------------------------------------------------

@dataclass
class StrategyResult:
    avg_recall: float
    avg_precision: float
    per_video: dict[str, dict[str, float]]
    frames: int


@dataclass
class EvalReport:
    strategies: dict[str, StrategyResult]
    frames: int
    excluded_frames: int
    hfov: float
    model_id: str
    fps: float | None = None
    config: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "hfov": self.hfov,
            "fps": self.fps,
            "frames": self.frames,
            "excluded_frames": self.excluded_frames,
            "strategies": {k: asdict(v) for k, v in self.strategies.items()},
            "config": self.config,
            "notes": self.notes,
        }

    def write_json(self, path: str | os.PathLike | None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def write_csv(self, path: str | os.PathLike) -> None:
        cols = ["video", "frame", "subtitle", "strategy", "candidate", "recall", "precision", "gt_pixels", "pred_pixels", "overlap_pixels"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r[c] for c in cols})


def summarize(per_frame: dict[str, list[tuple[float, float]]]) -> StrategyResult:
    """Average frames within each video, then videos (unweighted)."""
    per_video = {}
    for vid in sorted(per_frame):
        vals = per_frame[vid]
        if not vals:
            continue
        per_video[vid] = {
            "avg_recall": float(np.mean([r for r, _ in vals])),
            "avg_precision": float(np.mean([p for _, p in vals])),
            "frames": len(vals),
        }
    if not per_video:
        return StrategyResult(0.0, 0.0, {}, 0)
    return StrategyResult(
        float(np.mean([v["avg_recall"] for v in per_video.values()])),
        float(np.mean([v["avg_precision"] for v in per_video.values()])),
        per_video,
        sum(v["frames"] for v in per_video.values()),
    )


Chooser = Callable[["EvalItem"], int]


@dataclass
class EvalItem:
    video: str
    frame: int
    subtitle: int
    text: str
    gt: np.ndarray
    image: Path
    boxes: list[GtBox]


def eval_items(manifest: "Manifest") -> tuple[list[EvalItem], int]:
    """Every (frame, subtitle) pair with ground truth, plus the count of frames without any."""
    items, excluded = [], 0
    W, H = manifest.width, manifest.height
    for v in manifest.videos:
        for fi, f in enumerate(v.frames):
            usable = [(si, s) for si, s in enumerate(f.subtitles) if s.boxes]
            if not usable:
                excluded += 1
                continue
            for si, s in usable:
                items.append(EvalItem(v.id, fi, si, s.text, union_mask(s.boxes, W, H), manifest.image_path(f), s.boxes))
    return items, excluded


def evaluate(
    manifest: "Manifest",
    grid: CandidateGrid,
    strategies: dict[str, Callable[[EvalItem], int]],
    model_id: str = "none",
    hfov: float | None = None,
) -> EvalReport:
    """Score each strategy's chosen candidate on every annotated frame."""
    W, H = manifest.width, manifest.height
    masks = CandidateMasks(grid, W, H)
    items, excluded = eval_items(manifest)
    scores: dict[str, dict[str, list[tuple[float, float]]]] = {k: {} for k in strategies}
    rows = []
    for item in items:
        for name, choose in strategies.items():
            idx = int(choose(item))
            fe = masks.evaluate(idx, item.gt)
            scores[name].setdefault(item.video, []).append((fe.recall, fe.precision))
            rows.append({
                "video": item.video, "frame": item.frame, "subtitle": item.subtitle, "strategy": name,
                "candidate": idx, "recall": fe.recall, "precision": fe.precision,
                "gt_pixels": fe.gt_pixels, "pred_pixels": fe.pred_pixels, "overlap_pixels": fe.overlap_pixels,
            })
    report = EvalReport(
        {k: summarize(v) for k, v in scores.items()},
        frames=len(items),
        excluded_frames=excluded,
        hfov=grid[0].hfov if hfov is None else hfov,
        model_id=model_id,
        notes={"oracle": "recall-max, ties by precision then lowest index", "cs": "panorama centre (lon 180, lat 0)"},
    )
    report.rows = rows
    return report


def standard_strategies(grid: CandidateGrid, W: int, H: int, seed: int = 0, which: Iterable[str] = ("RS", "CS", "Oracle")) -> dict[str, Callable[[EvalItem], int]]:
    masks = CandidateMasks(grid, W, H)
    out: dict[str, Callable[[EvalItem], int]] = {}
    for name in which:
        if name == "RS":
            rs = baseline_rs(grid, seed)
            out["RS"] = lambda item, rs=rs: rs()
        elif name == "CS":
            cs = baseline_cs(grid)
            out["CS"] = lambda item, cs=cs: cs
        elif name == "Oracle":
            out["Oracle"] = lambda item: oracle(item.boxes, grid, W, H, masks)
        else:
            raise EvalError(f"unknown baseline {name!r}")
    return out


def model_strategy(model: "GroundingModel", vocab, batch: int = 8) -> Callable[[EvalItem], int]:
    """Per-item model prediction (cached by image and text)."""
    from .autodiff import no_grad
    from .imageio import load_png
    from .text import encode_subtitle, stack_tokens

    cache: dict[tuple[str, str], int] = {}

    def choose(item: EvalItem) -> int:
        key = (str(item.image), item.text)
        if key not in cache:
            toks, lens = stack_tokens([encode_subtitle(item.text, vocab, model.cfg.m)])
            with no_grad():
                out = model.forward(load_png(item.image)[None], toks, lens, with_loss=False)
            cache[key] = int(out.y[0])
        return cache[key]

    return choose


def expected_rs_recall(manifest: "Manifest", grid: CandidateGrid) -> float:
    """Exact expectation of RS avg recall: every candidate weighted 1/N."""
    masks = CandidateMasks(grid, manifest.width, manifest.height)
    items, _ = eval_items(manifest)
    per_video: dict[str, list[float]] = {}
    for item in items:
        rec = np.mean([masks.evaluate(i, item.gt).recall for i in range(len(grid))])
        per_video.setdefault(item.video, []).append(float(rec))
    return float(np.mean([np.mean(v) for v in per_video.values()]))


# -- overlays ---------------------------------------------------------------

def overlay(image: np.ndarray, pred_mask: np.ndarray, boxes: Sequence[GtBox] = ()) -> np.ndarray:
    """Draw GT boxes (green) and the predicted view's outline (orange)."""
    img = np.array(image, dtype=np.float32, copy=True)
    H, W = pred_mask.shape
    edge = pred_mask & ~(
        np.roll(pred_mask, 1, 1) & np.roll(pred_mask, -1, 1)
        & np.vstack([pred_mask[:1], pred_mask[:-1]]) & np.vstack([pred_mask[1:], pred_mask[-1:]])
    )
    img[edge] = (1.0, 0.55, 0.0)
    for b in boxes:
        cols = (b.x + np.arange(b.w)) % W
        img[b.y, cols] = (0.0, 1.0, 0.0)
        img[b.y + b.h - 1, cols] = (0.0, 1.0, 0.0)
        img[b.y:b.y + b.h, b.x % W] = (0.0, 1.0, 0.0)
        img[b.y:b.y + b.h, (b.x + b.w - 1) % W] = (0.0, 1.0, 0.0)
    return img


# -- timing -----------------------------------------------------------------

SCALES = {"full": 1.0, "1/4": 0.5, "1/16": 0.25}


@dataclass
class BenchResult:
    mode: str
    scale: str
    width: int
    height: int
    frames: int
    seconds: float
    fps: float
    peak_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def bench(
    model: "GroundingModel",
    frames: Sequence[np.ndarray],
    tokens: np.ndarray,
    lengths: np.ndarray,
    mode: str = "feature",
    scale: str = "full",
    warmup: int = 1,
) -> BenchResult:
    """Inference frames/second on pre-loaded frames at one image scale.

    ``scale`` names an area ratio; sides are multiplied by its square root.
    Peak memory is the high-water mark of live tensor buffers.
    """
    from .autodiff import MemoryTracker, no_grad
    from .imageio import resize

    if scale not in SCALES:
        raise EvalError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}")
    f = SCALES[scale]
    H0, W0 = frames[0].shape[:2]
    W, H = max(1, int(round(W0 * f))), max(1, int(round(H0 * f)))
    imgs = [img if (W, H) == (W0, H0) else resize(img, W, H) for img in frames]
    tracker = MemoryTracker()

    def run(img: np.ndarray) -> None:
        with no_grad():
            cands = model.candidate_features(img[None], path=mode)
            model.forward_from_candidates(cands, tokens[:1], lengths[:1], with_loss=False)

    for img in imgs[:warmup]:
        run(img)
    t0 = time.perf_counter()
    with tracker.track():
        for img in imgs:
            run(img)
    dt = time.perf_counter() - t0
    return BenchResult(mode, scale, W, H, len(imgs), dt, len(imgs) / dt if dt > 0 else float("inf"), tracker.peak)
