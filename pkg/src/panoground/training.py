"""Clip sampling, rotation augmentation, the optimisation loop and checkpoints."""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import Adam, NumericFault, backward, load_checkpoint, save_checkpoint
from .config import RunConfig
from .geometry import rotate_longitude
from .grounding import GroundingModel
from .imageio import load_png_u8
from .synthdata import Manifest
from .text import TokenSeq, Vocabulary, build_vocab, encode_subtitle, stack_tokens

CKPT_NAME = re.compile(r"epoch_(\d{4,})\.ckpt$")
LOG_NAME = "train_log.jsonl"


class TrainingError(RuntimeError):
    pass


@dataclass
class VideoFrames:
    id: str
    images: list[np.ndarray]  # uint8 (H, W, 3)
    tokens: list[TokenSeq]


class TrainData:
    """Subtitled frames of every video, decoded once and kept as uint8."""

    def __init__(self, manifest: Manifest, vocab: Vocabulary, m: int = 33):
        self.width, self.height = manifest.width, manifest.height
        self.videos: list[VideoFrames] = []
        for v in manifest.videos:
            imgs, toks = [], []
            for f in v.frames:
                if not f.subtitles:
                    continue  # nothing to reconstruct
                imgs.append(load_png_u8(manifest.image_path(f)))
                toks.append(encode_subtitle(f.subtitles[0].text, vocab, m))
            if imgs:
                self.videos.append(VideoFrames(v.id, imgs, toks))
        if not self.videos:
            raise TrainingError("training set has no subtitled frames")

    def __len__(self) -> int:
        return len(self.videos)


@dataclass
class Clip:
    video: int
    start: int
    shift: int


def sample_clips(rng: np.random.Generator, data: TrainData, k: int, augment: bool) -> list[Clip]:
    """One clip per video, in shuffled order, for one epoch."""
    clips = []
    for vi in rng.permutation(len(data)):
        n = len(data.videos[vi].images)
        start = int(rng.integers(0, max(n - k, 0) + 1))
        shift = int(rng.integers(0, data.width)) if augment else 0
        clips.append(Clip(int(vi), start, shift))
    return clips


def clip_batch(data: TrainData, clips: Sequence[Clip], k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack the k frames of each clip (rotated by its shift) into one batch."""
    frames, seqs = [], []
    for c in clips:
        v = data.videos[c.video]
        for t in range(c.start, min(c.start + k, len(v.images))):
            img = v.images[t]
            if c.shift:
                img = rotate_longitude(img, c.shift)
            frames.append(img)
            seqs.append(v.tokens[t])
    tokens, lengths = stack_tokens(seqs)
    return np.stack(frames).astype(np.float32) / 255.0, tokens, lengths


def checkpoint_path(out_dir: str | os.PathLike, epoch: int) -> Path:
    return Path(out_dir) / f"epoch_{epoch:04d}.ckpt"


def list_checkpoints(out_dir: str | os.PathLike) -> list[Path]:
    found = []
    for p in Path(out_dir).glob("epoch_*.ckpt"):
        m = CKPT_NAME.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return [p for _, p in sorted(found)]


def latest_checkpoint(path: str | os.PathLike) -> Path:
    """A checkpoint file as given, or the newest one inside a directory."""
    path = Path(path)
    if path.is_dir():
        ckpts = list_checkpoints(path)
        if not ckpts:
            raise FileNotFoundError(f"no checkpoints in {path}")
        return ckpts[-1]
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def save_training_state(path: Path, model: GroundingModel, opt: Adam, vocab: Vocabulary, rng: np.random.Generator, epoch: int) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update(opt.state_tensors())
    meta = {
        "epoch": epoch,
        "adam_t": opt.t,
        "config": model.cfg.to_dict(),
        "vocab": vocab.id2word,
        "rng": rng.bit_generator.state,
    }
    save_checkpoint(path, tensors, meta)


def load_model(path: str | os.PathLike) -> tuple[GroundingModel, Vocabulary, dict]:
    """Rebuild a model (and its vocabulary) from a training checkpoint."""
    tensors, meta = load_checkpoint(latest_checkpoint(path))
    cfg = RunConfig.from_dict(meta["config"])
    vocab = Vocabulary(meta["vocab"][4:])
    model = GroundingModel(cfg, len(vocab))
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    return model, vocab, meta


@dataclass
class EpochStats:
    epoch: int
    loss: float
    nll_rel: float
    nll_irr: float

    def to_json(self) -> str:
        return json.dumps({"epoch": self.epoch, "loss": self.loss, "nll_rel": self.nll_rel, "nll_irr": self.nll_irr})


def train(
    manifest: Manifest,
    cfg: RunConfig,
    out_dir: str | os.PathLike,
    resume: str | os.PathLike | None = None,
    vocab: Vocabulary | None = None,
    log: Callable[[str], None] | None = None,
) -> list[EpochStats]:
    """Train for ``cfg.epochs`` epochs, writing a checkpoint and a log line per epoch.

    Each step draws ``batch_size`` clips of ``k`` consecutive subtitled frames.
    With augmentation on, every clip is rotated by its own random pixel shift.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not manifest.videos:
        raise TrainingError("training set has no videos")

    start_epoch = 1
    if resume is not None:
        tensors, meta = load_checkpoint(latest_checkpoint(resume))
        cfg = RunConfig.from_dict(meta["config"]).replace(epochs=cfg.epochs)
        vocab = Vocabulary(meta["vocab"][4:])
        model = GroundingModel(cfg, len(vocab))
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        opt = Adam(model.parameters(), cfg.lr)
        opt.load_state(meta["adam_t"], tensors)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        start_epoch = int(meta["epoch"]) + 1
    else:
        vocab = vocab or build_vocab(manifest.sentences(), cfg.min_count)
        model = GroundingModel(cfg, len(vocab))
        opt = Adam(model.parameters(), cfg.lr)
        rng = np.random.default_rng([cfg.seed, 1])

    data = TrainData(manifest, vocab, cfg.m)
    (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
    vocab.save(out / "vocab.json")
    log_path = out / LOG_NAME
    if resume is None and log_path.exists():
        log_path.unlink()

    history = []
    for epoch in range(start_epoch, cfg.epochs + 1):
        clips = sample_clips(rng, data, cfg.k, cfg.augment)
        sums = np.zeros(3)
        count = 0
        for step, b0 in enumerate(range(0, len(clips), cfg.batch_size)):
            batch = clips[b0:b0 + cfg.batch_size]
            frames, tokens, lengths = clip_batch(data, batch, cfg.k)
            try:
                res = model.forward(frames, tokens, lengths)
                if not math.isfinite(float(res.loss.data)):
                    raise NumericFault("loss")
                backward(res.loss)
            except NumericFault as exc:
                vids = [data.videos[c.video].id for c in batch]
                raise TrainingError(f"non-finite values at epoch {epoch} step {step} (videos {vids}): {exc}") from exc
            opt.step()
            n = len(lengths)
            sums += n * np.array([float(res.loss.data), float(res.nll_rel.data.mean()), float(res.nll_irr.data.mean())])
            count += n
        stats = EpochStats(epoch, *(float(x) for x in sums / count))
        history.append(stats)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(stats.to_json() + "\n")
        if log is not None:
            log(stats.to_json())
        save_training_state(checkpoint_path(out, epoch), model, opt, vocab, rng, epoch)
        for old in list_checkpoints(out)[: -cfg.keep_checkpoints] if cfg.keep_checkpoints > 0 else []:
            old.unlink()
    return history


def iter_log(path: str | os.PathLike) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
