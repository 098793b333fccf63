import numpy as np
import pytest

from panoground import synthdata
from panoground.config import RunConfig
from panoground.geometry import rotate_longitude
from panoground.grounding import GroundingModel
from panoground.text import build_vocab
from panoground.training import (
    TrainData,
    TrainingError,
    clip_batch,
    iter_log,
    list_checkpoints,
    load_model,
    sample_clips,
    train,
)

TINY = dict(d=8, d_l=8, d_dec=8, a=6, e=6, conv_channels="4,4,4", epochs=2, keep_checkpoints=5)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return synthdata.generate(root, seed=2, n_videos=5, frames_per_video=4, size=(32, 64))


def test_epoch_draws_one_clip_per_video(tiny_data, rng):
    data = TrainData(tiny_data, build_vocab(tiny_data.sentences()))
    clips = sample_clips(rng, data, 3, augment=True)
    assert sorted(c.video for c in clips) == list(range(5))
    assert all(0 <= c.start <= 1 and 0 <= c.shift < 64 for c in clips)
    assert all(c.shift == 0 for c in sample_clips(rng, data, 3, augment=False))


def test_clip_batch_rotates_frames(tiny_data, rng):
    data = TrainData(tiny_data, build_vocab(tiny_data.sentences()))
    clip = sample_clips(rng, data, 3, augment=True)[0]
    frames, tokens, lengths = clip_batch(data, [clip], 3)
    assert frames.shape == (3, 32, 64, 3) and frames.dtype == np.float32
    src = data.videos[clip.video].images[clip.start]
    np.testing.assert_array_equal(frames[0], rotate_longitude(src, clip.shift).astype(np.float32) / 255.0)
    assert tokens.shape == (3, 33) and (lengths >= 2).all()


def test_frames_without_subtitles_are_skipped(tiny_data):
    man = synthdata.load(tiny_data.root)
    man.videos[0].frames[1].subtitles = []
    data = TrainData(man, build_vocab(man.sentences()))
    assert len(data.videos[0].images) == 3
    for v in man.videos:
        for f in v.frames:
            f.subtitles = []
    with pytest.raises(TrainingError):
        TrainData(man, build_vocab(["x"]))


def test_empty_dataset_rejected(tiny_data, tmp_path):
    with pytest.raises(TrainingError):
        train(tiny_data.subset([]), RunConfig.from_dict(TINY), tmp_path)


def test_log_and_checkpoints(tiny_data, tmp_path):
    cfg = RunConfig.from_dict({**TINY, "epochs": 4, "keep_checkpoints": 2})
    hist = train(tiny_data, cfg, tmp_path)
    rows = list(iter_log(tmp_path / "train_log.jsonl"))
    assert [r["epoch"] for r in rows] == [1, 2, 3, 4]
    assert all(set(r) == {"epoch", "loss", "nll_rel", "nll_irr"} for r in rows)
    assert rows[-1]["loss"] == pytest.approx(hist[-1].loss)
    assert [p.name for p in list_checkpoints(tmp_path)] == ["epoch_0003.ckpt", "epoch_0004.ckpt"]
    assert RunConfig.parse((tmp_path / "config.txt").read_text(), env=False) == cfg
    model, vocab, meta = load_model(tmp_path)
    assert meta["epoch"] == 4 and isinstance(model, GroundingModel)
    assert vocab == build_vocab(tiny_data.sentences())


def test_resume_matches_uninterrupted_run(tiny_data, tmp_path):
    cfg = RunConfig.from_dict({**TINY, "epochs": 3})
    train(tiny_data, cfg, tmp_path / "full")
    train(tiny_data, cfg.replace(epochs=1), tmp_path / "part")
    train(tiny_data, cfg, tmp_path / "part", resume=tmp_path / "part")
    for name in ("epoch_0002.ckpt", "epoch_0003.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()
    full_log = (tmp_path / "full" / "train_log.jsonl").read_text()
    assert full_log == (tmp_path / "part" / "train_log.jsonl").read_text()


def test_same_seed_same_bytes_and_other_seed_differs(tiny_data, tmp_path):
    cfg = RunConfig.from_dict({**TINY, "epochs": 1})
    for name, c in (("a", cfg), ("b", cfg), ("c", cfg.replace(seed=1))):
        train(tiny_data, c, tmp_path / name)
    a, b, c = ((tmp_path / n / "epoch_0001.ckpt").read_bytes() for n in "abc")
    assert a == b and a != c


def test_non_finite_loss_aborts_with_context(tiny_data, tmp_path, monkeypatch):
    orig = GroundingModel.forward

    def poisoned(self, *args, **kw):
        out = orig(self, *args, **kw)
        out.loss = out.loss * float("nan")
        return out

    monkeypatch.setattr(GroundingModel, "forward", poisoned)
    with np.errstate(invalid="ignore"):
        with pytest.raises(TrainingError, match="epoch 1 step 0"):
            train(tiny_data, RunConfig.from_dict(TINY), tmp_path)


def test_relevant_nll_decreases_on_smoke_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    man = synthdata.generate(root, seed=0, n_videos=12, frames_per_video=6)
    hist = train(man, RunConfig(epochs=5), root / "ckpt")
    nll = [h.nll_rel for h in hist]
    assert all(b < a for a, b in zip(nll, nll[1:])), nll
