import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panoground import synthdata
from panoground.autodiff import Tensor, backward, no_grad, ops
from panoground.checks import model_gradcheck
from panoground.config import RunConfig
from panoground.evaluation import CandidateMasks
from panoground.geometry import rotate_longitude
from panoground.grounding import (
    GroundingModel,
    attend,
    attended_feature,
    attention_logits,
    grounding_loss,
    load_feature_maps,
    predict,
    recon_encode,
)
from panoground.text import build_vocab, encode_subtitle, stack_tokens

from .helpers import fd_grad, rel_err

SMALL = dict(d=8, d_l=6, d_dec=6, a=5, e=4, conv_channels="4,4,4")


def att_params(rng, d=3, dl=2, a=4):
    return {
        "w_v": Tensor(rng.normal(size=(d, a))),
        "w_l": Tensor(rng.normal(size=(dl, a))),
        "b_1": Tensor(rng.normal(size=a)),
        "w_a": Tensor(rng.normal(size=(a, 1))),
        "b_a": Tensor(rng.normal(size=1)),
    }


def tokens_for(n, m=33):
    toks = np.zeros((n, m), dtype=np.int64)
    toks[:, 0] = 4
    toks[:, 1] = 5
    toks[:, 2] = 2
    return toks, np.full(n, 3)


# -- attention ------------------------------------------------------------------

def test_identical_candidates_give_uniform_attention(rng):
    p = att_params(rng)
    cands = Tensor(np.tile(rng.normal(size=3), (1, 60, 1)))
    alpha = attend(cands, Tensor(rng.normal(size=(1, 2))), p).data
    np.testing.assert_allclose(alpha, 1 / 60, rtol=1e-12)


def test_zero_parameters_give_uniform_attention(rng):
    p = {k: Tensor(np.zeros_like(v.data)) for k, v in att_params(rng).items()}
    p["b_a"] = Tensor(np.array([2.5]))
    alpha = attend(Tensor(rng.normal(size=(2, 60, 3))), Tensor(rng.normal(size=(2, 2))), p).data
    np.testing.assert_allclose(alpha, 1 / 60, rtol=1e-12)


def test_two_candidate_hand_computation():
    p = {
        "w_v": Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])),
        "w_l": Tensor(np.array([[0.5, -0.5]])),
        "b_1": Tensor(np.array([0.1, 0.2])),
        "w_a": Tensor(np.array([[2.0], [-1.0]])),
        "b_a": Tensor(np.array([0.3])),
    }
    v = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    l = np.array([[2.0]])
    z1 = 2 * np.tanh(1 + 1 + 0.1) - np.tanh(0 - 1 + 0.2) + 0.3
    z2 = 2 * np.tanh(0 + 1 + 0.1) - np.tanh(1 - 1 + 0.2) + 0.3
    np.testing.assert_allclose(attention_logits(Tensor(v), Tensor(l), p).data[0], [z1, z2], rtol=1e-12)
    e = np.exp([z1, z2])
    np.testing.assert_allclose(attend(Tensor(v), Tensor(l), p).data[0], e / e.sum(), rtol=1e-12)


def test_bias_shift_changes_nothing(rng):
    p = att_params(rng)
    cands, lang = Tensor(rng.normal(size=(3, 60, 3))), Tensor(rng.normal(size=(3, 2)))
    a = attend(cands, lang, p).data
    p["b_a"] = Tensor(p["b_a"].data + 17.0)
    b = attend(cands, lang, p).data
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_array_equal(predict(a), predict(b))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16))
def test_prediction_invariant_to_monotone_transform(seed):
    z = np.random.default_rng(seed).normal(size=(4, 60))
    y = predict(ops.softmax(Tensor(z)).data)
    np.testing.assert_array_equal(y, predict(np.exp(3 * z) + 1))
    np.testing.assert_array_equal(y, z.argmax(axis=1))


def test_ties_go_to_lowest_index():
    alpha = np.full(60, 1 / 60)
    assert predict(alpha) == 0
    alpha = np.zeros(60)
    alpha[[7, 3, 41]] = 1 / 3
    assert predict(alpha) == 3


# -- attended features and reconstruction ----------------------------------------

def test_one_hot_and_uniform_weights(rng):
    cands = rng.normal(size=(1, 5, 3))
    w = np.zeros((1, 5))
    w[0, 2] = 1
    np.testing.assert_array_equal(attended_feature(Tensor(cands), Tensor(w)).data, cands[:, 2])
    u = np.full((1, 5), 0.2)
    np.testing.assert_allclose(attended_feature(Tensor(cands), Tensor(u)).data, cands.mean(axis=1), rtol=1e-12)


def test_reverse_weights_swap_two_candidates(rng):
    cands = Tensor(rng.normal(size=(1, 2, 4)))
    alpha = np.array([[0.3, 0.7]])
    fwd = attended_feature(cands, Tensor(alpha)).data
    rev = attended_feature(cands, Tensor(1.0 - alpha)).data
    np.testing.assert_allclose(rev, attended_feature(cands, Tensor(alpha[:, ::-1])).data, rtol=1e-12)
    assert not np.allclose(fwd, rev)


def test_recon_zero_and_bounded(rng):
    p = {"w_r": Tensor(rng.normal(size=(3, 4)) * 50), "b_r": Tensor(np.zeros(4))}
    np.testing.assert_array_equal(recon_encode(Tensor(np.zeros((1, 3))), p).data, 0)
    out = recon_encode(Tensor(rng.normal(size=(10, 3))), p).data
    assert (np.abs(out) <= 1).all()


def test_recon_gradient_check(rng):
    p = {"w_r": Tensor(rng.normal(size=(3, 4)), requires_grad=True), "b_r": Tensor(rng.normal(size=4), requires_grad=True)}
    v = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    probe = rng.normal(size=(2, 4))
    backward(ops.sum(recon_encode(v, p) * probe))
    for t in (v, p["w_r"], p["b_r"]):
        numeric = fd_grad(lambda: float((recon_encode(Tensor(v.data), p).data * probe).sum()), t.data)
        assert rel_err(t.grad, numeric) < 1e-4


# -- loss -----------------------------------------------------------------------------

def test_loss_arithmetic():
    loss = grounding_loss(Tensor(np.array([1.0])), Tensor(np.array([1.0])), 0.8, 1e-6)
    assert float(loss.data) == pytest.approx(0.8 - 0.2 * np.log(1 + 1e-6), rel=1e-12)
    assert float(loss.data) == pytest.approx(0.8, abs=1e-6)


def test_lambda_one_is_relevant_loss_only():
    rel = Tensor(np.array([0.5, 1.5]))
    loss = grounding_loss(rel, Tensor(np.array([3.0, 0.1])), 1.0)
    assert float(loss.data) == pytest.approx(1.0)


def test_loss_decreases_in_irrelevant_nll_with_shrinking_slope():
    rel = Tensor(np.array([1.0]))
    xs = np.array([0.5, 1.0, 2.0, 4.0, 8.0])
    ls = [float(grounding_loss(rel, Tensor(np.array([x])), 0.8).data) for x in xs]
    assert all(b < a for a, b in zip(ls, ls[1:]))
    for x in xs:
        t = Tensor(np.array([x]), requires_grad=True)
        backward(grounding_loss(rel, t, 0.8))
        assert t.grad[0] == pytest.approx(-0.2 / (x + 1e-6), rel=1e-12)


def test_lambda_outside_range_rejected():
    with pytest.raises(ValueError):
        grounding_loss(Tensor(np.ones(1)), Tensor(np.ones(1)), 1.5)


# -- full model -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_model():
    return GroundingModel(RunConfig.from_dict(SMALL), vocab_size=10)


def test_forward_output_invariants(small_model, rng):
    frames = rng.uniform(size=(2, 96, 192, 3)).astype(np.float32)
    toks, lens = tokens_for(2)
    out = small_model.forward(frames, toks, lens)
    a, ah = out.alpha.data, out.alpha_hat.data
    assert a.shape == (2, 60)
    np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-6)
    assert (a >= 0).all()
    np.testing.assert_array_equal(ah, 1 - a)
    np.testing.assert_allclose(ah.sum(axis=1), 59, atol=1e-5)
    np.testing.assert_array_equal(out.y, a.argmax(axis=1))
    assert (out.nll_rel.data >= 0).all() and np.isfinite(float(out.loss.data))


def test_forward_is_deterministic(rng):
    frames = rng.uniform(size=(1, 96, 192, 3)).astype(np.float32)
    toks, lens = tokens_for(1)
    cfg = RunConfig.from_dict(SMALL)
    a = GroundingModel(cfg, 10).forward(frames, toks, lens)
    b = GroundingModel(cfg, 10).forward(frames, toks, lens)
    np.testing.assert_array_equal(a.alpha.data, b.alpha.data)
    assert float(a.loss.data) == float(b.loss.data)


@pytest.mark.parametrize("steps", [1, 5])
def test_rotation_shifts_prediction(small_model, rng, steps):
    W = 192
    frames = rng.uniform(size=(3, 96, W, 3)).astype(np.float32)
    rotated = np.stack([rotate_longitude(f, steps * W // 12) for f in frames])
    toks, lens = tokens_for(3)
    with no_grad():
        base = small_model.forward(frames, toks, lens, with_loss=False)
        rot = small_model.forward(rotated, toks, lens, with_loss=False)
    grid = small_model.grid
    perm = [grid.shift_index(i, steps) for i in range(60)]
    np.testing.assert_allclose(rot.alpha.data, base.alpha.data[:, perm], rtol=1e-6, atol=1e-9)
    for y0, y1 in zip(base.y, rot.y):
        assert grid.shift_index(int(y0), -steps) == int(y1)


def test_lambda_one_zeroes_reverse_path_gradient(rng):
    model = GroundingModel(RunConfig.from_dict({**SMALL, "lam": 1.0}), vocab_size=10)
    frames = rng.uniform(size=(2, 32, 64, 3)).astype(np.float32)
    toks, lens = tokens_for(2)
    params = model.parameters()
    backward(model.forward(frames, toks, lens).loss)
    full = {k: p.grad.copy() for k, p in params.items()}
    for p in params.values():
        p.zero_grad()
    backward(ops.mean(model.forward(frames, toks, lens).nll_rel))
    for k, p in params.items():
        np.testing.assert_allclose(full[k], p.grad, rtol=1e-6, atol=1e-12, err_msg=k)


def test_miniature_model_gradient_check():
    report = model_gradcheck(seed=0)
    assert report.passed, report.lines()
    assert report.worst < 1e-3


def test_precomputed_feature_maps(small_model, tmp_path, rng):
    fmap = rng.normal(size=(2, 6, 12, 8)).astype(np.float32)
    np.save(tmp_path / "f.npy", fmap)
    loaded = load_feature_maps(tmp_path / "f.npy")
    cands = small_model.candidates_from_feature_map(loaded)
    assert cands.shape == (2, 60, 8)
    np.testing.assert_array_equal(cands.data, small_model.sampler(6, 12)(Tensor(fmap)).data)
    with pytest.raises(ValueError):
        small_model.candidates_from_feature_map(fmap[..., :5])
    np.save(tmp_path / "bad.npy", np.zeros((2, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        load_feature_maps(tmp_path / "bad.npy")


def test_untrained_model_does_not_ground():
    # An untrained model's pick depends on image content (argmax favours
    # high-contrast views) but not on which object the subtitle names, so the
    # named object and an unnamed one in the same frame are hit equally often.
    W, H = 128, 64
    frames, texts, gt_named, gt_other = [], [], [], []
    rng = np.random.default_rng(0)
    for i in range(240):
        background, per_frame = synthdata.video_scene(5, i, 1, (2, 4), W, H)
        objs, ti, text, _ = per_frame[0]
        img, labels = synthdata.render(objs, background)
        other = rng.choice([j for j in range(len(objs)) if j != ti])
        frames.append(img)
        texts.append(text)
        gt_named.append(synthdata.tight_box(labels == ti + 1).mask(W, H))
        gt_other.append(synthdata.tight_box(labels == other + 1).mask(W, H))
    vocab = build_vocab(texts)
    model = GroundingModel(RunConfig(), len(vocab))
    masks = CandidateMasks(model.grid, W, H)
    named, unnamed = [], []
    for img, text, g1, g2 in zip(frames, texts, gt_named, gt_other):
        toks, lens = stack_tokens([encode_subtitle(text, vocab)])
        with no_grad():
            y = int(model.forward(img[None], toks, lens, with_loss=False).y[0])
        named.append(masks.evaluate(y, g1).recall)
        unnamed.append(masks.evaluate(y, g2).recall)
    assert abs(np.mean(named) - np.mean(unnamed)) < 0.03
