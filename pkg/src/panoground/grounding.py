"""Visual grounding model: encoders, candidate attention, reconstruction loss."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import Tensor, init, ops
from .config import RunConfig
from .geometry import CandidateGrid, candidate_grid
from .glimpse import GlimpseSampler, extract_candidates, nfov_raster_size
from .text import GRUEncoder, LSTMDecoder


class VisualEncoder:
    """Strided 3x3 convolution stack, NHWC in, (n, ceil(H/2^L), ceil(W/2^L), d) out.

    On panoramas the width axis is padded cyclically so the encoder respects
    the longitude seam.
    """

    def __init__(self, channels, rng: np.random.Generator, in_ch: int = 3, activation: str = "relu",
                 out_activation: str = "none"):
        self.channels = tuple(channels)
        acts = {"relu": ops.relu, "tanh": ops.tanh, "none": None}
        self.act = acts[activation]
        self.out_act = acts[out_activation]
        self.params: dict[str, Tensor] = {}
        cin = in_ch
        for i, cout in enumerate(self.channels):
            self.params[f"conv{i}.w"] = init.uniform(rng, (3, 3, cin, cout), 9 * cin)
            self.params[f"conv{i}.b"] = init.uniform(rng, (cout,), 9 * cin)
            cin = cout

    def __call__(self, images, wrap: bool = True) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32) - 0.5)
        last = len(self.channels) - 1
        for i in range(len(self.channels)):
            x = ops.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride=2, pad=1, wrap_width=wrap)
            if i < last:
                x = self.act(x)
            elif self.out_act is not None:
                x = self.out_act(x)
        return x

    def pooled(self, rasters: np.ndarray) -> Tensor:
        """Encode a batch of perspective rasters to (N, d) by global mean pooling."""
        fmap = self(rasters, wrap=False)
        n, h, w, d = fmap.shape
        return ops.mean(ops.reshape(fmap, (n, h * w, d)), axis=1)

    def output_size(self, H: int, W: int) -> tuple[int, int]:
        for _ in self.channels:
            H, W = (H + 1) // 2, (W + 1) // 2
        return H, W


# -- attention and reconstruction ------------------------------------------

def attention_logits(cands: Tensor, lang: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Two-layer perceptron score per candidate: (n, N, d), (n, d_l) -> (n, N)."""
    n, N, _ = cands.shape
    lproj = ops.reshape(ops.matmul(lang, p["w_l"]), (n, 1, -1))
    hidden = ops.tanh(ops.matmul(cands, p["w_v"]) + lproj + p["b_1"])
    return ops.reshape(ops.matmul(hidden, p["w_a"]), (n, N)) + p["b_a"]


def attend(cands: Tensor, lang: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return ops.softmax(attention_logits(cands, lang, p), axis=-1)


def attended_feature(cands: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum of candidate features: (n, N, d), (n, N) -> (n, d)."""
    n, N, d = cands.shape
    return ops.reshape(ops.matmul(ops.reshape(weights, (n, 1, N)), cands), (n, d))


def recon_encode(v: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return ops.tanh(ops.matmul(v, p["w_r"]) + p["b_r"])


def grounding_loss(nll_rel: Tensor, nll_irr: Tensor, lam: float = 0.8, eps: float = 1e-6) -> Tensor:
    """Mean over items of ``lam * nll_rel - (1 - lam) * log(nll_irr + eps)``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")
    per_item = lam * nll_rel - (1.0 - lam) * ops.log(nll_irr + eps)
    return ops.mean(per_item)


def predict(alpha: np.ndarray) -> np.ndarray:
    """Index of the highest attention weight; ties go to the lowest index."""
    return np.asarray(alpha).argmax(axis=-1)


@dataclass
class GroundingOutput:
    alpha: Tensor
    alpha_hat: Tensor
    v_att: Tensor
    v_hat_att: Tensor
    v_rec: Tensor
    v_hat_rec: Tensor
    y: np.ndarray
    nll_rel: Tensor | None = None
    nll_irr: Tensor | None = None
    loss: Tensor | None = None


class GroundingModel:
    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.grid: CandidateGrid = candidate_grid(cfg.hfov, lons=cfg.lons(), lats=cfg.lats())
        channels = cfg.channels() + (cfg.d,)
        self.visual = VisualEncoder(channels, rng, activation=cfg.activation, out_activation=cfg.feature_act)
        dfeat = cfg.d * (cfg.glimpse_g ** 2 if cfg.glimpse_pool == "flatten" and cfg.visual_path == "feature" else 1)
        self.feat_dim = dfeat
        self.encoder = GRUEncoder(vocab_size, cfg.e, cfg.d_l, rng)
        self.att = {
            "w_v": init.uniform(rng, (dfeat, cfg.a), dfeat),
            "w_l": init.uniform(rng, (cfg.d_l, cfg.a), cfg.d_l),
            "b_1": init.uniform(rng, (cfg.a,), cfg.d_l),
            "w_a": init.uniform(rng, (cfg.a, 1), cfg.a),
            "b_a": init.uniform(rng, (1,), cfg.a),
        }
        self.rec = {
            "w_r": init.uniform(rng, (dfeat, cfg.d_dec), dfeat),
            "b_r": init.uniform(rng, (cfg.d_dec,), dfeat),
        }
        self.decoder = LSTMDecoder(vocab_size, cfg.d_dec, cfg.e, cfg.d_dec, rng, feed=cfg.dec_feed)
        self._samplers: dict[tuple[int, int], GlimpseSampler] = {}
        self._pixel_grids: dict[int, CandidateGrid] = {}

    # -- parameters -----------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, group in (
            ("visual", self.visual.params),
            ("encoder", self.encoder.params),
            ("att", self.att),
            ("rec", self.rec),
            ("decoder", self.decoder.params),
        ):
            for k, v in group.items():
                out[f"{prefix}.{k}"] = v
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match model {p.shape}")
            p.data = arr.astype(p.data.dtype).copy()
            p.zero_grad()

    # -- forward pieces -------------------------------------------------------
    def sampler(self, h: int, w: int) -> GlimpseSampler:
        key = (h, w)
        if key not in self._samplers:
            self._samplers[key] = GlimpseSampler(self.grid, h, w, self.cfg.glimpse_g, self.cfg.glimpse_pool)
        return self._samplers[key]

    def pixel_grid(self, W: int) -> CandidateGrid:
        if W not in self._pixel_grids:
            out_w, out_h = nfov_raster_size(W, self.cfg.hfov)
            self._pixel_grids[W] = candidate_grid(self.cfg.hfov, out_w, out_h, self.grid.lons, self.grid.lats)
        return self._pixel_grids[W]

    def feature_map(self, frames: np.ndarray) -> Tensor:
        return self.visual(frames, wrap=True)

    def candidate_features(self, frames: np.ndarray, path: str | None = None) -> Tensor:
        """(n, H, W, 3) frames -> (n, N, feat_dim) candidate features."""
        path = path or self.cfg.visual_path
        frames = np.asarray(frames, dtype=np.float32)
        if path == "feature":
            return self.candidates_from_feature_map(self.feature_map(frames))
        if path == "pixel":
            grid = self.pixel_grid(frames.shape[2])
            feats = [self.visual.pooled(extract_candidates(f, grid)) for f in frames]
            return ops.stack(feats, axis=0)
        raise ValueError(f"unknown visual path {path!r}")

    def candidates_from_feature_map(self, fmap) -> Tensor:
        """Glimpse candidates from an externally computed (n, h, w, d) feature map."""
        fmap = fmap if isinstance(fmap, Tensor) else Tensor(np.asarray(fmap, dtype=np.float32))
        if fmap.ndim != 4 or fmap.shape[3] != self.cfg.d:
            raise ValueError(f"feature map must be (n, h, w, {self.cfg.d}), got {fmap.shape}")
        return self.sampler(fmap.shape[1], fmap.shape[2])(fmap)

    def encode_text(self, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        return self.encoder(tokens, lengths)

    def forward(self, frames: np.ndarray, tokens: np.ndarray, lengths: np.ndarray, with_loss: bool = True) -> GroundingOutput:
        cands = self.candidate_features(frames)
        return self.forward_from_candidates(cands, tokens, lengths, with_loss)

    def forward_from_candidates(self, cands: Tensor, tokens: np.ndarray, lengths: np.ndarray, with_loss: bool = True) -> GroundingOutput:
        n = cands.shape[0]
        lang = self.encode_text(tokens, lengths)
        alpha = attend(cands, lang, self.att)
        alpha_hat = 1.0 - alpha
        v_att = attended_feature(cands, alpha)
        v_hat_att = attended_feature(cands, alpha_hat)
        v_rec = recon_encode(v_att, self.rec)
        v_hat_rec = recon_encode(v_hat_att, self.rec)
        out = GroundingOutput(alpha, alpha_hat, v_att, v_hat_att, v_rec, v_hat_rec, predict(alpha.data))
        if with_loss:
            # one decoder pass over both reconstructions
            feats = ops.concat([v_rec, v_hat_rec], axis=0)
            nll = self.decoder.nll(feats, np.concatenate([tokens, tokens]), np.concatenate([lengths, lengths]))
            out.nll_rel = nll[:n]
            out.nll_irr = nll[n:]
            out.loss = grounding_loss(out.nll_rel, out.nll_irr, self.cfg.lam, self.cfg.eps_log)
        return out


def load_feature_maps(path: str | os.PathLike) -> np.ndarray:
    """Read precomputed (n, h, w, d) feature maps saved with ``numpy.save``."""
    arr = np.load(path, allow_pickle=False)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"{path}: expected a float (n, h, w, d) array, got {arr.dtype} {arr.shape}")
    return arr.astype(np.float32, copy=False)
