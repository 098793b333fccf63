"""Full-model gradient check on a miniature configuration."""

from __future__ import annotations

import numpy as np

from .autodiff import GradCheckReport, Tensor, corrupt_adjoint, grad_check, ops
from .config import RunConfig
from .grounding import GroundingModel

# name -> (function of the input tensors, input shapes, positive inputs only)
PRIMITIVES = {
    "add": (lambda a, b: ops.add(a, b), [(3, 4), (4,)], False),
    "sub": (lambda a, b: ops.sub(a, b), [(3, 4), (3, 1)], False),
    "mul": (lambda a, b: ops.mul(a, b), [(2, 3, 4), (3, 4)], False),
    "div": (lambda a, b: ops.div(a, b), [(3, 4), (3, 4)], True),
    "neg": (lambda a: ops.neg(a), [(5,)], False),
    "matmul": (lambda a, b: ops.matmul(a, b), [(2, 3, 4), (4, 5)], False),
    "tanh": (lambda a: ops.tanh(a), [(3, 4)], False),
    "sigmoid": (lambda a: ops.sigmoid(a), [(3, 4)], False),
    "relu": (lambda a: ops.relu(a), [(3, 4)], False),
    "exp": (lambda a: ops.exp(a), [(3, 4)], False),
    "log": (lambda a: ops.log(a), [(3, 4)], True),
    "softmax": (lambda a: ops.softmax(a, axis=-1), [(3, 5)], False),
    "log_softmax": (lambda a: ops.log_softmax(a, axis=-1), [(3, 5)], False),
    "sum": (lambda a: ops.sum(a, axis=1), [(3, 4, 2)], False),
    "mean": (lambda a: ops.mean(a, axis=0), [(3, 4)], False),
    "reshape": (lambda a: ops.reshape(a, (4, 3)), [(3, 4)], False),
    "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    "index": (lambda a: ops.index(a, (np.array([0, 2, 2]), slice(1, 3))), [(3, 4)], False),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), [(2, 3), (2, 2)], False),
    "stack": (lambda a, b: ops.stack([a, b], axis=1), [(2, 3), (2, 3)], False),
    "embedding": (lambda t: ops.embedding(t, np.array([[1, 3, 1], [0, 2, 3]])), [(4, 3)], False),
    "gather_mix": (lambda x: ops.gather_mix(x, np.array([[0, 1, 5, 5], [2, 3, 4, 0]]), np.array([[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.5, 1.0]])), [(2, 6, 3)], False),
    "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1), [(2, 5, 6, 2), (3, 3, 2, 3), (3,)], False),
    "conv2d_wrap": (lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1, wrap_width=True), [(1, 4, 6, 2), (3, 3, 2, 3), (3,)], False),
}


def primitive_inputs(name: str, seed: int = 0) -> list[Tensor]:
    _, shapes, positive = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    out = []
    for shape in shapes:
        x = rng.uniform(0.5, 2.0, size=shape) if positive else rng.uniform(-1.0, 1.0, size=shape)
        if name == "relu":
            x = np.where(np.abs(x) < 0.1, 0.5, x)  # keep clear of the kink
        out.append(Tensor(x.astype(np.float64), requires_grad=True))
    return out


def primitive_gradcheck(name: str, seed: int = 0, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Check one op through a random linear read-out, so every output adjoint differs."""
    fn = PRIMITIVES[name][0]
    inputs = primitive_inputs(name, seed)
    probe = np.random.default_rng(seed + 1).normal(size=fn(*inputs).shape)

    def build():
        return ops.sum(fn(*inputs) * probe)

    return grad_check(build, {f"{name}[{i}]": t for i, t in enumerate(inputs)}, h=h, tol=tol)


MINI_VOCAB = 12
MINI_SIZE = (8, 16)


def miniature_config(**overrides) -> RunConfig:
    """8x16 panoramas, d=8, 12-word vocabulary, 4 candidates on the equator."""
    base = dict(
        d=8, d_l=6, d_dec=6, a=5, e=4,
        conv_channels="4",
        activation="tanh",
        grid_lons="0,90,180,270",
        grid_lats="0",
        glimpse_g=2,
        hfov=80.0,
        batch_size=2,
        k=1,
        m=6,
    )
    base.update(overrides)
    return RunConfig.from_dict(base)


def miniature_inputs(cfg: RunConfig, seed: int = 0, n: int = 2):
    rng = np.random.default_rng(seed)
    H, W = MINI_SIZE
    frames = rng.uniform(0.0, 1.0, size=(n, H, W, 3)).astype(np.float32)
    lengths = rng.integers(2, cfg.m + 1, size=n)
    tokens = np.zeros((n, cfg.m), dtype=np.int64)
    for i, L in enumerate(lengths):
        tokens[i, : L - 1] = rng.integers(4, MINI_VOCAB, size=L - 1)
        tokens[i, L - 1] = 2
    return frames, tokens, lengths


def model_gradcheck(
    cfg: RunConfig | None = None,
    seed: int = 0,
    h: float = 1e-4,
    tol: float = 1e-3,
    corrupt: str | None = None,
    max_entries: int | None = None,
    param_scale: float = 1.0,
) -> GradCheckReport:
    """Finite-difference check of the combined loss w.r.t. every model parameter.

    ``corrupt`` names an op whose adjoint is deliberately scaled, as a
    negative control; the check is then expected to fail.
    """
    cfg = cfg or miniature_config()
    model = GroundingModel(cfg, MINI_VOCAB, np.random.default_rng(seed))
    # At the default init the attention is nearly uniform and the language
    # path's gradients sit near 1e-9, below what a difference quotient can
    # resolve. Wider parameter draws give every tensor a measurable gradient.
    rng = np.random.default_rng([seed, 1])
    for p in model.parameters().values():
        p.data = rng.uniform(-param_scale, param_scale, size=p.shape).astype(p.data.dtype)
    frames, tokens, lengths = miniature_inputs(cfg, seed)

    def build():
        if corrupt is None:
            return model.forward(frames, tokens, lengths).loss
        with corrupt_adjoint(corrupt, 1.05):
            return model.forward(frames, tokens, lengths).loss

    return grad_check(build, model.parameters(), h=h, tol=tol, max_entries=max_entries, seed=seed)
