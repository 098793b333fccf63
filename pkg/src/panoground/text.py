"""Subtitle vocabulary, tokenisation, GRU encoder and LSTM reconstruction decoder."""

from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, init, ops

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<start>", "<end>", "<unk>")
MAX_LEN = 33

_WORD = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        self.id2word = list(RESERVED) + [w for w in words if w not in RESERVED]
        self.word2id = {w: i for i, w in enumerate(self.id2word)}

    def __len__(self) -> int:
        return len(self.id2word)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id2word == other.id2word

    def __contains__(self, word: str) -> bool:
        return word in self.word2id

    def encode(self, word: str) -> int:
        return self.word2id.get(word, UNK)

    def decode(self, idx: int) -> str:
        return self.id2word[idx]

    def to_json(self) -> str:
        return json.dumps(self.word2id, ensure_ascii=False, indent=0)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_mapping(cls, word2id: dict[str, int]) -> "Vocabulary":
        ordered = sorted(word2id.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(ordered))):
            raise ValueError("vocabulary ids must be dense from 0")
        if tuple(w for w, _ in ordered[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        return cls([w for w, _ in ordered[4:]])

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        return cls.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Words seen at least ``min_count`` times, ordered by (count desc, word asc)."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for s in corpus for w in tokenize(s))
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return Vocabulary(kept)


@dataclass(frozen=True)
class TokenSeq:
    ids: np.ndarray  # (MAX_LEN,) int64, Pad-filled
    length: int  # content tokens + End

    def __post_init__(self):
        if self.ids.ndim != 1 or not 0 <= self.length <= len(self.ids):
            raise ValueError(f"bad token sequence: {len(self.ids)} ids, length {self.length}")


def encode_subtitle(text: str, vocab: Vocabulary, m: int = MAX_LEN) -> TokenSeq:
    words = tokenize(text)[: m - 1]
    ids = np.full(m, PAD, dtype=np.int64)
    ids[: len(words)] = [vocab.encode(w) for w in words]
    ids[len(words)] = END
    return TokenSeq(ids, len(words) + 1)


def decode_ids(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        if i == END:
            break
        if i not in (PAD, START):
            words.append(vocab.decode(int(i)))
    return " ".join(words)


def stack_tokens(seqs: Sequence[TokenSeq]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.ids for s in seqs]), np.array([s.length for s in seqs], dtype=np.int64)


class GRUEncoder:
    """Word embedding + GRU; the subtitle feature is the hidden state after the last real token.

    Gates follow Cho et al.: the reset gate scales the previous state before
    the candidate projection.
    """

    def __init__(self, vocab_size: int, embed: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.params = {
            "embed": init.uniform(rng, (vocab_size, embed), 1),
            "wx": init.uniform(rng, (embed, 3 * hidden), embed),
            "uzr": init.uniform(rng, (hidden, 2 * hidden), hidden),
            "un": init.uniform(rng, (hidden, hidden), hidden),
            "b": init.uniform(rng, (3 * hidden,), hidden),
        }

    def __call__(self, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        p = self.params
        B = tokens.shape[0]
        T = int(lengths.max())
        H = self.hidden
        x = ops.embedding(p["embed"], tokens[:, :T])
        xproj = ops.matmul(x, p["wx"]) + p["b"]  # (B, T, 3H)
        h = Tensor(np.zeros((B, H), dtype=x.dtype))
        for t in range(T):
            xt = xproj[:, t, :]
            hzr = ops.matmul(h, p["uzr"])
            z = ops.sigmoid(xt[:, :H] + hzr[:, :H])
            r = ops.sigmoid(xt[:, H:2 * H] + hzr[:, H:])
            n = ops.tanh(xt[:, 2 * H:] + ops.matmul(r * h, p["un"]))
            h_new = h + z * (n - h)
            live = (t < lengths).astype(x.dtype)[:, None]
            h = h_new if live.all() else h + live * (h_new - h)
        return h


class LSTMDecoder:
    """LSTM language decoder scoring a subtitle given a visual feature.

    With ``feed="input"`` step 0 consumes the projected feature; with
    ``feed="hidden"`` the feature (width must equal ``hidden``) is the initial
    hidden state instead. Either way steps 1..l are teacher-forced with
    [Start, s_1, ..., s_(l-1)] and predict [s_1, ..., s_l].
    """

    def __init__(self, vocab_size: int, feat: int, embed: int, hidden: int, rng: np.random.Generator,
                 feed: str = "input"):
        if feed not in ("input", "hidden"):
            raise ValueError(f"feed must be input or hidden, got {feed!r}")
        if feed == "hidden" and feat != hidden:
            raise ValueError(f"hidden feed needs feature width {feat} == hidden {hidden}")
        self.hidden = hidden
        self.vocab_size = vocab_size
        self.feed = feed
        self.params = {}
        if feed == "input":
            self.params["w_in"] = init.uniform(rng, (feat, embed), feat)
            self.params["b_in"] = init.uniform(rng, (embed,), feat)
        self.params.update({
            "embed": init.uniform(rng, (vocab_size, embed), 1),
            "wx": init.uniform(rng, (embed, 4 * hidden), embed),
            "wh": init.uniform(rng, (hidden, 4 * hidden), hidden),
            "b": init.uniform(rng, (4 * hidden,), hidden),
            "w_out": init.uniform(rng, (hidden, vocab_size), hidden),
            "b_out": init.uniform(rng, (vocab_size,), hidden),
        })

    def _step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        H = self.hidden
        gates = ops.matmul(x, p["wx"]) + ops.matmul(h, p["wh"]) + p["b"]
        i = ops.sigmoid(gates[:, :H])
        f = ops.sigmoid(gates[:, H:2 * H])
        g = ops.tanh(gates[:, 2 * H:3 * H])
        o = ops.sigmoid(gates[:, 3 * H:])
        c = f * c + i * g
        return o * ops.tanh(c), c

    def _init_state(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        c = Tensor(np.zeros((feat.shape[0], self.hidden), dtype=feat.dtype))
        if self.feed == "hidden":
            return feat, c
        return self._step(ops.matmul(feat, p["w_in"]) + p["b_in"], Tensor(np.zeros_like(c.data)), c)

    def token_logprobs(self, feat: Tensor, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Log-probability of each target token, (B, T) with T = max length."""
        p = self.params
        B = tokens.shape[0]
        T = int(lengths.max())
        prev = np.concatenate([np.full((B, 1), START, dtype=np.int64), tokens[:, : T - 1]], axis=1)
        emb = ops.embedding(p["embed"], prev)  # (B, T, e)
        h, c = self._init_state(feat)
        outs = []
        for t in range(T):
            h, c = self._step(emb[:, t, :], h, c)
            outs.append(h)
        hs = ops.stack(outs, axis=1)  # (B, T, H)
        logp = ops.log_softmax(ops.matmul(hs, p["w_out"]) + p["b_out"])
        return logp[np.arange(B)[:, None], np.arange(T)[None, :], tokens[:, :T]]

    def nll(self, feat: Tensor, tokens: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Per-sequence mean token negative log-likelihood, shape (B,)."""
        lengths = np.asarray(lengths)
        if (lengths < 1).any():
            raise ValueError("every sequence needs at least one target token")
        lp = self.token_logprobs(feat, tokens, lengths)
        T = lp.shape[1]
        mask = (np.arange(T)[None, :] < lengths[:, None]).astype(lp.dtype)
        return ops.neg(ops.sum(lp * mask, axis=1)) / lengths.astype(lp.dtype)

    def greedy_decode(self, feat: np.ndarray, max_len: int = MAX_LEN) -> list[list[int]]:
        from .autodiff import no_grad

        p = self.params
        with no_grad():
            feat = Tensor(np.atleast_2d(feat))
            B = feat.shape[0]
            h, c = self._init_state(feat)
            prev = np.full(B, START, dtype=np.int64)
            out: list[list[int]] = [[] for _ in range(B)]
            for _ in range(max_len):
                h, c = self._step(ops.embedding(p["embed"], prev), h, c)
                prev = (ops.matmul(h, p["w_out"]) + p["b_out"]).data.argmax(axis=1)
                for b in range(B):
                    out[b].append(int(prev[b]))
        return out


def lstm_decode_nll(v_rec: Tensor, tokens: TokenSeq, decoder: LSTMDecoder) -> Tensor:
    """Mean token NLL of one subtitle given one feature vector (scalar)."""
    if tokens.length < 1:
        raise ValueError("token sequence has no targets")
    feat = v_rec if isinstance(v_rec, Tensor) else Tensor(v_rec)
    if feat.ndim == 1:
        feat = ops.reshape(feat, (1, feat.shape[0]))
    out = decoder.nll(feat, tokens.ids[None, :], np.array([tokens.length]))
    return ops.reshape(out, ())


def gru_encode(tokens: TokenSeq, encoder: GRUEncoder) -> Tensor:
    out = encoder(tokens.ids[None, :], np.array([tokens.length]))
    return ops.reshape(out, (encoder.hidden,))
