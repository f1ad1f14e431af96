"""Token encoder: trainable embeddings feeding a bidirectional gated recurrent net.

The recurrent cell is a GRU: update gate z, reset gate r, and a tanh
candidate n with the reset gate applied to the recurrent contribution,

    z_t = sigmoid(x_t Wx[z] + h_{t-1} Wh[z] + b[z])
    r_t = sigmoid(x_t Wx[r] + h_{t-1} Wh[r] + b[r])
    n_t = tanh(x_t Wx[n] + r_t * (h_{t-1} Wh[n]) + b[n])
    h_t = (1 - z_t) * n_t + z_t * h_{t-1}

Each direction of each layer is one tape node with a hand-written
backward-through-time adjoint, which keeps the tape short for long sentences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError, VocabError
from .tensor import Tensor, _emit, _sigmoid_values, concat, dropout, gather_rows

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocab:
    """Token-to-id map; ids 0 and 1 are reserved for padding and unknown."""

    def __init__(self, tokens: list[str]):
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            tokens = [PAD_TOKEN, UNK_TOKEN] + [t for t in tokens if t not in (PAD_TOKEN, UNK_TOKEN)]
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @classmethod
    def from_corpus(cls, examples) -> "Vocab":
        seen = sorted({tok for ex in examples for tok in ex.tokens})
        return cls([PAD_TOKEN, UNK_TOKEN] + seen)

    def ids(self, tokens: list[str]) -> np.ndarray:
        unk = self.index[UNK_TOKEN]
        return np.asarray([self.index.get(t, unk) for t in tokens], dtype=np.int64)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        try:
            with open(path, encoding="utf-8") as fh:
                tokens = [line.rstrip("\n") for line in fh]
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        if len(tokens) < 2:
            raise DataError(f"vocabulary file {path} must reserve two lines for padding and unknown")
        return cls(tokens)


@dataclass
class GruDirection:
    """One direction of one GRU layer; gate blocks are ordered (z, r, n)."""

    wx: Tensor  # (d_in, 3H)
    wh: Tensor  # (H, 3H)
    bias: Tensor  # (3H,)


@dataclass
class EncoderParams:
    embedding: Tensor  # (|V|, d_emb)
    layers: list[tuple[GruDirection, GruDirection]]  # (forward, backward) per layer
    dropout: float = 0.0

    @property
    def hidden(self) -> int:
        return self.layers[0][0].wh.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden

    def parameters(self) -> list[Tensor]:
        out = [self.embedding]
        for fwd, bwd in self.layers:
            for d in (fwd, bwd):
                out.extend([d.wx, d.wh, d.bias])
        return out


def init_encoder(
    vocab_size: int,
    emb_dim: int,
    hidden: int,
    layers: int,
    rng: np.random.Generator,
    dropout_rate: float = 0.0,
) -> EncoderParams:
    if layers < 1:
        raise ShapeError("encoder needs at least one recurrent layer")
    if not 0.0 <= dropout_rate < 1.0:
        raise ShapeError(f"dropout must lie in [0, 1), got {dropout_rate}")
    emb = Tensor(rng.normal(0.0, 0.1, (vocab_size, emb_dim)), requires_grad=True, name="encoder.embedding")

    def direction(d_in: int, tag: str) -> GruDirection:
        sx = np.sqrt(2.0 / (d_in + hidden))
        sh = np.sqrt(1.0 / hidden)
        return GruDirection(
            wx=Tensor(rng.normal(0.0, sx, (d_in, 3 * hidden)), requires_grad=True, name=f"{tag}.wx"),
            wh=Tensor(rng.normal(0.0, sh, (hidden, 3 * hidden)), requires_grad=True, name=f"{tag}.wh"),
            bias=Tensor(np.zeros(3 * hidden), requires_grad=True, name=f"{tag}.bias"),
        )

    stack = []
    d_in = emb_dim
    for k in range(layers):
        stack.append((direction(d_in, f"encoder.l{k}.fwd"), direction(d_in, f"encoder.l{k}.bwd")))
        d_in = 2 * hidden
    return EncoderParams(emb, stack, dropout_rate)


def gru_sequence(x: Tensor, d: GruDirection, reverse: bool = False) -> Tensor:
    """Run one GRU direction over all timesteps; output rows align with input rows."""
    X = x.data
    if X.ndim != 2:
        raise ShapeError(f"gru_sequence expects (steps, features), got rank {X.ndim}")
    n_steps = X.shape[0]
    hidden = d.wh.shape[0]
    if X.shape[1] != d.wx.shape[0]:
        raise ShapeError(f"input features {X.shape[1]} do not match wx rows {d.wx.shape[0]}")
    wx, wh, bias = d.wx.data, d.wh.data, d.bias.data
    pre = X @ wx + bias  # (n, 3H)
    order = range(n_steps - 1, -1, -1) if reverse else range(n_steps)
    out = np.zeros((n_steps, hidden), dtype=X.dtype)
    trace = []
    h = np.zeros(hidden, dtype=X.dtype)
    for t in order:
        ah = h @ wh
        z = _sigmoid_values(pre[t, :hidden] + ah[:hidden])
        r = _sigmoid_values(pre[t, hidden : 2 * hidden] + ah[hidden : 2 * hidden])
        ahn = ah[2 * hidden :]
        n = np.tanh(pre[t, 2 * hidden :] + r * ahn)
        h_new = (1.0 - z) * n + z * h
        trace.append((t, h, z, r, n, ahn))
        out[t] = h_new
        h = h_new

    def vjp(g):
        dpre = np.zeros_like(pre)
        dwh = np.zeros_like(wh)
        dh = np.zeros(hidden, dtype=X.dtype)
        for t, h_prev, z, r, n, ahn in reversed(trace):
            dht = g[t] + dh
            dz = dht * (h_prev - n)
            dn = dht * (1.0 - z)
            dh = dht * z
            dan = dn * (1.0 - n * n)
            dr = dan * ahn
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dpre[t, :hidden] = daz
            dpre[t, hidden : 2 * hidden] = dar
            dpre[t, 2 * hidden :] = dan
            dah = np.concatenate([daz, dar, dan * r])
            dh = dh + dah @ wh.T
            dwh += np.outer(h_prev, dah)
        dx = dpre @ wx.T
        dwx = X.T @ dpre
        db = dpre.sum(axis=0)
        return dx, dwx, dwh, db

    return _emit("gru_sequence", out, (x, d.wx, d.wh, d.bias), vjp)


def encode(
    params: EncoderParams,
    ids,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Token representations (n, 2 * hidden) for one sentence of token ids.

    Bidirectional: every output row depends on the whole sentence.  With
    dropout active, results are deterministic given `rng`.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError("encode expects a non-empty 1-d id sequence")
    vocab_size = params.embedding.shape[0]
    if ids.min() < 0 or ids.max() >= vocab_size:
        bad = int(ids[(ids < 0) | (ids >= vocab_size)][0])
        raise VocabError(f"token id {bad} outside vocabulary of size {vocab_size}")
    use_dropout = train_mode and params.dropout > 0
    if use_dropout and rng is None:
        raise ShapeError("training-mode encode with dropout needs an rng")
    h = gather_rows(params.embedding, ids)
    if use_dropout:
        h = dropout(h, params.dropout, rng)
    for k, (fwd, bwd) in enumerate(params.layers):
        left = gru_sequence(h, fwd)
        right = gru_sequence(h, bwd, reverse=True)
        h = concat([left, right], axis=1)
        if use_dropout and k + 1 < len(params.layers):
            h = dropout(h, params.dropout, rng)
    return h
