"""Caption and image encoders built on :mod:`vgse.tensor`.

Caption path: character embeddings -> bidirectional GRU/LSTM -> attention or
max pooling -> unit L2 norm. Image path: affine projection -> unit L2 norm.
Both land in a ``2 * hidden_size`` dimensional joint space.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import PAD, Batch
from .errors import ConfigError, DimensionError
from .tensor import Tensor

RNN_KINDS = ("gru", "lstm")
POOLINGS = ("attention", "max")


@dataclass(frozen=True)
class EncoderConfig:
    char_vocab_size: int
    char_embed_dim: int = 20
    hidden_size: int = 64
    rnn_kind: str = "gru"
    pooling: str = "attention"
    attention_hidden: int = 128
    image_feature_dim: int = 2048

    def __post_init__(self):
        for name in ("char_vocab_size", "char_embed_dim", "hidden_size", "attention_hidden", "image_feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.rnn_kind not in RNN_KINDS:
            raise ConfigError(f"rnn_kind must be one of {RNN_KINDS}, got {self.rnn_kind!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    @property
    def embed_dim(self) -> int:
        return 2 * self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class EncoderParams:
    """Named parameter tensors, iterated in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()}
        )

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "EncoderParams":
        return cls({k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, name=k) for k, v in arrays.items()})


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    n, d, e = config.hidden_size, config.char_embed_dim, config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {"char_embedding": (config.char_vocab_size, d)}
    for side in ("fwd", "bwd"):
        if config.rnn_kind == "gru":
            shapes[f"rnn_{side}.W"] = (3 * n, d)
            shapes[f"rnn_{side}.U_zr"] = (2 * n, n)
            shapes[f"rnn_{side}.U_h"] = (n, n)
            shapes[f"rnn_{side}.b"] = (3 * n,)
        else:
            shapes[f"rnn_{side}.W"] = (4 * n, d)
            shapes[f"rnn_{side}.U"] = (4 * n, n)
            shapes[f"rnn_{side}.b"] = (4 * n,)
    if config.pooling == "attention":
        shapes["attn.W"] = (config.attention_hidden, e)
        shapes["attn.b_w"] = (config.attention_hidden,)
        shapes["attn.V"] = (e, config.attention_hidden)
        shapes["attn.b_v"] = (e,)
    shapes["image.A"] = (e, config.image_feature_dim)
    shapes["image.b"] = (e,)
    return shapes


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Glorot-uniform matrices, zero biases, U(-0.1, 0.1) character embeddings.

    LSTM forget-gate biases start at 1.0.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(config).items():
        if name == "char_embedding":
            arr = rng.uniform(-0.1, 0.1, size=shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
            if config.rnn_kind == "lstm" and name.endswith(".b") and name.startswith("rnn_"):
                n = config.hidden_size
                arr[n : 2 * n] = 1.0
        else:
            s = np.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-s, s, size=shape)
        out[name] = Tensor(arr, requires_grad=True, name=name)
    return EncoderParams(out)


def check_params(params: EncoderParams, config: EncoderConfig) -> None:
    expected = param_shapes(config)
    if set(expected) != set(params.tensors):
        raise DimensionError(f"parameter names {sorted(params.tensors)} do not match config {sorted(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise DimensionError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def _cell(params: EncoderParams, side: str, kind: str) -> tuple[Tensor, ...]:
    if kind == "gru":
        return tuple(params[f"rnn_{side}.{k}"] for k in ("W", "U_zr", "U_h", "b"))
    return tuple(params[f"rnn_{side}.{k}"] for k in ("W", "U", "b"))


def rnn_cell_step(kind: str, x: Tensor, state, cell: tuple[Tensor, ...]):
    """One recurrent step on a (B, d_in) input.

    GRU state is ``h``; LSTM state is ``(h, c)``. GRU::

        z = sigmoid(W_z x + U_z h + b_z);  r = sigmoid(W_r x + U_r h + b_r)
        h~ = tanh(W_h x + U_h (r * h) + b_h);  h' = (1 - z) * h + z * h~

    LSTM gate order in the stacked weights is i, f, g, o.
    """
    if kind == "gru":
        W, U_zr, U_h, b = cell
        n = U_h.shape[0]
        if x.ndim != 2 or x.shape[1] != W.shape[1] or state.shape != (x.shape[0], n):
            raise DimensionError(f"gru step: input {x.shape}, state {state.shape}, W {W.shape}")
        h = state
        gx = T.linear(x, W, b)
        zr = T.sigmoid(T.add(T.slice_last(gx, 0, 2 * n), T.linear(h, U_zr)))
        z = T.slice_last(zr, 0, n)
        r = T.slice_last(zr, n, 2 * n)
        cand = T.tanh(T.add(T.slice_last(gx, 2 * n, 3 * n), T.linear(T.mul(r, h), U_h)))
        return T.add(h, T.mul(z, T.sub(cand, h)))
    if kind == "lstm":
        W, U, b = cell
        n = U.shape[1]
        h, c = state
        if x.ndim != 2 or x.shape[1] != W.shape[1] or h.shape != (x.shape[0], n) or c.shape != h.shape:
            raise DimensionError(f"lstm step: input {x.shape}, state {h.shape}/{c.shape}, W {W.shape}")
        gates = T.add(T.linear(x, W, b), T.linear(h, U))
        i = T.sigmoid(T.slice_last(gates, 0, n))
        f = T.sigmoid(T.slice_last(gates, n, 2 * n))
        g = T.tanh(T.slice_last(gates, 2 * n, 3 * n))
        o = T.sigmoid(T.slice_last(gates, 3 * n, 4 * n))
        c_new = T.add(T.mul(f, c), T.mul(i, g))
        return T.mul(o, T.tanh(c_new)), c_new
    raise ValueError(f"unknown rnn kind {kind!r}")


def _run_direction(ids: np.ndarray, table: Tensor, cell, kind: str, n: int) -> Tensor:
    B, steps = ids.shape
    h = Tensor(np.zeros((B, n)))
    state = h if kind == "gru" else (h, Tensor(np.zeros((B, n))))
    outs = []
    for t in range(steps):
        state = rnn_cell_step(kind, T.embedding(table, ids[:, t]), state, cell)
        outs.append(state if kind == "gru" else state[0])
    return T.stack(outs, axis=1)


def reverse_within_length(ids: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse each row's valid prefix; returns the reversed ids and the index
    mapping original positions to reversed positions (identity on padding)."""
    B, steps = ids.shape
    pos = np.arange(steps)[None, :]
    valid = pos < lengths[:, None]
    index = np.where(valid, lengths[:, None] - 1 - pos, pos)
    rev = np.where(valid, np.take_along_axis(ids, index, axis=1), PAD)
    return rev, index


def bidirectional_run(
    char_ids: np.ndarray, lengths: np.ndarray, params: EncoderParams, config: EncoderConfig
) -> tuple[Tensor, np.ndarray]:
    """Hidden states of shape (B, T, 2n) and the (B, T) validity mask.

    Padded positions are zeroed; the backward direction starts at each
    caption's last real character.
    """
    char_ids = np.asarray(char_ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if char_ids.ndim != 2 or lengths.shape != (char_ids.shape[0],):
        raise DimensionError(f"char_ids {char_ids.shape} and lengths {lengths.shape} disagree")
    if lengths.min() < 1:
        raise ValueError("zero-length caption")
    if lengths.max() > char_ids.shape[1]:
        raise DimensionError("a length exceeds the padded width")
    n, kind, table = config.hidden_size, config.rnn_kind, params["char_embedding"]
    mask = np.arange(char_ids.shape[1])[None, :] < lengths[:, None]
    rev_ids, rev_index = reverse_within_length(char_ids, lengths)
    fwd = _run_direction(char_ids, table, _cell(params, "fwd", kind), kind, n)
    bwd = T.gather_time(_run_direction(rev_ids, table, _cell(params, "bwd", kind), kind, n), rev_index)
    H = T.concat([fwd, bwd], axis=2)
    H = T.mul(H, Tensor(np.broadcast_to(mask[:, :, None], H.shape).astype(np.float64)))
    return H, mask


def attention_weights(H: Tensor, mask: np.ndarray, params: EncoderParams) -> Tensor:
    """Per-feature softmax over time of ``V tanh(W h_t + b_w) + b_v``."""
    B, steps, F = H.shape
    flat = T.reshape(H, (B * steps, F))
    hidden = T.tanh(T.linear(flat, params["attn.W"], params["attn.b_w"]))
    logits = T.reshape(T.linear(hidden, params["attn.V"], params["attn.b_v"]), (B, steps, F))
    return T.softmax(logits, axis=1, mask=np.broadcast_to(mask[:, :, None], (B, steps, F)))


def attention_pool(H: Tensor, mask: np.ndarray, params: EncoderParams) -> Tensor:
    if not np.all(np.asarray(mask).any(axis=1)):
        raise DimensionError("attention_pool: a row has no valid step")
    a = attention_weights(H, mask, params)
    return T.sum(T.mul(a, H), axis=1)


def max_pool(H: Tensor, mask: np.ndarray) -> Tensor:
    return T.masked_max(H, mask, axis=1)


def encode_caption(batch: Batch, params: EncoderParams, config: EncoderConfig) -> Tensor:
    H, mask = bidirectional_run(batch.char_ids, batch.lengths, params, config)
    if config.pooling == "attention":
        pooled = attention_pool(H, mask, params)
    else:
        pooled = max_pool(H, mask)
    out = T.l2_normalize_rows(pooled)
    assert out.shape[1] == config.embed_dim
    return out


def encode_image(features, params: EncoderParams, config: Optional[EncoderConfig] = None) -> Tensor:
    feats = features if isinstance(features, Tensor) else Tensor(features)
    A = params["image.A"]
    if feats.ndim != 2 or feats.shape[1] != A.shape[1]:
        raise DimensionError(f"image features {feats.shape} do not match projection {A.shape}")
    if config is not None and A.shape[1] != config.image_feature_dim:
        raise DimensionError(f"projection {A.shape} does not match config image_feature_dim")
    return T.l2_normalize_rows(T.linear(feats, A, params["image.b"]))
