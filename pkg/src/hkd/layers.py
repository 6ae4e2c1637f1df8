"""Differentiable building blocks of the hierarchical labeler.

All layers are batched.  Utterance-level layers take ``(U, K, d)`` token
representations with a boolean ``(U, K)`` mask where True marks a real token;
the dialogue-level LSTM takes ``(N, T, d)``.  Parameters live in small
dataclasses whose ``named()`` method yields ``(suffix, Tensor)`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from hkd import autodiff as ad
from hkd.autodiff import ShapeError, Tensor

FORGET_BIAS = 1.0


def _uniform(rng, shape, fan_in, dtype):
    a = 1.0 / math.sqrt(fan_in)
    return ad.parameter(rng.uniform(-a, a, size=shape), dtype=dtype)


class _Params:
    def named(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class EmbeddingTable(_Params):
    weight: Tensor

    @classmethod
    def init(cls, rng, vocab_size, d_model, dtype=np.float64):
        # A lookup reads one table entry per output, so its fan-in is 1.
        return cls(_uniform(rng, (vocab_size, d_model), 1, dtype))


@dataclass
class TransformerBlockParams(_Params):
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    heads: int = 1

    def named(self):
        for name, t in super().named():
            if name != "heads":
                yield name, t

    @classmethod
    def init(cls, rng, d_model, heads, ff_units, dtype=np.float64):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        d, f = d_model, ff_units

        def u(shape, fan_in):
            return _uniform(rng, shape, fan_in, dtype)

        return cls(
            w_q=u((d, d), d), b_q=u((d,), d),
            w_k=u((d, d), d), b_k=u((d,), d),
            w_v=u((d, d), d), b_v=u((d,), d),
            w_o=u((d, d), d), b_o=u((d,), d),
            ln1_gain=ad.parameter(np.ones(d), dtype=dtype), ln1_bias=ad.parameter(np.zeros(d), dtype=dtype),
            w_ff1=u((d, f), d), b_ff1=u((f,), d),
            w_ff2=u((f, d), f), b_ff2=u((d,), f),
            ln2_gain=ad.parameter(np.ones(d), dtype=dtype), ln2_bias=ad.parameter(np.zeros(d), dtype=dtype),
            heads=heads,
        )


@dataclass
class PoolingParams(_Params):
    w_s: Tensor
    b_s: Tensor
    v_s: Tensor

    @classmethod
    def init(cls, rng, d_model, d_attn=None, dtype=np.float64):
        d_attn = d_attn or d_model
        return cls(
            _uniform(rng, (d_model, d_attn), d_model, dtype),
            _uniform(rng, (d_attn,), d_model, dtype),
            _uniform(rng, (d_attn,), d_attn, dtype),
        )


@dataclass
class LstmParams(_Params):
    w_ih: Tensor
    w_hh: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]

    @classmethod
    def init(cls, rng, d_in, hidden, dtype=np.float64):
        fan_in = d_in + hidden
        b = rng.uniform(-1, 1, size=4 * hidden) / math.sqrt(fan_in)
        b[hidden : 2 * hidden] = FORGET_BIAS
        return cls(
            _uniform(rng, (d_in, 4 * hidden), fan_in, dtype),
            _uniform(rng, (hidden, 4 * hidden), fan_in, dtype),
            ad.parameter(b, dtype=dtype),
        )


@dataclass
class OutputHeadParams(_Params):
    weight: Tensor  # (labels, hidden)
    bias: Tensor

    @classmethod
    def init(cls, rng, hidden, n_labels, dtype=np.float64):
        return cls(_uniform(rng, (n_labels, hidden), hidden, dtype), _uniform(rng, (n_labels,), hidden, dtype))


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return ad.mul(x, ad.constant(keep))


def embed(table: EmbeddingTable, token_ids) -> Tensor:
    """Look up rows of the embedding table; output shape ``ids.shape + (d,)``."""
    ids = np.asarray(token_ids, dtype=np.int64)
    return ad.gather(table.weight, ids)


def positional_encoding(length: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal table: even dims sin, odd dims cos of pos / 10000^(2i/d)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe.astype(dtype)


def add_pos_enc(x: Tensor) -> Tensor:
    """Add the position-within-utterance encoding along axis -2."""
    if x.data.ndim < 2:
        raise ShapeError(f"add_pos_enc: expected (..., K, d), got {x.shape}")
    K, d = x.shape[-2:]
    if K < 1:
        raise ShapeError("add_pos_enc: empty sequence")
    return ad.add(x, ad.constant(positional_encoding(K, d, x.dtype)))


def _check_mask(mask, where):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError(f"{where}: every sequence needs at least one unmasked token")
    return mask


def transformer_block(x: Tensor, token_mask, p: TransformerBlockParams, dropout_rate=0.0, rng=None) -> Tensor:
    """Post-norm encoder block over ``x`` (U, K, d).

    Padded tokens are excluded as attention keys; their own outputs are
    computed but meaningless.
    """
    mask = _check_mask(token_mask, "transformer_block")
    if x.data.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"transformer_block: x {x.shape} vs mask {mask.shape}")
    d = x.shape[-1]
    h = p.heads
    dh = d // h
    q = ad.add(ad.matmul(x, p.w_q), p.b_q)
    k = ad.add(ad.matmul(x, p.w_k), p.b_k)
    v = ad.add(ad.matmul(x, p.w_v), p.b_v)
    key_pad = ~mask[:, None, :]
    inv = 1.0 / math.sqrt(dh)
    heads = []
    for i in range(h):
        cols = (Ellipsis, slice(i * dh, (i + 1) * dh))
        qi, ki, vi = ad.slice_(q, cols), ad.slice_(k, cols), ad.slice_(v, cols)
        scores = ad.scale(ad.matmul(qi, ad.transpose(ki)), inv)
        attn = ad.softmax(ad.masked_fill(scores, key_pad), axis=-1)
        heads.append(ad.matmul(attn, vi))
    ctx = heads[0] if h == 1 else ad.concat(heads, axis=-1)
    att = dropout(ad.add(ad.matmul(ctx, p.w_o), p.b_o), dropout_rate, rng)
    y = ad.layernorm(ad.add(x, att), p.ln1_gain, p.ln1_bias)
    ff = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(y, p.w_ff1), p.b_ff1)), p.w_ff2), p.b_ff2)
    ff = dropout(ff, dropout_rate, rng)
    return ad.layernorm(ad.add(y, ff), p.ln2_gain, p.ln2_bias)


def attention_pool(r: Tensor, token_mask, p: PoolingParams, return_weights=False):
    """Additive self-attention pooling (U, K, d) -> (U, d).

    Scores ``v_s . tanh(W_s r_k + b_s)`` are softmax-normalised over the real
    tokens of each utterance.
    """
    mask = _check_mask(token_mask, "attention_pool")
    if r.data.ndim != 3 or mask.shape != r.shape[:2]:
        raise ShapeError(f"attention_pool: r {r.shape} vs mask {mask.shape}")
    hidden = ad.tanh(ad.add(ad.matmul(r, p.w_s), p.b_s))
    scores = ad.sum_(ad.mul(hidden, p.v_s), axis=-1, keepdims=True)
    weights = ad.softmax(ad.masked_fill(scores, ~mask[:, :, None]), axis=1)
    pooled = ad.sum_(ad.mul(r, weights), axis=1)
    if return_weights:
        return pooled, weights
    return pooled


def lstm_layer_reference(x: Tensor, p: LstmParams) -> Tensor:
    """Step-by-step LSTM layer built from elementary primitives.

    Numerically equivalent to the fused ``lstm`` primitive; kept as the
    independent path for gradient and kernel checks.
    """
    N, T, _ = x.shape
    H = p.hidden
    xp = ad.add(ad.matmul(x, p.w_ih), p.b)
    h = c = None
    outs = []
    for t in range(T):
        z = ad.slice_(xp, (slice(None), t, slice(None)))
        if h is not None:
            z = ad.add(z, ad.matmul(h, p.w_hh))
        i = ad.sigmoid(ad.slice_(z, (slice(None), slice(0, H))))
        f = ad.sigmoid(ad.slice_(z, (slice(None), slice(H, 2 * H))))
        g = ad.tanh(ad.slice_(z, (slice(None), slice(2 * H, 3 * H))))
        o = ad.sigmoid(ad.slice_(z, (slice(None), slice(3 * H, 4 * H))))
        c = ad.mul(i, g) if c is None else ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outs.append(h)
    stacked = ad.concat([ad.slice_(o_, (slice(None), None, slice(None))) for o_ in outs], axis=1)
    return stacked


def lstm_stack(s: Tensor, params: list[LstmParams], fused: bool = True) -> list[Tensor]:
    """Unidirectional LSTM layers over ``s`` (N, T, d); returns every layer's output.

    Initial hidden and cell states are zero, so step t depends on steps 1..t only.
    """
    if s.data.ndim != 3 or s.shape[1] < 1:
        raise ShapeError(f"lstm_stack: expected (N, T>=1, d), got {s.shape}")
    outs = []
    x = s
    for p in params:
        x = ad.lstm(x, p.w_ih, p.w_hh, p.b) if fused else lstm_layer_reference(x, p)
        outs.append(x)
    return outs


def output_head(u: Tensor, p: OutputHeadParams) -> tuple[Tensor, Tensor]:
    """Logits ``W u + b`` and their softmax."""
    if u.shape[-1] != p.weight.shape[1]:
        raise ShapeError(f"output_head: input width {u.shape[-1]} vs weight {p.weight.shape}")
    logits = ad.add(ad.matmul(u, ad.transpose(p.weight)), p.bias)
    return logits, ad.softmax(logits, axis=-1)


def softmax_temp(v: Tensor, tau: float) -> Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if tau == 1:
        return ad.softmax(v, axis=-1)
    return ad.softmax(ad.scale(v, 1.0 / tau), axis=-1)
