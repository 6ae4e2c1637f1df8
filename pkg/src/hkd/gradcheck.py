"""Randomised gradient-check suite over every layer and loss.

Each case draws a small random instance from a seed, projects the output onto
a fixed random direction (so every output coordinate contributes) and runs
:func:`hkd.autodiff.grad_check` at 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hkd import autodiff as ad
from hkd import layers, losses
from hkd.autodiff import Tensor
from hkd.model import HierarchicalLabeler, ModelConfig, encode_utterances


@dataclass
class CaseResult:
    name: str
    seed: int
    error: float


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape))


def _projected(f, rng):
    """Wrap ``f`` so its output is dotted with one direction drawn now."""
    cache = {}

    def g(*xs):
        out = f(*xs)
        if "d" not in cache:
            cache["d"] = Tensor(rng.normal(size=out.shape))
        return ad.sum_(ad.mul(out, cache["d"]))

    return g


def _lengths(rng, N, T):
    lengths = rng.integers(1, T + 1, size=N)
    lengths[0] = T
    return lengths


def _prefix_mask(rng, U, K):
    n = rng.integers(1, K + 1, size=U)
    return np.arange(K)[None, :] < n[:, None]


def case_embedding(rng):
    table = _t(rng, 7, 4)
    ids = rng.integers(0, 7, size=(2, 3))
    return _projected(lambda w: layers.embed(layers.EmbeddingTable(w), ids), rng), [table]


def case_pos_enc(rng):
    x = _t(rng, 2, 5, 4)
    return _projected(layers.add_pos_enc, rng), [x]


def case_transformer(rng):
    p = layers.TransformerBlockParams.init(rng, 4, 2, 6)
    names = [n for n, _ in p.named() if n != "b_k"]
    fixed_bk = p.b_k  # shift-invariant under softmax: exact gradient is zero
    x = _t(rng, 2, 3, 4)
    mask = _prefix_mask(rng, 2, 3)
    direction = Tensor(rng.normal(size=(2, 3, 4)) * mask[..., None])

    def fn(x, *ts):
        kw = dict(zip(names, ts))
        q = layers.TransformerBlockParams(b_k=fixed_bk, heads=2, **kw)
        return ad.sum_(ad.mul(layers.transformer_block(x, mask, q), direction))

    return fn, [x] + [getattr(p, n) for n in names]


def case_pooling(rng):
    p = layers.PoolingParams.init(rng, 4)
    r = _t(rng, 3, 4, 4)
    mask = _prefix_mask(rng, 3, 4)
    return (_projected(lambda r, w, b, v: layers.attention_pool(r, mask, layers.PoolingParams(w, b, v)), rng),
            [r, p.w_s, p.b_s, p.v_s])


def case_lstm(rng):
    ps = [layers.LstmParams.init(rng, 3, 4), layers.LstmParams.init(rng, 4, 4)]
    x = _t(rng, 2, 4, 3)
    flat = [t for p in ps for _, t in p.named()]

    def fn(x, *ts):
        qs = [layers.LstmParams(*ts[3 * i : 3 * i + 3]) for i in range(2)]
        return layers.lstm_stack(x, qs)[-1]

    return _projected(fn, rng), [x] + flat


def case_output_head(rng):
    p = layers.OutputHeadParams.init(rng, 4, 5)
    u = _t(rng, 2, 3, 4)
    return _projected(lambda u, w, b: layers.output_head(u, layers.OutputHeadParams(w, b))[1], rng), [u, p.weight, p.bias]


def case_softmax_temp(rng):
    v = _t(rng, 2, 3, 5, scale=2.0)
    tau = float(rng.uniform(0.5, 6.0))
    return _projected(lambda v: layers.softmax_temp(v, tau), rng), [v]


def case_utterance_encoder(rng):
    cfg = ModelConfig(L=1, M=1, d_model=4, heads=2, ff_units=6, vocab_size=8, label_count=3)
    m = HierarchicalLabeler(cfg, seed=int(rng.integers(1 << 30)))
    tokens = rng.integers(2, 8, size=(2, 3))
    mask = _prefix_mask(rng, 2, 3)
    direction = Tensor(rng.normal(size=(2, 4)))

    def fn(table, w_ff1, w_s):
        m.embedding.weight, m.blocks[0].w_ff1, m.pool.w_s = table, w_ff1, w_s
        return ad.sum_(ad.mul(encode_utterances(m, tokens, mask), direction))

    return fn, [m.embedding.weight, m.blocks[0].w_ff1, m.pool.w_s]


def case_hard_target(rng):
    N, T, Y = 3, 4, 5
    v = _t(rng, N, T, Y)
    labels = rng.integers(0, Y, size=(N, T))
    lengths = _lengths(rng, N, T)
    return lambda v: losses.hard_target_loss(ad.softmax(v), labels, lengths), [v]


def case_soft_target(rng):
    N, T, Y = 3, 4, 5
    teacher = rng.normal(scale=2, size=(N, T, Y))
    v = _t(rng, N, T, Y, scale=2.0)
    lengths = _lengths(rng, N, T)
    return lambda v: losses.soft_target_loss(teacher, v, 5.0, lengths), [v]


def case_utterance_context(rng):
    teacher = rng.normal(size=(3, 4, 6))
    s = _t(rng, 3, 4, 6)
    lengths = _lengths(rng, 3, 4)
    return lambda s: losses.utterance_context_loss(teacher, s, lengths), [s]


def case_dialogue_context(rng):
    teacher = np.tanh(rng.normal(size=(3, 4, 6)))
    u = _t(rng, 3, 4, 6, scale=0.5)
    lengths = _lengths(rng, 3, 4)
    return lambda u: losses.dialogue_context_loss(teacher, u, lengths, 2, 1), [u]


def case_combined(rng):
    N, T, Y, d = 2, 3, 4, 5
    labels = rng.integers(0, Y, size=(N, T))
    lengths = _lengths(rng, N, T)
    t_v, t_s, t_u = rng.normal(size=(N, T, Y)), rng.normal(size=(N, T, d)), np.tanh(rng.normal(size=(N, T, d)))
    v, s, u = _t(rng, N, T, Y), _t(rng, N, T, d), _t(rng, N, T, d, scale=0.5)
    w = losses.LossWeights()

    def fn(v, s, u):
        ht = losses.hard_target_loss(ad.softmax(v), labels, lengths)
        st = losses.soft_target_loss(t_v, v, w.tau, lengths)
        uc = losses.utterance_context_loss(t_s, s, lengths)
        dc = losses.dialogue_context_loss(t_u, u, lengths)
        return losses.combined_loss(ht, st, uc, dc, w)[0]

    return fn, [v, s, u]


CASES = {
    "embedding": case_embedding,
    "positional_encoding": case_pos_enc,
    "transformer_block": case_transformer,
    "attention_pool": case_pooling,
    "lstm_stack": case_lstm,
    "output_head": case_output_head,
    "softmax_temp": case_softmax_temp,
    "utterance_encoder": case_utterance_encoder,
    "hard_target_loss": case_hard_target,
    "soft_target_loss": case_soft_target,
    "utterance_context_loss": case_utterance_context,
    "dialogue_context_loss": case_dialogue_context,
    "combined_loss": case_combined,
}


def run_suite(instances: int = 104, seed: int = 0, eps: float = 1e-5) -> list[CaseResult]:
    """Round-robin over :data:`CASES` until ``instances`` checks have run."""
    names = list(CASES)
    results = []
    for i in range(instances):
        name = names[i % len(names)]
        case_seed = seed * 1_000_003 + i
        fn, inputs = CASES[name](np.random.default_rng(case_seed))
        results.append(CaseResult(name, case_seed, ad.grad_check(fn, inputs, eps=eps)))
    return results
