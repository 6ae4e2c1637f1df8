"""The hierarchical dialogue labeler and its distillation tap points."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from hkd import autodiff as ad
from hkd import layers
from hkd.autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    L: int
    M: int
    d_model: int
    heads: int
    ff_units: int
    vocab_size: int
    label_count: int
    hidden: int | None = None  # LSTM width; defaults to d_model
    dropout: float = 0.0

    def __post_init__(self):
        if self.L < 1 or self.M < 1:
            raise ValueError(f"need L >= 1 and M >= 1, got L={self.L}, M={self.M}")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} must be a positive multiple of heads={self.heads}")
        if self.ff_units < 1 or self.vocab_size < 0 or self.label_count < 1:
            raise ValueError("ff_units, label_count must be positive and vocab_size non-negative")
        if self.hidden is None:
            object.__setattr__(self, "hidden", self.d_model)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def parameter_count(self) -> int:
        """Closed-form scalar parameter count for this geometry."""
        d, f, H, Y = self.d_model, self.ff_units, self.hidden, self.label_count
        block = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
        pool = d * d + d + d
        lstm = (d * 4 * H + H * 4 * H + 4 * H) + (self.M - 1) * (H * 4 * H + H * 4 * H + 4 * H)
        head = Y * H + Y
        return self.vocab_size * d + self.L * block + pool + lstm + head


@dataclass
class ForwardTrace:
    """Tap points of one forward pass, padded to (N, T, .).

    ``s``: pooled utterance vectors; ``u``: top dialogue-level states;
    ``v``: logits; ``o``: label probabilities; ``lengths``: real T per dialogue.
    """

    s: Tensor
    u: Tensor
    v: Tensor
    o: Tensor
    lengths: np.ndarray

    def rows(self, n: int) -> dict[str, np.ndarray]:
        T = int(self.lengths[n])
        return {k: getattr(self, k).data[n, :T] for k in ("s", "u", "v", "o")}


class HierarchicalLabeler:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config
        self.embedding = layers.EmbeddingTable.init(rng, c.vocab_size, c.d_model, dtype)
        self.blocks = [layers.TransformerBlockParams.init(rng, c.d_model, c.heads, c.ff_units, dtype) for _ in range(c.L)]
        self.pool = layers.PoolingParams.init(rng, c.d_model, dtype=dtype)
        self.lstm = [
            layers.LstmParams.init(rng, c.d_model if m == 0 else c.hidden, c.hidden, dtype) for m in range(c.M)
        ]
        self.head = layers.OutputHeadParams.init(rng, c.hidden, c.label_count, dtype)
        self.params: dict[str, Tensor] = {}
        for prefix, group in self._groups():
            for name, t in group.named():
                full = f"{prefix}.{name}"
                t.name = full
                self.params[full] = t

    def _groups(self):
        yield "embedding", self.embedding
        for i, b in enumerate(self.blocks):
            yield f"encoder.{i}", b
        yield "pool", self.pool
        for i, p in enumerate(self.lstm):
            yield f"lstm.{i}", p
        yield "head", self.head

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "HierarchicalLabeler":
        """Stop recording gradients for every parameter (teacher mode)."""
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise KeyError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, arr in state.items():
            t = self.params[k]
            arr = np.asarray(arr)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)

    def copy(self, dtype=None) -> "HierarchicalLabeler":
        other = HierarchicalLabeler.__new__(HierarchicalLabeler)
        other.__init__(self.config, seed=0, dtype=dtype or self.dtype)
        other.load_state_dict(self.state_dict())
        return other


def count_parameters(model: HierarchicalLabeler) -> int:
    return int(sum(t.data.size for t in model.params.values()))


def encode_utterances(model: HierarchicalLabeler, tokens, mask, train=False, rng=None) -> Tensor:
    """Utterance-level network over (U, K) token ids -> (U, d_model).

    Utterances are encoded independently; no state crosses utterances.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if tokens.ndim != 2 or tokens.shape != mask.shape:
        raise ValueError(f"tokens {tokens.shape} and mask {mask.shape} must be equal 2-D shapes")
    if tokens.shape[1] == 0 or not mask.any(axis=1).all():
        raise ValueError("empty utterance: every utterance needs at least one token")
    lengths = mask.sum(axis=1)
    prefix = (np.arange(mask.shape[1])[None, :] < lengths[:, None]) == mask
    if not prefix.all() or (lengths == lengths[0]).all():
        return _encode_group(model, tokens, mask, train, rng)
    # Encode each distinct real length without padding.  Reductions over the
    # token axis then never see padded slots, so an utterance's vector is
    # bit-identical whatever else shares the batch.
    groups, order = [], []
    for k in np.unique(lengths):
        idx = np.nonzero(lengths == k)[0]
        groups.append(_encode_group(model, tokens[idx, :k], mask[idx, :k], train, rng))
        order.append(idx)
    inverse = np.empty(tokens.shape[0], dtype=np.int64)
    inverse[np.concatenate(order)] = np.arange(tokens.shape[0])
    return ad.gather(ad.concat(groups, axis=0), inverse)


def _encode_group(model, tokens, mask, train, rng):
    rate = model.config.dropout if train else 0.0
    x = layers.add_pos_enc(layers.embed(model.embedding, tokens))
    for block in model.blocks:
        x = layers.transformer_block(x, mask, block, dropout_rate=rate, rng=rng)
    return layers.attention_pool(x, mask, model.pool)


def encode_utterance(model: HierarchicalLabeler, tokens, mask=None) -> Tensor:
    """Single utterance -> s_t of shape (d_model,)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("empty utterance")
    mask = np.ones(tokens.shape, bool) if mask is None else np.asarray(mask, bool)
    s = encode_utterances(model, tokens[None, :], mask[None, :])
    return ad.slice_(s, 0)


def forward(model: HierarchicalLabeler, tokens, token_mask, utt_mask, train=False, rng=None, fused=True) -> ForwardTrace:
    """Batched forward over padded dialogues.

    tokens/token_mask: (N, T, K); utt_mask: (N, T) with real utterances first.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    token_mask = np.asarray(token_mask, dtype=bool)
    utt_mask = np.asarray(utt_mask, dtype=bool)
    N, T, _ = tokens.shape
    lengths = utt_mask.sum(axis=1)
    if N == 0 or T == 0 or (lengths == 0).any():
        raise ValueError("every dialogue needs at least one utterance")
    flat_tok = tokens[utt_mask]
    flat_mask = token_mask[utt_mask]
    K = int(flat_mask.sum(axis=1).max())
    s_flat = encode_utterances(model, flat_tok[:, :K], flat_mask[:, :K], train=train, rng=rng)
    # Scatter (U, d) back to (N, T, d); padded slots read utterance 0 and are masked downstream.
    index = np.zeros((N, T), dtype=np.int64)
    index[utt_mask] = np.arange(flat_tok.shape[0])
    s = ad.gather(s_flat, index)
    u = layers.lstm_stack(s, model.lstm, fused=fused)[-1]
    v, o = layers.output_head(u, model.head)
    return ForwardTrace(s=s, u=u, v=v, o=o, lengths=lengths)


def forward_dialogue(model: HierarchicalLabeler, utterances) -> ForwardTrace:
    """Forward a single dialogue given as a list of token-id lists."""
    if len(utterances) == 0:
        raise ValueError("dialogue with zero utterances")
    if any(len(u) == 0 for u in utterances):
        raise ValueError("empty utterance")
    T = len(utterances)
    K = max(len(u) for u in utterances)
    tokens = np.zeros((1, T, K), dtype=np.int64)
    mask = np.zeros((1, T, K), dtype=bool)
    for t, u in enumerate(utterances):
        tokens[0, t, : len(u)] = u
        mask[0, t, : len(u)] = True
    return forward(model, tokens, mask, np.ones((1, T), bool))


def predict(model: HierarchicalLabeler, utterances) -> list[int]:
    """Per-utterance argmax labels; ties go to the lowest label index."""
    trace = forward_dialogue(model, utterances)
    return [int(i) for i in np.argmax(trace.o.data[0], axis=-1)]


def predict_batch(model: HierarchicalLabeler, tokens, token_mask, utt_mask) -> np.ndarray:
    trace = forward(model, tokens, token_mask, utt_mask)
    return np.argmax(trace.o.data, axis=-1)
