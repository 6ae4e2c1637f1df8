"""Dialogue corpora: data model, JSONL I/O, vocabulary, batching, synthetic data.

Corpus file: UTF-8, one JSON object per line::

    {"id": "d0", "utterances": [{"tokens": ["hi", "there"], "label": "opening", "speaker": "A"}]}

Label-set file: one label per line, line order is the label index.
Vocabulary file: one token per line; line i holds id i + 2 (0 is PAD, 1 is UNK).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class CorpusError(ValueError):
    pass


@dataclass
class Utterance:
    tokens: list[str]
    label: str
    speaker: str | None = None

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise CorpusError("utterance with no tokens")


@dataclass
class Dialogue:
    id: str
    utterances: list[Utterance]

    def __post_init__(self):
        if len(self.utterances) < 1:
            raise CorpusError(f"dialogue {self.id!r} has no utterances")

    def __len__(self):
        return len(self.utterances)

    def to_json(self) -> str:
        utts = []
        for u in self.utterances:
            rec = {"tokens": list(u.tokens), "label": u.label}
            if u.speaker is not None:
                rec["speaker"] = u.speaker
            utts.append(rec)
        return json.dumps({"id": self.id, "utterances": utts}, ensure_ascii=False)


class LabelSet:
    def __init__(self, labels=()):
        self.labels: list[str] = []
        self._index: dict[str, int] = {}
        for lab in labels:
            self.add(lab)

    def add(self, label: str) -> int:
        if label not in self._index:
            self._index[label] = len(self.labels)
            self.labels.append(label)
        return self._index[label]

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise CorpusError(f"unknown label {label!r}") from None

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __eq__(self, other):
        return isinstance(other, LabelSet) and self.labels == other.labels

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{lab}\n" for lab in self.labels), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LabelSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        labels = [ln for ln in lines if ln]
        if len(set(labels)) != len(labels):
            raise CorpusError(f"{path}: duplicate labels")
        return cls(labels)


class Vocabulary:
    def __init__(self, tokens=()):
        self.tokens: list[str] = [PAD_TOKEN, UNK_TOKEN]
        self._ids: dict[str, int] = {}
        for tok in tokens:
            if tok in (PAD_TOKEN, UNK_TOKEN) or tok in self._ids:
                continue
            self._ids[tok] = len(self.tokens)
            self.tokens.append(tok)

    @classmethod
    def build(cls, dialogues) -> "Vocabulary":
        """Sorted unique tokens of the given (training) dialogues."""
        seen = {tok for d in dialogues for u in d.utterances for tok in u.tokens}
        return cls(sorted(seen))

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def encode(self, tokens) -> list[int]:
        return [self._ids.get(t, UNK) for t in tokens]

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t}\n" for t in self.tokens[2:]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def _parse_dialogue(line: str, lineno: int) -> Dialogue:
    try:
        rec = json.loads(line)
        utts = [
            Utterance(tokens=[str(t) for t in u["tokens"]], label=str(u["label"]), speaker=u.get("speaker"))
            for u in rec["utterances"]
        ]
        return Dialogue(id=str(rec["id"]), utterances=utts)
    except (json.JSONDecodeError, KeyError, TypeError, CorpusError) as exc:
        raise CorpusError(f"line {lineno}: malformed dialogue record ({exc})") from None


def load_corpus(path, labels: LabelSet | None = None) -> tuple[list[Dialogue], LabelSet]:
    """Read a JSONL corpus.

    Without ``labels`` the label set grows in first-seen order; with one,
    any label outside it is rejected.
    """
    dialogues = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                dialogues.append(_parse_dialogue(line, lineno))
    if not dialogues:
        raise CorpusError(f"{path}: no dialogues")
    if labels is None:
        labels = LabelSet(u.label for d in dialogues for u in d.utterances)
    else:
        for d in dialogues:
            for u in d.utterances:
                labels.index(u.label)
    return dialogues, labels


def save_corpus(dialogues, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in dialogues:
            fh.write(d.to_json() + "\n")


@dataclass
class Batch:
    """Padded mini-batch of dialogues.

    ``tokens``/``token_mask``: (N, T, K); ``utt_mask``/``labels``: (N, T);
    ``lengths``: (N,).  Padded tokens hold PAD, padded labels hold -1.
    """

    tokens: np.ndarray
    token_mask: np.ndarray
    utt_mask: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return self.tokens.shape[0]


def encode_dialogue(d: Dialogue, vocab: Vocabulary, labels: LabelSet | None):
    toks = [vocab.encode(u.tokens) for u in d.utterances]
    labs = [labels.index(u.label) for u in d.utterances] if labels is not None else [-1] * len(d)
    return toks, labs


def collate(dialogues, vocab: Vocabulary, labels: LabelSet | None = None) -> Batch:
    enc = [encode_dialogue(d, vocab, labels) for d in dialogues]
    N = len(enc)
    T = max(len(t) for t, _ in enc)
    K = max(len(u) for t, _ in enc for u in t)
    tokens = np.full((N, T, K), PAD, dtype=np.int64)
    token_mask = np.zeros((N, T, K), dtype=bool)
    utt_mask = np.zeros((N, T), dtype=bool)
    lab = np.full((N, T), -1, dtype=np.int64)
    for n, (toks, labs) in enumerate(enc):
        for t, u in enumerate(toks):
            tokens[n, t, : len(u)] = u
            token_mask[n, t, : len(u)] = True
        utt_mask[n, : len(toks)] = True
        lab[n, : len(labs)] = labs
    return Batch(tokens, token_mask, utt_mask, utt_mask.sum(axis=1), lab, [d.id for d in dialogues])


def make_batches(dialogues, batch_size: int, vocab: Vocabulary, labels: LabelSet | None = None, seed=None) -> list[Batch]:
    """Shuffle (when ``seed`` is given) and cut into padded batches; the last may be partial."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dialogues))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(dialogues))
    return [
        collate([dialogues[i] for i in order[s : s + batch_size]], vocab, labels)
        for s in range(0, len(dialogues), batch_size)
    ]


def split_train_valid(dialogues, valid_fraction: float, seed: int):
    """Disjoint random split; the validation side gets round(fraction * N) dialogues."""
    if not 0.0 < valid_fraction < 1.0:
        raise ValueError(f"valid_fraction must be in (0, 1), got {valid_fraction}")
    n = len(dialogues)
    n_valid = int(round(valid_fraction * n))
    if n_valid < 1 or n_valid >= n:
        raise ValueError(f"valid_fraction {valid_fraction} leaves an empty side for {n} dialogues")
    perm = np.random.default_rng(seed).permutation(n)
    valid_idx = set(perm[:n_valid].tolist())
    train = [d for i, d in enumerate(dialogues) if i not in valid_idx]
    valid = [d for i, d in enumerate(dialogues) if i in valid_idx]
    return train, valid


# ---------------------------------------------------------------------------
# Synthetic call-scene corpus.
# ---------------------------------------------------------------------------

SCENE_NAMES = ["opening", "requirement_confirmation", "response", "customer_confirmation", "closing"]


@dataclass(frozen=True)
class SyntheticSpec:
    scenes: int = 5
    labels: int = 5
    dialogues: int = 280
    min_len: int = 20
    max_len: int = 40
    vocab_size: int = 60
    noise: float = 0.1
    seed: int = 0
    min_tokens: int = 3
    max_tokens: int = 8
    specific_rate: float = 0.5

    def check(self):
        for name in ("scenes", "labels", "dialogues", "min_len", "max_len", "vocab_size", "min_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.scenes < 3:
            raise ValueError("need at least 3 scenes for a history-dependent label pair")
        if self.labels < self.scenes:
            raise ValueError("label count must be >= scene count")
        if self.min_len < self.scenes or self.max_len < self.min_len:
            raise ValueError(f"dialogue length range [{self.min_len}, {self.max_len}] must allow every scene")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError(f"noise rate must be in [0, 0.5), got {self.noise}")
        if self.vocab_size < 3 * self.labels:
            raise ValueError(f"vocab_size {self.vocab_size} < 3 x label count {self.labels}: insufficient signal")
        if self.max_tokens < self.min_tokens or not 0.0 < self.specific_rate <= 1.0:
            raise ValueError("bad utterance length range or specific_rate")


def scene_labels(spec: SyntheticSpec) -> list[list[str]]:
    """Labels owned by each scene, in order (contiguous blocks)."""
    names = []
    per = [spec.labels // spec.scenes + (1 if s < spec.labels % spec.scenes else 0) for s in range(spec.scenes)]
    for s, k in enumerate(per):
        base = SCENE_NAMES[s] if spec.scenes == len(SCENE_NAMES) else f"scene{s}"
        names.append([base] if k == 1 else [f"{base}.{j}" for j in range(k)])
    return names


def history_pair(spec: SyntheticSpec) -> tuple[str, str]:
    """The two labels with identical emissions, told apart only by history."""
    blocks = scene_labels(spec)
    return blocks[1][0], blocks[spec.scenes - 2][0]


def emission_groups(spec: SyntheticSpec) -> dict[str, int]:
    """label -> emission group id; the history pair shares one group."""
    a, b = history_pair(spec)
    groups: dict[str, int] = {}
    nxt = 0
    for block in scene_labels(spec):
        for lab in block:
            if lab == b:
                groups[lab] = groups[a]
                continue
            groups[lab] = nxt
            nxt += 1
    return groups


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Dialogue], LabelSet]:
    """Left-to-right scene dialogues with label-specific token emissions.

    Each dialogue visits every scene once, in order, with random change
    points.  Each emission group owns a disjoint block of "specific" tokens;
    the rest of the vocabulary is shared filler.  Noise replaces a token by a
    uniformly drawn vocabulary token.
    """
    spec.check()
    rng = np.random.default_rng(spec.seed)
    blocks = scene_labels(spec)
    groups = emission_groups(spec)
    n_groups = max(groups.values()) + 1
    vocab = [f"w{i}" for i in range(spec.vocab_size)]
    per_group = max(2, (spec.vocab_size // 2) // n_groups)
    specific = [vocab[g * per_group : (g + 1) * per_group] for g in range(n_groups)]
    filler = vocab[n_groups * per_group :] or vocab
    label_set = LabelSet(lab for block in blocks for lab in block)
    width = int(math.log10(max(spec.dialogues - 1, 1))) + 1
    dialogues = []
    for n in range(spec.dialogues):
        T = int(rng.integers(spec.min_len, spec.max_len + 1))
        cuts = np.sort(rng.choice(np.arange(1, T), size=spec.scenes - 1, replace=False))
        bounds = np.concatenate([[0], cuts, [T]])
        utts = []
        for s in range(spec.scenes):
            for t in range(bounds[s], bounds[s + 1]):
                lab = blocks[s][int(rng.integers(len(blocks[s])))]
                spec_toks = specific[groups[lab]]
                K = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
                is_spec = rng.random(K) < spec.specific_rate
                is_spec[int(rng.integers(K))] = True
                toks = [
                    spec_toks[int(rng.integers(len(spec_toks)))] if flag else filler[int(rng.integers(len(filler)))]
                    for flag in is_spec
                ]
                noisy = rng.random(K) < spec.noise
                for k in np.nonzero(noisy)[0]:
                    toks[k] = vocab[int(rng.integers(spec.vocab_size))]
                utts.append(Utterance(tokens=toks, label=lab, speaker="operator" if t % 2 == 0 else "customer"))
        dialogues.append(Dialogue(id=f"syn{n:0{width}d}", utterances=utts))
    return dialogues, label_set
