"""Hard-target, soft-target and context losses plus their weighted sum.

Every loss averages per dialogue first (over its real utterances) and then
over the dialogues of the batch.  Teacher quantities enter as constants, so
no gradient ever reaches teacher parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hkd import autodiff as ad
from hkd.autodiff import ShapeError, Tensor
from hkd.layers import softmax_temp

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    tau: float = 5.0
    lam: float = 0.1
    alpha: float = 0.05
    beta: float = 0.05

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("lam", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


@dataclass
class LossBreakdown:
    """Scalar values of each term; None when the term's weight is zero."""

    ht: float
    st: float | None
    uc: float | None
    dc: float | None
    combined: float

    def to_dict(self):
        return {"ht": self.ht, "st": self.st, "uc": self.uc, "dc": self.dc, "combined": self.combined}


def utterance_weights(lengths, T: int, dtype=np.float64) -> np.ndarray:
    """(N, T) matrix of 1 / (N * T_n) on real utterances, 0 on padding."""
    lengths = np.asarray(lengths)
    N = lengths.shape[0]
    w = np.zeros((N, T), dtype=np.float64)
    for n, Tn in enumerate(lengths):
        w[n, : int(Tn)] = 1.0 / (N * int(Tn))
    return w.astype(dtype)


def _nested_mean(per_utt: Tensor, lengths) -> Tensor:
    w = utterance_weights(lengths, per_utt.shape[1], per_utt.dtype)
    return ad.sum_(ad.mul(per_utt, ad.constant(w)))


def _as_const(x) -> Tensor:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Tensor(data)


def hard_target_loss(o: Tensor, labels, lengths, diagnostics: dict | None = None) -> Tensor:
    """Cross-entropy of probabilities ``o`` (N, T, Y) against label ids (N, T)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != o.shape[:2]:
        raise ShapeError(f"labels {labels.shape} do not match probabilities {o.shape}")
    onehot = np.zeros(o.shape, dtype=o.dtype)
    np.put_along_axis(onehot, np.clip(labels, 0, o.shape[2] - 1)[..., None], 1.0, axis=-1)
    if diagnostics is not None:
        w = utterance_weights(lengths, o.shape[1]) > 0
        picked = np.take_along_axis(o.data, np.clip(labels, 0, o.shape[2] - 1)[..., None], -1)[..., 0]
        diagnostics["clamped"] = int(((picked < LOG_FLOOR) & w).sum())
    logp = ad.sum_(ad.mul(ad.log(o, floor=LOG_FLOOR), ad.constant(onehot)), axis=-1)
    return ad.scale(_nested_mean(logp, lengths), -1.0)


def soft_target_loss(teacher_logits, student_logits: Tensor, tau: float, lengths) -> Tensor:
    """tau^2-scaled cross-entropy between temperature-softened distributions."""
    teacher = _as_const(teacher_logits)
    if teacher.shape != student_logits.shape:
        raise ShapeError(f"teacher logits {teacher.shape} vs student logits {student_logits.shape}")
    target = softmax_temp(teacher, tau)
    z = softmax_temp(student_logits, tau)
    xent = ad.sum_(ad.mul(ad.log(z, floor=LOG_FLOOR), target), axis=-1)
    return ad.scale(_nested_mean(xent, lengths), -(tau * tau))


def _context_loss(teacher, student: Tensor, lengths, what: str) -> Tensor:
    teacher = _as_const(teacher)
    if teacher.shape[-1] != student.shape[-1]:
        raise ShapeError(
            f"{what}: teacher width {teacher.shape[-1]} != student width {student.shape[-1]}; "
            "no projection is applied"
        )
    if teacher.shape != student.shape:
        raise ShapeError(f"{what}: teacher {teacher.shape} vs student {student.shape}")
    return _nested_mean(ad.sq_l2(teacher, student), lengths)


def utterance_context_loss(teacher_s, student_s: Tensor, lengths) -> Tensor:
    """Squared L2 between pooled utterance vectors (summed over dimensions)."""
    return _context_loss(teacher_s, student_s, lengths, "utterance context")


def dialogue_context_loss(teacher_u, student_u: Tensor, lengths, teacher_depth=None, student_depth=None) -> Tensor:
    """Squared L2 between the top dialogue-level states of teacher and student."""
    if teacher_depth is not None and student_depth is not None and teacher_depth < student_depth:
        raise ValueError(f"teacher depth {teacher_depth} must be >= student depth {student_depth}")
    return _context_loss(teacher_u, student_u, lengths, "dialogue context")


def combined_loss(ht: Tensor, st: Tensor | None, uc: Tensor | None, dc: Tensor | None, weights: LossWeights):
    """Weighted sum; terms with zero weight (or None) are left out entirely.

    Returns the combined scalar Tensor and a :class:`LossBreakdown`.
    """
    total = ht
    parts = {"st": None, "uc": None, "dc": None}
    for key, term, w in (("st", st, weights.lam), ("uc", uc, weights.alpha), ("dc", dc, weights.beta)):
        if w < 0:
            raise ValueError(f"negative weight for {key}")
        if w == 0 or term is None:
            continue
        total = ad.add(total, ad.scale(term, w))
        parts[key] = float(term.data)
    return total, LossBreakdown(ht=float(ht.data), combined=float(total.data), **parts)


def distillation_loss(student, teacher, labels, weights: LossWeights, teacher_depth=None, student_depth=None, diagnostics=None):
    """All terms for one batch from student and (optional) teacher traces."""
    lengths = student.lengths
    ht = hard_target_loss(student.o, labels, lengths, diagnostics)
    st = uc = dc = None
    if teacher is not None:
        if weights.lam > 0:
            st = soft_target_loss(teacher.v, student.v, weights.tau, lengths)
        if weights.alpha > 0:
            uc = utterance_context_loss(teacher.s, student.s, lengths)
        if weights.beta > 0:
            dc = dialogue_context_loss(teacher.u, student.u, lengths, teacher_depth, student_depth)
    return combined_loss(ht, st, uc, dc, weights)
