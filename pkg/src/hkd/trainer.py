"""Teacher training, student distillation, evaluation and the ablation grid."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from hkd import autodiff as ad
from hkd.corpus import Batch, Dialogue, LabelSet, Vocabulary, collate, make_batches, split_train_valid
from hkd.losses import LossWeights, distillation_loss
from hkd.model import ForwardTrace, HierarchicalLabeler, ModelConfig, forward
from hkd.optim import RAdam

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "kd_st_only", "kd_no_uc", "kd_no_dc", "kd_full")
CLI_VARIANTS = {"baseline": "baseline", "st": "kd_st_only", "no-uc": "kd_no_uc", "no-dc": "kd_no_dc", "full": "kd_full"}
ROW_TITLES = {
    "baseline": "Baseline",
    "kd_st_only": "KD w/o UC, DC",
    "kd_no_uc": "KD w/o UC",
    "kd_no_dc": "KD w/o DC",
    "kd_full": "Proposed KD",
}
DTYPES = {"f32": np.float32, "f64": np.float64}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 5
    weights: LossWeights = LossWeights()
    valid_fraction: float = 0.1
    patience: int = 5
    seeds: tuple = (0, 1, 2, 3, 4)
    precision: str = "f32"
    lr: float = 1e-3
    split_seed: int = 0
    cache_teacher: bool = False
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    @property
    def dtype(self):
        return DTYPES[self.precision]


def variant_weights(variant: str, weights: LossWeights) -> LossWeights:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "baseline":
        return replace(weights, lam=0.0, alpha=0.0, beta=0.0)
    if variant == "kd_st_only":
        return replace(weights, alpha=0.0, beta=0.0)
    if variant == "kd_no_uc":
        return replace(weights, alpha=0.0)
    if variant == "kd_no_dc":
        return replace(weights, beta=0.0)
    return weights


@dataclass
class ExperimentSpec:
    variant: str
    student: ModelConfig
    teacher_path: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant != "baseline" and self.teacher_path is None:
            raise ValueError("teacher checkpoint required")


@dataclass
class RunResult:
    """One trained model plus its curves; ``model`` holds the best-validation parameters."""

    model: HierarchicalLabeler
    seed: int
    best_epoch: int
    valid_accuracy: float
    train_loss: list = field(default_factory=list)
    valid_curve: list = field(default_factory=list)
    breakdowns: list = field(default_factory=list)
    test_accuracy: float | None = None

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "valid_accuracy": self.valid_accuracy,
            "test_accuracy": self.test_accuracy,
            "train_loss": self.train_loss,
            "valid_curve": self.valid_curve,
            "breakdowns": self.breakdowns,
        }


@dataclass
class MetricsReport:
    name: str
    runs: list = field(default_factory=list)  # RunResult.summary() dicts

    @property
    def accuracies(self) -> list[float]:
        return [r["test_accuracy"] for r in self.runs]

    @property
    def mean(self) -> float:
        acc = self.accuracies
        return float(sum(acc) / len(acc))

    @property
    def std(self) -> float:
        """Population standard deviation over seeds."""
        return float(np.std(np.asarray(self.accuracies, dtype=np.float64)))

    def to_dict(self) -> dict:
        return {"name": self.name, "accuracies": self.accuracies, "mean": self.mean, "std": self.std, "runs": self.runs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------


def count_correct(model: HierarchicalLabeler, dialogues, vocab: Vocabulary, labels: LabelSet, batch_size=16) -> tuple[int, int]:
    correct = total = 0
    for s in range(0, len(dialogues), batch_size):
        b = collate(dialogues[s : s + batch_size], vocab, labels)
        pred = np.argmax(forward(model, b.tokens, b.token_mask, b.utt_mask).o.data, axis=-1)
        correct += int(((pred == b.labels) & b.utt_mask).sum())
        total += int(b.utt_mask.sum())
    return correct, total


def evaluate_accuracy(model, dialogues, vocab, labels, batch_size=16) -> float:
    """Micro accuracy in percent: correct utterances over all utterances."""
    if len(dialogues) == 0:
        raise ValueError("empty test set")
    correct, total = count_correct(model, dialogues, vocab, labels, batch_size)
    return 100.0 * correct / total


# ---------------------------------------------------------------------------
# Training loop.
# ---------------------------------------------------------------------------


def check_compatible(teacher: HierarchicalLabeler, student: ModelConfig, weights: LossWeights) -> None:
    t = teacher.config
    if t.vocab_size != student.vocab_size or t.label_count != student.label_count:
        raise ValueError(
            f"teacher and student must share vocabulary and labels: teacher ({t.vocab_size}, {t.label_count}) "
            f"vs student ({student.vocab_size}, {student.label_count})"
        )
    if weights.alpha > 0 and t.d_model != student.d_model:
        raise ValueError(f"utterance vector widths differ: teacher {t.d_model} vs student {student.d_model}")
    if weights.beta > 0 and t.hidden != student.hidden:
        raise ValueError(f"dialogue state widths differ: teacher {t.hidden} vs student {student.hidden}")
    if t.M < student.M:
        raise ValueError(f"teacher dialogue depth {t.M} must be >= student depth {student.M}")


class TeacherCache:
    """Per-dialogue teacher tap points, computed once and re-padded per batch."""

    def __init__(self, teacher, dialogues, vocab, labels, batch_size=16):
        self.rows: dict[str, dict] = {}
        for s in range(0, len(dialogues), batch_size):
            chunk = dialogues[s : s + batch_size]
            b = collate(chunk, vocab, labels)
            tr = forward(teacher, b.tokens, b.token_mask, b.utt_mask)
            for n, d in enumerate(chunk):
                self.rows[d.id] = tr.rows(n)

    def trace(self, batch: Batch) -> ForwardTrace:
        N, T = batch.utt_mask.shape
        out = {}
        for key in ("s", "u", "v", "o"):
            width = self.rows[batch.ids[0]][key].shape[-1]
            arr = np.zeros((N, T, width), dtype=self.rows[batch.ids[0]][key].dtype)
            for n, did in enumerate(batch.ids):
                r = self.rows[did][key]
                arr[n, : r.shape[0]] = r
            out[key] = ad.Tensor(arr)
        return ForwardTrace(lengths=batch.lengths, **out)


def train_model(
    train: list[Dialogue],
    valid: list[Dialogue],
    vocab: Vocabulary,
    labels: LabelSet,
    model_config: ModelConfig,
    config: TrainConfig,
    seed: int,
    weights: LossWeights | None = None,
    teacher: HierarchicalLabeler | None = None,
    init_state: dict | None = None,
    on_step=None,
) -> RunResult:
    """Optimise one model with early stopping on validation accuracy."""
    weights = weights or LossWeights(lam=0.0, alpha=0.0, beta=0.0)
    uses_teacher = weights.lam > 0 or weights.alpha > 0 or weights.beta > 0
    if uses_teacher:
        if teacher is None:
            raise ValueError("teacher checkpoint required")
        check_compatible(teacher, model_config, weights)
    model = HierarchicalLabeler(model_config, seed=seed, dtype=config.dtype)
    if init_state is not None:
        model.load_state_dict(init_state)
    opt = RAdam(model.params, lr=config.lr)
    drop_rng = np.random.default_rng([seed, 7])
    cache = None
    if uses_teacher and config.cache_teacher:
        cache = TeacherCache(teacher, train, vocab, labels, config.eval_batch_size)

    best_acc = -1.0
    best_state = model.state_dict()
    best_epoch = 0
    stale = 0
    result = RunResult(model=model, seed=seed, best_epoch=0, valid_accuracy=0.0)
    for epoch in range(1, config.epochs + 1):
        batches = make_batches(train, config.batch_size, vocab, labels, seed=[seed, 1, epoch])
        losses = []
        sums: dict[str, float] = {}
        for step, batch in enumerate(batches):
            try:
                trace = forward(model, batch.tokens, batch.token_mask, batch.utt_mask, train=True, rng=drop_rng)
                t_trace = None
                if uses_teacher:
                    if cache is not None:
                        t_trace = cache.trace(batch)
                    else:
                        t_trace = forward(teacher, batch.tokens, batch.token_mask, batch.utt_mask)
                loss, parts = distillation_loss(
                    trace, t_trace, batch.labels, weights,
                    teacher_depth=teacher.config.M if teacher is not None else None,
                    student_depth=model_config.M,
                )
                if not math.isfinite(parts.combined):
                    raise FloatingPointError(f"loss is {parts.combined}")
                grads = ad.backward(loss, leaves=model.parameters())
                opt.step({name: grads[t] for name, t in model.params.items()})
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, step {step} (seed {seed}): {exc}") from exc
            if on_step is not None:
                on_step(epoch, step, parts)
            losses.append(parts.combined)
            for k, v in parts.to_dict().items():
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + v
        acc = evaluate_accuracy(model, valid, vocab, labels, config.eval_batch_size)
        result.train_loss.append(float(np.mean(losses)))
        result.valid_curve.append(acc)
        result.breakdowns.append({k: v / len(batches) for k, v in sorted(sums.items())})
        log.debug("seed %d epoch %d loss %.4f valid %.2f", seed, epoch, result.train_loss[-1], acc)
        if acc > best_acc:
            best_acc, best_epoch, stale = acc, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    result.best_epoch = best_epoch
    result.valid_accuracy = best_acc
    return result


def _split(dialogues, config: TrainConfig):
    return split_train_valid(dialogues, config.valid_fraction, config.split_seed)


def train_teacher(train_dialogues, test_dialogues, vocab, labels, model_config, config: TrainConfig, seed=None):
    """Hard-target training only; returns (RunResult, MetricsReport)."""
    seed = config.seeds[0] if seed is None else seed
    train, valid = _split(train_dialogues, config)
    res = train_model(train, valid, vocab, labels, model_config, config, seed)
    res.test_accuracy = evaluate_accuracy(res.model, test_dialogues, vocab, labels, config.eval_batch_size)
    return res, MetricsReport("teacher", [res.summary()])


def distill_student(train_dialogues, test_dialogues, vocab, labels, config: TrainConfig, variant: str,
                    student: ModelConfig, teacher: HierarchicalLabeler | None, seed: int, init_state=None) -> RunResult:
    """Train one student under ``variant``; the teacher is never modified."""
    weights = variant_weights(variant, config.weights)
    if variant != "baseline" and teacher is None:
        raise ValueError("teacher checkpoint required")
    if teacher is not None:
        teacher.freeze()
    train, valid = _split(train_dialogues, config)
    res = train_model(train, valid, vocab, labels, student, config, seed, weights=weights,
                      teacher=teacher if variant != "baseline" else None, init_state=init_state)
    res.test_accuracy = evaluate_accuracy(res.model, test_dialogues, vocab, labels, config.eval_batch_size)
    return res


def run_variant(train_dialogues, test_dialogues, vocab, labels, config, variant, student, teacher) -> MetricsReport:
    report = MetricsReport(variant)
    for seed in config.seeds:
        res = distill_student(train_dialogues, test_dialogues, vocab, labels, config, variant, student, teacher, seed)
        report.runs.append(res.summary())
    return report


# ---------------------------------------------------------------------------
# Ablation grid.
# ---------------------------------------------------------------------------


@dataclass
class AblationTable:
    teacher_accuracy: float | None
    students: list[str]
    variants: list[str]
    cells: dict = field(default_factory=dict)  # (variant, student) -> MetricsReport | str error

    def mean(self, variant, student) -> float | None:
        cell = self.cells.get((variant, student))
        return cell.mean if isinstance(cell, MetricsReport) else None

    def to_dict(self) -> dict:
        out = {"teacher_accuracy": self.teacher_accuracy, "students": self.students, "variants": self.variants, "cells": {}}
        for (variant, student), cell in sorted(self.cells.items()):
            key = f"{variant}/{student}"
            out["cells"][key] = cell.to_dict() if isinstance(cell, MetricsReport) else {"failed": cell}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def format(self) -> str:
        """Plain-text table: one row per variant, one column per student."""
        w0 = max(len(t) for t in list(ROW_TITLES.values()) + ["Teacher (common)"]) + 2
        head = "".ljust(w0) + "".join(s.rjust(16) for s in self.students)
        lines = [head, "-" * len(head)]
        tacc = "n/a" if self.teacher_accuracy is None else f"{self.teacher_accuracy:.2f}"
        lines.append("Teacher (common)".ljust(w0) + "".join(tacc.rjust(16) for _ in self.students))
        lines.append("-" * len(head))
        for v in self.variants:
            cells = []
            for s in self.students:
                cell = self.cells.get((v, s))
                if isinstance(cell, MetricsReport):
                    cells.append(f"{cell.mean:.2f}+-{cell.std:.2f}".rjust(16))
                else:
                    cells.append("failed".rjust(16))
            lines.append(ROW_TITLES[v].ljust(w0) + "".join(cells))
        return "\n".join(lines) + "\n"


def _ablation_job(args):
    train_d, test_d, vocab_tokens, label_list, config, variant, student, teacher_state, teacher_cfg, seed = args
    vocab, labels = Vocabulary(vocab_tokens), LabelSet(label_list)
    teacher = None
    if teacher_state is not None:
        teacher = HierarchicalLabeler(teacher_cfg, dtype=config.dtype)
        teacher.load_state_dict(teacher_state)
    try:
        res = distill_student(train_d, test_d, vocab, labels, config, variant, student, teacher, seed)
        return res.summary()
    except Exception as exc:  # recorded as a failed cell
        return {"error": f"{type(exc).__name__}: {exc}"}


def run_ablation(train_dialogues, test_dialogues, vocab, labels, config: TrainConfig, teacher: HierarchicalLabeler | None,
                 students: dict[str, ModelConfig], variants=VARIANTS, teacher_accuracy=None, workers=None) -> AblationTable:
    """Every variant x student config x seed.  Failed runs become failed cells."""
    if teacher_accuracy is None and teacher is not None:
        teacher_accuracy = evaluate_accuracy(teacher, test_dialogues, vocab, labels, config.eval_batch_size)
    workers = workers or int(os.environ.get("HKD_THREADS", "1"))
    t_state = teacher.state_dict() if teacher is not None else None
    t_cfg = teacher.config if teacher is not None else None
    jobs = []
    for v in variants:
        for sname, scfg in students.items():
            for seed in config.seeds:
                jobs.append(((v, sname), (train_dialogues, test_dialogues, vocab.tokens[2:], labels.labels, config, v, scfg,
                                          None if v == "baseline" else t_state, t_cfg, seed)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outputs = list(ex.map(_ablation_job, [j for _, j in jobs]))
    else:
        outputs = [_ablation_job(j) for _, j in jobs]
    table = AblationTable(teacher_accuracy, list(students), list(variants))
    grouped: dict = {}
    for (key, _), out in zip(jobs, outputs):
        grouped.setdefault(key, []).append(out)
    for key, runs in grouped.items():
        errors = [r["error"] for r in runs if "error" in r]
        table.cells[key] = errors[0] if errors else MetricsReport(f"{key[0]}/{key[1]}", runs)
    return table
