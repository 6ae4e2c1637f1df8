"""Command-line entry point: ``hkd <subcommand> [flags]``.

Every subcommand is a thin wrapper over the library.  Failures print a single
``error: <kind>: <message>`` line on stderr; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path


from hkd import checkpoint, corpus, trainer
from hkd.corpus import LabelSet, SyntheticSpec, Vocabulary
from hkd.losses import LossWeights
from hkd.model import ModelConfig

TEACHER_GEOMETRY = dict(L=2, M=2, d_model=64, heads=4, ff_units=256)
STUDENT_PRESETS = {
    "S1": dict(L=1, M=1, d_model=64, heads=4, ff_units=64),
    "S2": dict(L=2, M=2, d_model=64, heads=4, ff_units=128),
}


class UsageError(Exception):
    pass


def _seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="training corpus (JSON lines)")
    p.add_argument("--test", help="test corpus; accuracy is reported on it")
    p.add_argument("--labels", help="label-set file (defaults to first-seen order in --data)")
    p.add_argument("--vocab", help="vocabulary file (defaults to one built from --data)")
    p.add_argument("--out", help="write metrics JSON here")
    p.add_argument("--seeds", "--seed", dest="seeds", type=_seeds, default=(0, 1, 2, 3, 4))
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--tau", type=float, default=5.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--valid-fraction", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--precision", choices=sorted(trainer.DTYPES), default="f32")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--cache-teacher", action="store_true", help="precompute teacher traces once per run")


def _add_geometry_flags(p: argparse.ArgumentParser, defaults: dict) -> None:
    for name, flag in (("L", "--L"), ("M", "--M"), ("d_model", "--d-model"), ("heads", "--heads"), ("ff_units", "--ff-units")):
        p.add_argument(flag, dest=name, type=int, default=defaults[name])
    p.add_argument("--dropout", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hkd", description="Hierarchical dialogue labeler with hierarchical distillation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic call-scene corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dialogues", type=int, default=280)
    p.add_argument("--train", type=int, default=240, help="dialogues in train.jsonl; the rest go to test.jsonl")
    p.add_argument("--scenes", type=int, default=5)
    p.add_argument("--label-count", type=int, default=5)
    p.add_argument("--min-len", type=int, default=20)
    p.add_argument("--max-len", type=int, default=40)
    p.add_argument("--vocab-size", type=int, default=60)
    p.add_argument("--noise", type=float, default=0.1)

    p = sub.add_parser("train-teacher", help="train a teacher with the hard-target loss")
    _add_training_flags(p)
    _add_geometry_flags(p, TEACHER_GEOMETRY)
    p.add_argument("--save", required=True, help="checkpoint path")

    p = sub.add_parser("distill", help="train students under one ablation variant")
    _add_training_flags(p)
    _add_geometry_flags(p, STUDENT_PRESETS["S1"])
    p.add_argument("--teacher", help="teacher checkpoint (required unless --variant baseline)")
    p.add_argument("--variant", choices=sorted(trainer.CLI_VARIANTS), default="full")
    p.add_argument("--save", help="checkpoint path for the first seed's student")

    p = sub.add_parser("eval", help="micro accuracy of a checkpoint on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--precision", choices=sorted(trainer.DTYPES), default="f32")

    p = sub.add_parser("ablate", help="every variant x student preset x seed")
    _add_training_flags(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--students", default="S1,S2", help=f"comma list of presets {sorted(STUDENT_PRESETS)}")
    p.add_argument("--variants", default=",".join(trainer.CLI_VARIANTS))

    p = sub.add_parser("gradcheck", help="randomised gradient checks over all layers and losses")
    p.add_argument("--instances", type=int, default=104)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out")

    p = sub.add_parser("inspect-ckpt", help="print a checkpoint's config and tensor shapes")
    p.add_argument("--model", required=True)
    return parser


# ---------------------------------------------------------------------------


def _write_json(path, payload) -> None:
    if path:
        text = payload if isinstance(payload, str) else json.dumps(payload, indent=1, sort_keys=True) + "\n"
        Path(path).write_text(text, encoding="utf-8")


def _train_config(a) -> trainer.TrainConfig:
    weights = LossWeights(tau=a.tau, lam=a.lam, alpha=a.alpha, beta=a.beta)
    return trainer.TrainConfig(
        epochs=a.epochs, batch_size=a.batch_size, weights=weights, valid_fraction=a.valid_fraction,
        patience=a.patience, seeds=a.seeds, precision=a.precision, lr=a.lr, cache_teacher=a.cache_teacher,
    )


def _load_data(a, labels: LabelSet | None = None, vocab: Vocabulary | None = None):
    if labels is None and a.labels:
        labels = LabelSet.load(a.labels)
    train, labels = corpus.load_corpus(a.data, labels)
    test = []
    if a.test:
        test, _ = corpus.load_corpus(a.test, labels)
    if vocab is None:
        vocab = Vocabulary.load(a.vocab) if a.vocab else Vocabulary.build(train)
    return train, test, vocab, labels


def _model_config(a, vocab, labels) -> ModelConfig:
    return ModelConfig(L=a.L, M=a.M, d_model=a.d_model, heads=a.heads, ff_units=a.ff_units,
                       vocab_size=len(vocab), label_count=len(labels), dropout=a.dropout)


def _load_teacher(path, precision):
    model, vocab, labels, side = checkpoint.load_checkpoint(path, dtype=trainer.DTYPES[precision])
    return model.freeze(), vocab, labels, side


def cmd_gen_corpus(a) -> int:
    spec = SyntheticSpec(scenes=a.scenes, labels=a.label_count, dialogues=a.dialogues, min_len=a.min_len,
                         max_len=a.max_len, vocab_size=a.vocab_size, noise=a.noise, seed=a.seed)
    if not 0 < a.train < a.dialogues:
        raise UsageError(f"--train must be in (0, {a.dialogues})")
    dialogues, labels = corpus.generate_synthetic(spec)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = dialogues[: a.train], dialogues[a.train :]
    corpus.save_corpus(train, out / "train.jsonl")
    corpus.save_corpus(test, out / "test.jsonl")
    labels.save(out / "labels.txt")
    Vocabulary.build(train).save(out / "vocab.txt")
    print(json.dumps({"train": len(train), "test": len(test), "labels": list(labels), "dir": str(out)}))
    return 0


def _check_outputs(a) -> None:
    save = getattr(a, "save", None)
    if save and a.out and Path(a.out).resolve() in (Path(save).resolve(), checkpoint.sidecar_path(save).resolve()):
        raise UsageError(f"--out {a.out} would overwrite the checkpoint or its sidecar")


def cmd_train_teacher(a) -> int:
    _check_outputs(a)
    train, test, vocab, labels = _load_data(a)
    config = _train_config(a)
    mcfg = _model_config(a, vocab, labels)
    t0 = time.perf_counter()
    res, report = trainer.train_teacher(train, test or train, vocab, labels, mcfg, config)
    meta = {"seed": res.seed, "epoch": res.best_epoch, "valid_accuracy": res.valid_accuracy, "test_accuracy": res.test_accuracy}
    checkpoint.save_checkpoint(a.save, res.model, vocab, labels, metadata=meta)
    _write_json(a.out, report.to_json())
    print(json.dumps({"test_accuracy": res.test_accuracy, "best_epoch": res.best_epoch,
                      "seconds": round(time.perf_counter() - t0, 1), "checkpoint": a.save}))
    return 0


def cmd_distill(a) -> int:
    _check_outputs(a)
    variant = trainer.CLI_VARIANTS[a.variant]
    if variant != "baseline" and not a.teacher:
        raise UsageError("teacher checkpoint required")
    teacher = None
    vocab = labels = None
    if a.teacher:
        teacher, vocab, labels, _ = _load_teacher(a.teacher, a.precision)
    train, test, vocab, labels = _load_data(a, labels, vocab)
    config = _train_config(a)
    scfg = _model_config(a, vocab, labels)
    report = trainer.MetricsReport(variant)
    for i, seed in enumerate(config.seeds):
        res = trainer.distill_student(train, test or train, vocab, labels, config, variant, scfg,
                                      teacher if variant != "baseline" else None, seed)
        report.runs.append(res.summary())
        if i == 0 and a.save:
            meta = {"seed": seed, "epoch": res.best_epoch, "valid_accuracy": res.valid_accuracy, "variant": variant}
            checkpoint.save_checkpoint(a.save, res.model, vocab, labels, metadata=meta)
    _write_json(a.out, report.to_json())
    print(json.dumps({"variant": variant, "accuracies": report.accuracies, "mean": report.mean, "std": report.std}))
    return 0


def cmd_eval(a) -> int:
    model, vocab, labels, _ = checkpoint.load_checkpoint(a.model, dtype=trainer.DTYPES[a.precision])
    dialogues, _ = corpus.load_corpus(a.data, labels)
    acc = trainer.evaluate_accuracy(model, dialogues, vocab, labels)
    payload = {"accuracy": acc, "dialogues": len(dialogues)}
    _write_json(a.out, payload)
    print(json.dumps(payload))
    return 0


def cmd_ablate(a) -> int:
    teacher, vocab, labels, side = _load_teacher(a.teacher, a.precision)
    train, test, vocab, labels = _load_data(a, labels, vocab)
    config = _train_config(a)
    names = [s for s in a.students.split(",") if s]
    unknown = [s for s in names if s not in STUDENT_PRESETS]
    if unknown:
        raise UsageError(f"unknown student preset(s) {unknown}; choose from {sorted(STUDENT_PRESETS)}")
    try:
        variants = [trainer.CLI_VARIANTS[v] for v in a.variants.split(",") if v]
    except KeyError as exc:
        raise UsageError(f"unknown variant {exc.args[0]!r}") from None
    students = {n: ModelConfig(vocab_size=len(vocab), label_count=len(labels), **STUDENT_PRESETS[n]) for n in names}
    table = trainer.run_ablation(train, test or train, vocab, labels, config, teacher, students, variants)
    _write_json(a.out, table.to_json())
    sys.stdout.write(table.format())
    return 0


def cmd_gradcheck(a) -> int:
    from hkd.gradcheck import run_suite

    t0 = time.perf_counter()
    results = run_suite(a.instances, a.seed)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    payload = {"instances": len(results), "max_error": max(worst.values()), "per_case": worst,
               "seconds": round(time.perf_counter() - t0, 2), "tolerance": a.tolerance}
    _write_json(a.out, payload)
    for name, err in worst.items():
        print(f"{name:24s} {err:.3e}")
    print(json.dumps({k: payload[k] for k in ("instances", "max_error", "seconds")}))
    return 0 if payload["max_error"] <= a.tolerance else 1


def cmd_inspect(a) -> int:
    tensors = checkpoint.read_tensors(a.model)
    side = json.loads(checkpoint.sidecar_path(a.model).read_text(encoding="utf-8"))
    info = {
        "config": side["config"],
        "metadata": side.get("metadata", {}),
        "labels": side["labels"],
        "vocab_size": len(side["vocab"]) + 2,
        "parameters": int(sum(t.size for t in tensors.values())),
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
        "sha256": checkpoint.file_hash(a.model),
    }
    print(json.dumps(info, indent=1))
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "inspect-ckpt": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)  # exits 2 with usage on unknown input
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
