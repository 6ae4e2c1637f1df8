"""Compare the compiled LSTM recurrence with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times the fused LSTM forward + backward at a few shapes, then one full
training step of the default student geometry, under each backend.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from hkd import kernels
from hkd import autodiff as ad
from hkd.corpus import SyntheticSpec, Vocabulary, collate, generate_synthetic
from hkd.losses import LossWeights, distillation_loss
from hkd.model import HierarchicalLabeler, ModelConfig, forward

SHAPES = [(5, 30, 64, 64), (5, 40, 64, 64), (16, 40, 64, 128)]  # (B, T, D, H)


def lstm_case(B, T, D, H, dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(B, T, D)).astype(dtype)
    w_ih = (rng.normal(size=(D, 4 * H)) / np.sqrt(D)).astype(dtype)
    w_hh = (rng.normal(size=(H, 4 * H)) / np.sqrt(H)).astype(dtype)
    b = np.zeros(4 * H, dtype)
    gh = rng.normal(size=(B, T, H)).astype(dtype)

    def run():
        h, cache = kernels.lstm_forward(x, w_ih, w_hh, b)
        kernels.lstm_backward(gh, x, w_ih, w_hh, cache)

    return run


def train_step_case(dtype):
    dialogues, labels = generate_synthetic(SyntheticSpec(dialogues=5, seed=0))
    vocab = Vocabulary.build(dialogues)
    cfg = ModelConfig(L=1, M=1, d_model=64, heads=4, ff_units=64, vocab_size=len(vocab), label_count=len(labels))
    model = HierarchicalLabeler(cfg, seed=0, dtype=dtype)
    batch = collate(dialogues, vocab, labels)

    def run():
        tr = forward(model, batch.tokens, batch.token_mask, batch.utt_mask, train=True)
        loss, _ = distillation_loss(tr, None, batch.labels, LossWeights(lam=0, alpha=0, beta=0))
        ad.backward(loss, leaves=model.parameters())

    return run


def best_of(fn, repeat, number):
    fn()  # warm-up
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not kernels.compiled_available():
        print("compiled extension not built; only the fallback can be timed", file=sys.stderr)
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    rows = []
    cases = [(f"lstm B={B} T={T} D={D} H={H} {np.dtype(dt).name}", lstm_case(B, T, D, H, dt), 20)
             for (B, T, D, H) in SHAPES for dt in (np.float32, np.float64)]
    cases += [(f"train step S1 {np.dtype(dt).name}", train_step_case(dt), 3) for dt in (np.float32, np.float64)]
    print(f"{'case':42s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn, number in cases:
        times = {}
        for b in backends:
            kernels.use_backend(b)
            times[b] = best_of(fn, args.repeat, number)
        line = f"{name:42s}" + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{times['python'] / times['cython']:11.2f}x"
        print(line)
        rows.append({"case": name, **{f"{b}_seconds": t for b, t in times.items()}})
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
