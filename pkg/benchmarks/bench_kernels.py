"""Compiled vs pure-numpy kernels, plus one end-to-end attack step.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints the median wall time per call for every available backend and the
speedup of the compiled one.
"""

import argparse
import statistics
import time

import numpy as np

from ramlab import kernels
from ramlab.attacks import AttackSpec, attack_run
from ramlab.attention import AttentionConfig
from ramlab.data import DatasetSpec, generate_dataset, make_patch_mask
from ramlab.model import SegModelConfig, model_init
from ramlab.rng import RngState
from ramlab.targets import permute_target


def timed(fn, repeat):
    fn()
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def cases():
    rs = np.random.default_rng(0)
    att = rs.normal(size=(16, 2, 64, 64))      # batch x heads x tokens x tokens
    grad = rs.normal(size=att.shape)
    probs = kernels.softmax_lastaxis(att)
    act = rs.normal(size=(16, 64, 64))
    gain, bias = np.ones(64), np.zeros(64)
    _, xhat, rstd = kernels.layernorm_forward(act, gain, bias, 1e-5)

    img, gt = generate_dataset(DatasetSpec(1), 0)[0]
    model = model_init(SegModelConfig(attention=AttentionConfig(mode="ram")), 0)
    target = permute_target(gt, 8, RngState(1))
    mask = make_patch_mask(32, 32, 8)
    spec = AttackSpec("dag", steps=5)

    return {
        "softmax fwd": lambda: kernels.softmax_lastaxis(att),
        "softmax bwd": lambda: kernels.softmax_lastaxis_backward(probs, grad),
        "saturate fwd": lambda: kernels.saturate_forward(att),
        "layernorm fwd": lambda: kernels.layernorm_forward(act, gain, bias, 1e-5),
        "layernorm bwd": lambda: kernels.layernorm_backward(act, xhat, rstd, gain),
        "gelu fwd": lambda: kernels.gelu_forward(act),
        "attack x5 (ram)": lambda: attack_run(model, img, gt, target, mask, spec, RngState(2),
                                              evaluate_result=False),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = kernels.available_backends()
    before = kernels.BACKEND
    table = {}
    for name in backends:
        kernels.use_backend(name)
        for label, fn in cases().items():
            table.setdefault(label, {})[name] = timed(fn, args.repeat)
    kernels.use_backend(before)

    head = f"{'kernel':<18}" + "".join(f"{b:>12}" for b in backends)
    if "cython" in backends:
        head += f"{'speedup':>10}"
    print(head)
    for label, row in table.items():
        line = f"{label:<18}" + "".join(f"{row[b] * 1e3:>10.3f}ms" for b in backends)
        if "cython" in backends:
            line += f"{row['python'] / row['cython']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
