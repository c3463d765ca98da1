"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Times each kernel on shapes taken from a depth-4, base-32 U-Net at 64x64 and
then one full SGD step (forward + backward + update) on a batch of 16.
"""
import argparse
import json
import platform
import timeit

import numpy as np

from canopyseg import _kernels
from canopyseg import autodiff as ad
from canopyseg import model as M
from canopyseg.dataset import PatchSample


def kernel_cases(rng):
    x64 = rng.standard_normal((16, 32, 64, 64)).astype(np.float32)
    x8 = rng.standard_normal((16, 256, 8, 8)).astype(np.float32)
    w32 = (rng.standard_normal((32, 32, 3, 3)) * 0.05).astype(np.float32)
    w256 = (rng.standard_normal((256, 256, 3, 3)) * 0.02).astype(np.float32)
    b32, b256 = np.zeros(32, np.float32), np.zeros(256, np.float32)
    pred = rng.random(16 * 4096).astype(np.float32)
    tgt = (rng.random(16 * 4096) < 0.1).astype(np.uint8)
    return {
        "im2col 16x32x64x64": lambda: _kernels.im2col(x64, 3),
        "conv fwd 32->32 @64": lambda: _kernels.conv2d_forward(x64, w32, b32),
        "conv grad_in 32->32 @64": lambda: _kernels.conv2d_grad_input(x64, w32),
        "conv grad_w 32->32 @64": lambda: _kernels.conv2d_grad_weight(x64, x64, 3),
        "conv fwd 256->256 @8": lambda: _kernels.conv2d_forward(x8, w256, b256),
        "maxpool 16x32x64x64": lambda: _kernels.maxpool2x2(x64),
        "confusion 65536 px": lambda: _kernels.confusion_counts(pred, tgt, 0.85),
    }


def train_step_case(rng, config):
    net = M.build(config, seed=0)
    samples = [PatchSample(f"b{i}", rng.integers(0, 256, (64, 64, 3)), (rng.random((64, 64)) < 0.1))
               for i in range(16)]
    cfg = M.TrainConfig(learning_rate=1e-3, batch_size=16, epochs=1)
    return lambda: M.train(net, samples, cfg)


def best_of(fn, repeat):
    fn()  # warm caches and lazy imports
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()

    backends = _kernels.available_backends()
    if "cython" not in backends:
        print("compiled core not built; only the fallback can be timed")
    # backends alternate within each case so both see the same machine state
    rng = np.random.default_rng(0)
    cases = [(label, fn, args.repeat) for label, fn in kernel_cases(rng).items()]
    for label, cfg in (("train step depth2/base8", M.UNetConfig(depth=2, base_channels=8)),
                       ("train step depth4/base32", M.UNetConfig())):
        cases.append((label, train_step_case(rng, cfg), max(1, args.repeat // 2)))
    rows = {}
    for label, fn, repeat in cases:
        for name in backends:
            with _kernels.backend(name):
                rows.setdefault(label, {})[name] = best_of(fn, repeat)

    print(f"{platform.processor() or platform.machine()}, numpy {np.__version__}")
    print(f"{'case':<28}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, t in rows.items():
        line = f"{label:<28}" + "".join(f"{1e3 * t[b]:>10.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{t['python'] / t['cython']:>11.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({k: {b: v for b, v in t.items()} for k, t in rows.items()}, fh, indent=2)


if __name__ == "__main__":
    main()
