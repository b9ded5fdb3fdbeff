"""Time the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at
import time by ``FASTENET_PURE_NUMPY``.

    python3 benchmarks/bench_backends.py [--repeats 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from fastenet import _accel, kernels, netgraph, postprocess, training

_accel.set_strict_deterministic(True)
repeats = int(sys.argv[1])
rng = np.random.default_rng(0)
spec = netgraph.build_fastenet()
ws = netgraph.init_weights(spec, 0)
scene = rng.random((1, 1, 512, 1600), dtype=np.float32)
crops = rng.random((8, 1, 128, 128), dtype=np.float32)
target = (rng.random((8, 1, 16, 16)) > 0.8).astype(np.float32)
binary = (rng.random((64, 200)) < 0.3).astype(np.uint8)
feat = rng.random((8, 64, 64, 32), dtype=np.float32)


def infer():
    netgraph.forward(spec, ws, scene, "infer")


def train_step():
    y, tape = netgraph.forward(spec, ws, crops, "train")
    netgraph.backward(spec, ws, tape, 2 * (y - target))


def contours():
    for _ in range(20):
        postprocess.find_contours(binary)


def im2col():
    kernels.im2col(feat, 3, 1, 1)


def pool():
    kernels.maxpool2(feat)


out = {"backend": _accel.backend_name()}
for name, fn in [("infer 1600x512", infer), ("train step 8x128x128", train_step),
                 ("contours x20 200x64", contours), ("im2col 8x64x64x32", im2col),
                 ("maxpool 8x64x64x32", pool)]:
    fn()  # warm up, including any compilation
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    out[name] = min(ts)
print(json.dumps(out))
"""


def run(pure, repeats):
    env = dict(os.environ, FASTENET_PURE_NUMPY="1" if pure else "0")
    r = subprocess.run([sys.executable, "-c", WORKER, str(repeats)], env=env,
                       capture_output=True, text=True, check=True)
    return json.loads(r.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    nb, np_ = run(False, args.repeats), run(True, args.repeats)
    print(f"{'task':<24} {nb['backend']:>10} {np_['backend']:>10} {'ratio':>7}")
    for k in nb:
        if k == "backend":
            continue
        print(f"{k:<24} {nb[k] * 1e3:>8.1f}ms {np_[k] * 1e3:>8.1f}ms {np_[k] / nb[k]:>6.2f}x")


if __name__ == "__main__":
    main()
