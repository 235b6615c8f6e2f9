"""Compiled vs NumPy kernels, per kernel and for one training step.

    python benchmarks/bench_kernels.py [--repeat 5] [--number 50]

The per-kernel table calls both implementations directly. The training-step
rows run a subprocess per backend (``IADA_PURE_PYTHON=1`` forces NumPy), since
the backend is chosen once at import.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from iada.numeric import _pykernels as py

try:
    from iada.numeric import _ckernels as cc
except ImportError:
    cc = None

STEP_SNIPPET = """
import json, time, numpy as np
from iada import numeric as nm
from iada.numeric import kernels
from iada.backbone import Backbone, BackboneConfig
from iada.harness import AdamW, batch_loss
from iada.tasks import TaskSpec, make_dataset
nm.set_precision(32)
m = Backbone(BackboneConfig(), seed=0)
b = make_dataset(TaskSpec(kind="composition"), 32)
opt = AdamW([(m.params, 1e-3)])
times = []
for i in range({steps}):
    t0 = time.perf_counter()
    loss = batch_loss(m, b)
    opt.zero_grad(); loss.backward(); opt.step()
    times.append(time.perf_counter() - t0)
print(json.dumps({{"backend": kernels.BACKEND, "ms": 1000 * min(times[2:])}}))
"""


def kernel_cases(dtype, r):
    x = r.normal(size=(768, 256)).astype(dtype)
    g = r.normal(size=x.shape).astype(dtype)
    # attention scores: batch 32 x 4 heads x 24 queries over 24 keys, causal
    s = r.normal(size=(32 * 4 * 24, 24)).astype(dtype)
    mask = np.ascontiguousarray(np.broadcast_to(np.tril(np.ones((24, 24), bool)), (128, 24, 24))).reshape(-1, 24)
    h = r.normal(size=(768, 64)).astype(dtype)
    p = py.softmax_forward(s, mask)
    xhat, rstd = py.layernorm_forward(h, 1e-5)
    return [
        ("gelu_forward", (x,)),
        ("gelu_backward", (x, g)),
        ("softmax_forward", (s, mask)),
        ("softmax_backward", (p, s)),
        ("layernorm_forward", (h, 1e-5)),
        ("layernorm_backward", (h, xhat, rstd)),
    ]


def bench_kernels(repeat, number):
    r = np.random.default_rng(0)
    print(f"{'kernel':<20} {'dtype':<8} {'numpy us':>10} {'compiled us':>12} {'speedup':>8}")
    for dtype in (np.float32, np.float64):
        for name, args in kernel_cases(dtype, r):
            t_py = min(timeit.repeat(lambda: getattr(py, name)(*args), number=number, repeat=repeat)) / number
            if cc is None:
                print(f"{name:<20} {dtype.__name__:<8} {1e6 * t_py:>10.1f} {'n/a':>12}")
                continue
            t_c = min(timeit.repeat(lambda: getattr(cc, name)(*args), number=number, repeat=repeat)) / number
            print(f"{name:<20} {dtype.__name__:<8} {1e6 * t_py:>10.1f} {1e6 * t_c:>12.1f} {t_py / t_c:>7.2f}x")


def bench_step(steps):
    rows = []
    for pure in ("1", "0"):
        env = dict(os.environ, IADA_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        rows.append(json.loads(out.stdout.strip().splitlines()[-1]))
    print(f"\ntraining step (d=64, 8 layers, batch 32, 32-bit)")
    for row in rows:
        print(f"  {row['backend']:<9} {row['ms']:7.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=50)
    ap.add_argument("--steps", type=int, default=12)
    args = ap.parse_args()
    bench_kernels(args.repeat, args.number)
    bench_step(args.steps)


if __name__ == "__main__":
    main()
