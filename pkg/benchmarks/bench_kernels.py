"""Compare the compiled and pure-numpy convolution backends.

Runs the forward/backward convolution kernels and one full training step in a
subprocess per backend (the backend is chosen at import time from the
FEWSEG_BACKEND environment variable), then prints a side-by-side table.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

WORKER = """
import json, os, time
import numpy as np

import fewseg.backend
from fewseg.kernels import conv2d_forward, conv2d_backward_input, conv2d_backward_weight

repeats = int(os.environ["BENCH_REPEATS"])
rng = np.random.default_rng(0)
x = rng.normal(size=(16, 32, 32))
w = rng.normal(size=(32, 16, 3, 3))
b = rng.normal(size=32)
y = conv2d_forward(x, w, b, 1, 1)  # warm-up (triggers any compilation)
gy = rng.normal(size=y.shape)
conv2d_backward_input(gy, w, x.shape, 1, 1)
conv2d_backward_weight(gy, x, w.shape, 1, 1)

def bench(fn):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3  # best-of ms

results = {
    "backend": fewseg.backend.BACKEND,
    "forward_ms": bench(lambda: conv2d_forward(x, w, b, 1, 1)),
    "backward_input_ms": bench(lambda: conv2d_backward_input(gy, w, x.shape, 1, 1)),
    "backward_weight_ms": bench(lambda: conv2d_backward_weight(gy, x, w.shape, 1, 1)),
}

from fewseg.harness import RunConfig, build_dataset
from fewseg.encoder import as_tensors, encode, gradient_of, init_params
from fewseg.episodes import sample_episode
from fewseg.adaptor import train_step_loss
from fewseg.protos import shrink_mask

cfg = RunConfig()
ds = build_dataset(cfg, "source")
enc_cfg = cfg.encoder_config()
params = init_params(enc_cfg, seed=0)
ep = sample_episode(ds, 1, np.random.default_rng(0), feature_shape=cfg.feature_shape())

def step():
    params_t = as_tensors(params)
    f_s = encode(ep.support[0][0], params_t, enc_cfg)
    m_s = shrink_mask(ep.support[0][1], f_s.shape[1:])
    f_q = encode(ep.query_image, params_t, enc_cfg)
    m_q = shrink_mask(ep.query_mask, f_q.shape[1:])
    loss, _ = train_step_loss(f_s, m_s, f_q, m_q)
    gradient_of(loss, params_t)

step()  # warm-up
results["train_step_ms"] = bench(step)
print(json.dumps(results))
"""


def run_backend(backend: str, repeats: int) -> dict:
    env = dict(os.environ, FEWSEG_BACKEND=backend, BENCH_REPEATS=str(repeats))
    out = subprocess.run(
        [sys.executable, "-c", WORKER], env=env, capture_output=True, text=True
    )
    if out.returncode != 0:
        raise RuntimeError(f"{backend} benchmark failed:\n{out.stderr}")
    return json.loads(out.stdout.splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20,
                        help="timing repeats per kernel (best-of is reported)")
    args = parser.parse_args()

    rows = []
    for backend in ("numpy", "numba"):
        print(f"benchmarking {backend} backend ...", flush=True)
        t0 = time.perf_counter()
        rows.append(run_backend(backend, args.repeats))
        print(f"  done in {time.perf_counter() - t0:.1f}s (includes startup/compile)")

    keys = ["forward_ms", "backward_input_ms", "backward_weight_ms", "train_step_ms"]
    header = f"{'kernel':<20} " + " ".join(f"{r['backend']:>10}" for r in rows) + f" {'speedup':>9}"
    print()
    print(header)
    print("-" * len(header))
    for key in keys:
        vals = [r[key] for r in rows]
        speedup = vals[0] / vals[1] if vals[1] else float("inf")
        print(f"{key:<20} " + " ".join(f"{v:>9.3f}m" for v in vals) + f" {speedup:>8.1f}x")


if __name__ == "__main__":
    main()
