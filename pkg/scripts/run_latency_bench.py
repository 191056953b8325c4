"""Latency under the accuracy-table protocol: mean over 50,000 timed
inferences after 1,000 untimed warmup runs, single process, fixed input."""

import argparse
import sys

import numpy as np

from mesocast.data import NUM_SEGMENTS
from mesocast.evaluate import bench_latency
from mesocast.models import build_model


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iters", type=int, default=50_000)
    parser.add_argument("--warmup", type=int, default=1_000)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    window = rng.uniform(0.1, 1.0, (8, NUM_SEGMENTS))
    for kind, horizon in (("lstm", 1), ("sa-lstm", 1), ("all-at-once", 3), ("nstep", 3)):
        model = build_model(kind, s=8, hidden=64, attn_width=16, horizon=horizon, seed=0)
        ms = bench_latency(model, window, warmup=args.warmup, iters=args.iters)
        print(f"{kind:12s} mean {ms:.4f} ms")
    return 0


if __name__ == "__main__":
    sys.exit(main())
