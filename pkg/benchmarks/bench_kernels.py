"""Time the numba kernels against their numpy fallbacks.

Each kernel runs on the shapes the scorer sees in training (attention rows
of a 64-caption batch) and in selection (CAS scores over a test split).
A second section times one VE training epoch end to end under each backend
in a subprocess, since the backend is fixed at import time by
``SAR_DISABLE_NUMBA``.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sar import _kernels as K


def cases(rng):
    att = rng.normal(size=(64, 2, 15, 7))
    mask = np.ones(att.shape, dtype=bool)
    mask[..., 5:] = rng.uniform(size=mask[..., 5:].shape) > 0.3
    y = K.softmax_lastaxis_numpy(att, mask)
    z = rng.normal(scale=4, size=64 * 12)
    t = rng.uniform(size=z.shape)
    scores = rng.normal(size=(680, 20))
    return {
        "softmax (64x2x15x7)": (K.softmax_lastaxis_numba, K.softmax_lastaxis_numpy, (att, mask)),
        "softmax backward": (K.softmax_backward_numba, K.softmax_backward_numpy, (y, rng.normal(size=y.shape))),
        "bce logits (768)": (K.bce_logits_numba, K.bce_logits_numpy, (z, t)),
        "sigmoid (768)": (K.sigmoid_numba, K.sigmoid_numpy, (z,)),
        "top-12 of 680x20": (K.topn_rows_numba, K.topn_rows_numpy, (scores, 12)),
    }


EPOCH = """
import time
from sar import ve
from sar.config import CasParams
from sar.experiment import build_world, fit_cas
from sar.captions import StrategyPlan, build_captions, build_category_dict
from sar import cas
from sar.synthworld import WorldConfig
w = build_world(WorldConfig(num_images=600))
m = fit_cas(w, CasParams(epochs=5))
tr = w.split("train")
data = build_captions(tr, cas.candidate_sets(m, tr, w.features, 12), StrategyPlan("R", "R"), "train", build_category_dict(tr))
model = ve.init_model(ve.VeArch(), ve.build_token_vocab(data.records))
ve.train_ve(model, data.records[:64], w.features, ve.VeTrainConfig(epochs=1))  # compile / warm caches
t = time.perf_counter()
ve.train_ve(model, data, w.features, ve.VeTrainConfig(epochs=1))
print(time.perf_counter() - t)
"""


def epoch_seconds(disable):
    env = dict(os.environ, SAR_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':24s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}  agree")
    for name, (fast, slow, inputs) in cases(rng).items():
        a, b = fast(*inputs), slow(*inputs)  # first call compiles
        agree = bool(np.allclose(a, b, rtol=1e-12, atol=1e-14))
        number = 200
        tf = min(timeit.repeat(lambda: fast(*inputs), number=number, repeat=args.repeat)) / number * 1e6
        ts = min(timeit.repeat(lambda: slow(*inputs), number=number, repeat=args.repeat)) / number * 1e6
        rows.append({"kernel": name, "numba_us": tf, "numpy_us": ts, "agree": agree})
        print(f"{name:24s} {tf:10.1f} {ts:10.1f} {ts / tf:7.2f}x  {agree}")
    if not args.skip_epoch:
        jit, ref = epoch_seconds(False), epoch_seconds(True)
        rows.append({"kernel": "VE epoch (end to end)", "numba_s": jit, "numpy_s": ref})
        print(f"{'VE train epoch':24s} {jit:9.2f}s {ref:9.2f}s {ref / jit:7.2f}x")
    print(json.dumps(rows))


if __name__ == "__main__":
    main()
