"""Time the numba kernels against their numpy fallbacks.

Each backend runs in its own interpreter so ``AASV_NUMBA`` takes effect at
import time.  Usage: ``python3 benchmarks/bench_kernels.py [--repeat N]``.
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, timeit
import numpy as np
from aasv import _kernels as K
from aasv.corpus import UtteranceSpec, gen_speaker, synth_utterance
from aasv.encoder import Encoder, embed_many

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
x = rng.normal(size=(16, 64, 198)).astype(np.float32)
cols = K.unfold1d(x, 3, 2)
wav = rng.normal(size=48000)
spk = gen_speaker("adult", 0.0, rng, "a")
feats = [rng.normal(size=(198, 80)).astype(np.float32) for _ in range(32)]
enc = Encoder(seed=0)
cases = {
    "unfold1d (16x64x198, w3 d2)": lambda: K.unfold1d(x, 3, 2),
    "fold1d (16x64x198, w3 d2)": lambda: K.fold1d(cols, 64, 3, 2),
    "resonate (3 s)": lambda: K.resonate(wav, 800.0, 100.0, 16000),
    "synth_utterance (3 s)": lambda: synth_utterance(spk, UtteranceSpec("u", "a", 3.0, -40.0, 1)),
    "embed 32 utterances": lambda: embed_many(feats, enc),
}
out = {"backend": K.backend()}
for name, fn in cases.items():
    fn()  # warm-up, includes jit compilation
    out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
print(json.dumps(out))
"""


def run_backend(flag: str, repeat: int) -> dict:
    env = dict(os.environ, AASV_NUMBA=flag, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(res.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    fast = run_backend("1", args.repeat)
    slow = run_backend("0", args.repeat)
    print(f"{'case':32s} {fast['backend']:>10s} {slow['backend']:>10s} {'speedup':>8s}")
    for name in fast:
        if name == "backend":
            continue
        a, b = fast[name], slow[name]
        print(f"{name:32s} {a * 1e3:8.2f}ms {b * 1e3:8.2f}ms {b / a:7.2f}x")


if __name__ == "__main__":
    main()
