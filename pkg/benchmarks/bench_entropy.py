"""Time the compiled and pure-Python entropy coders on the same scans.

    python3 benchmarks/bench_entropy.py [--images 8] [--repeat 3]
"""

import argparse
import time

import numpy as np

from evit.jpeg import kernels, quantized_coefficients
from evit.synth import texture_corpus


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    images, _ = texture_corpus((args.images + 2) // 3, seed=0, h=128, w=192)
    grids = [quantized_coefficients(im).coefficients for im in images[: args.images]]
    scans = [kernels.encode_scan(g) for g in grids]
    n_blocks = sum(g.shape[1] for g in grids) * 3
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"{len(grids)} scans, {n_blocks} blocks, {sum(map(len, scans))} bytes")
    print(f"{'backend':<8} {'encode s':>10} {'decode s':>10} {'blocks/s':>12}")
    results = {}
    for b in backends:
        enc = best_of(lambda: [kernels.encode_scan(g, backend=b) for g in grids], args.repeat)
        dec = best_of(lambda: [kernels.decode_scan(s, g.shape[1], backend=b) for s, g in zip(scans, grids)], args.repeat)
        results[b] = (enc, dec)
        print(f"{b:<8} {enc:>10.4f} {dec:>10.4f} {n_blocks / (enc + dec):>12.0f}")
    if len(results) == 2:
        (pe, pd), (ce, cd) = results["python"], results["cython"]
        print(f"speed-up: encode x{pe / ce:.1f}, decode x{pd / cd:.1f}")
        for g, s in zip(grids, scans):
            assert kernels.encode_scan(g, backend="cython") == kernels.encode_scan(g, backend="python") == s
            c, r = kernels.decode_scan(s, g.shape[1], backend="cython")
            assert np.array_equal(c, g) and np.array_equal(r, kernels.decode_scan(s, g.shape[1], backend="python")[1])


if __name__ == "__main__":
    main()
