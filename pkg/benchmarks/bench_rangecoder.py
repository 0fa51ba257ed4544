"""Compiled vs pure-Python range-coder kernels on identical symbol streams.

    python benchmarks/bench_rangecoder.py [--symbols 200000] [--repeat 3]

Reports two timings per kernel: the kernel alone (frequency tables built
once beforehand) and end to end through range_encode/range_decode, where
table construction in numpy is shared by both kernels.  Also checks that
the kernels emit identical bytes.
"""
import argparse
import time

import numpy as np

from vrlab.entropy import BACKEND, GaussianCond, cdf_tables, kernels, range_decode, range_encode


def best_of(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def kernel_only(backend, q, tables):
    enc_cls, dec_cls = kernels(backend)
    qmin = int(q.min())

    def encode():
        enc = enc_cls()
        for rows, cum in tables:
            s = q[rows] - qmin
            i = np.arange(s.size)
            enc.encode(cum[i, s], cum[i, s + 1] - cum[i, s])
        return enc.finish()

    def decode(data):
        dec = dec_cls(data)
        return np.concatenate([dec.decode(cum) for _, cum in tables]) + qmin

    return encode, decode


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--symbols", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    n = args.symbols
    sigma = np.exp(rng.uniform(-1.0, 2.5, size=n))
    q = np.rint(sigma * rng.standard_normal(n)).astype(np.int64)
    model = GaussianCond(0.0, sigma)
    t_tab, tables = best_of(lambda: list(cdf_tables(model, q.shape, 1.0, int(q.min()), int(q.max()))), 1)

    backends = ["python"] + (["cython"] if BACKEND == "cython" else [])
    if BACKEND != "cython":
        print("compiled kernel not built; timing the pure-Python kernel only")
    kern, full, payloads = {}, {}, {}
    for b in backends:
        encode, decode = kernel_only(b, q, tables)
        te, data = best_of(encode, args.repeat)
        td, back = best_of(lambda: decode(data), args.repeat)
        if not np.array_equal(back, q):
            raise SystemExit(f"{b}: kernel round trip failed")
        kern[b] = (te, td)
        fe, bs = best_of(lambda: range_encode(q, model, 1.0, backend=b), args.repeat)
        fd, back = best_of(lambda: range_decode(bs, model, 1.0, backend=b), args.repeat)
        if not np.array_equal(back, q) or bs.payload != data:
            raise SystemExit(f"{b}: end-to-end round trip failed")
        full[b] = (fe, fd)
        payloads[b] = data

    if len(payloads) == 2 and payloads["python"] != payloads["cython"]:
        raise SystemExit("kernels disagree on the coded bytes")
    print(f"{n} symbols, {8 * len(payloads[backends[0]]) / n:.3f} bits/symbol, "
          f"table construction {t_tab:.3f}s")
    print(f"{'':<22} {'encode s':>9} {'decode s':>9} {'enc Msym/s':>11} {'dec Msym/s':>11}")
    for label, res in (("kernel", kern), ("end to end", full)):
        for b, (te, td) in res.items():
            print(f"{label + ' ' + b:<22} {te:9.3f} {td:9.3f} {n / te / 1e6:11.3f} {n / td / 1e6:11.3f}")
    if len(backends) == 2:
        for label, res in (("kernel", kern), ("end to end", full)):
            (pe, pd), (ce, cd) = res["python"], res["cython"]
            print(f"speedup {label}: encode {pe / ce:.1f}x, decode {pd / cd:.1f}x")


if __name__ == "__main__":
    main()
