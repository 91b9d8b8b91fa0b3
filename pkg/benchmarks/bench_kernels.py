"""Time every hot kernel under the compiled and the numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each case prints the best-of-``repeat`` wall time per backend, the speed-up
and the largest relative difference between the two results.
"""

from __future__ import annotations

import argparse
import json
import platform
import timeit

import numpy as np

from mdnkit import kernels


def cases(rng):
    K, d, B = 8, 3, 256
    raw = rng.normal(size=(B, K * (1 + 2 * d)))
    y = rng.normal(size=(B, d))
    X, Y = rng.normal(size=(2000, 3)), rng.normal(size=(2000, 3))
    scales = np.geomspace(0.1, 50, 64)
    keep20 = np.round(np.linspace(0, 5000, 20)).astype(np.int64)
    keep11 = np.round(np.linspace(0, 2000, 11)).astype(np.int64)
    x0, r = rng.uniform(-2, 2, 1000), rng.choice([-1.5, -0.75, 0.0, 0.75, 1.5], 1000)
    s0 = np.concatenate([rng.uniform(-0.2, 0.2, (1000, 2)), np.zeros((1000, 2))], axis=1)
    active = np.ones((1000, 3))
    centers = np.array([[0.0, 1.0], [-0.8660254037844386, -0.5], [0.8660254037844386, -0.5]])
    l0 = np.array([0.0, 0.0, 24.5]) + rng.normal(size=(10, 3))
    keep_l = np.arange(500, dtype=np.int64) * 20
    T, Bg, H = 100, 5, 128
    gi = rng.normal(size=(T, Bg, 3 * H))
    h0 = np.zeros((Bg, H))
    Wh, bh, bn = rng.normal(size=(H, 3 * H)) / np.sqrt(H), np.zeros(3 * H), np.zeros(H)
    dhs = rng.normal(size=(T, Bg, H))
    n = 75_000
    p, g = rng.normal(size=n), rng.normal(size=n)
    xg = rng.normal(size=128 * 256)

    def gru_fb(k):
        hs, cache = k.gru_forward(gi, h0, Wh, bh, bn)
        return k.gru_backward(dhs, hs, cache, Wh)[0]

    def adamw(k):
        q, m, v = p.copy(), np.zeros(n), np.zeros(n)
        k.adamw_update(q, g, m, v, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8, 0.01)
        return q

    return {
        "mdn_nll  B=256 K=8 d=3": lambda k: k.mdn_nll(raw, y, K, d, 1e-6)[1],
        "rbf_sums 2000x2000x64": lambda k: k.rbf_sums(X, Y, scales, False),
        "euler_saddle 1000x5000": lambda k: k.euler_saddle(x0, r, 0.001, 5000, 10.0, keep20),
        "euler_gravity 1000x2000": lambda k: k.euler_gravity(s0, active, centers, 100.0, 10.0, 1e-6, 0.0005,
                                                            2000, keep11),
        "dopri5_lorenz 10x10000": lambda k: k.dopri5_lorenz(l0, 10.0, 28.0, 8 / 3, 0.001, 10_000, keep_l),
        "gru fwd+bwd T=100 H=128": gru_fb,
        "adamw 75k params": adamw,
        "gelu fwd 32k": lambda k: k.gelu_fwd(xg)[0],
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", metavar="PATH", help="also write the results as JSON")
    args = ap.parse_args(argv)

    impls = kernels.backends()
    if "compiled" not in impls:
        print("compiled extension not built; timing the numpy backend only")
    results = []
    print(f"{'kernel':<26}" + "".join(f"{name:>12}" for name in impls) + f"{'speed-up':>10}{'max rel diff':>14}")
    for label, fn in cases(np.random.default_rng(0)).items():
        times, outs = {}, {}
        for name, impl in impls.items():
            outs[name] = np.asarray(fn(impl))
            times[name] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
        row = {"kernel": label, "seconds": times}
        line = f"{label:<26}" + "".join(f"{times[n] * 1e3:>10.2f}ms" for n in impls)
        if "compiled" in impls:
            a, b = outs["compiled"], outs["python"]
            row["speedup"] = times["python"] / times["compiled"]
            row["max_rel_diff"] = float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))
            line += f"{row['speedup']:>9.1f}x{row['max_rel_diff']:>14.1e}"
        results.append(row)
        print(line)
    if args.json:
        meta = {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine()}
        with open(args.json, "w") as fh:
            json.dump({"meta": meta, "results": results}, fh, indent=2)


if __name__ == "__main__":
    main()
