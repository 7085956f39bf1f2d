"""Wall-clock comparison of the numba and numpy SGDA kernels.

    python3 benchmarks/bench_kernels.py [--T 4000] [--widths 64 512 4096] [--repeat 3]

Both backends run the same two-layer game on the default discrete instance
and must produce matching weights; compilation time is excluded.
"""

import argparse
import time

import numpy as np

from asem import kernels
from asem.generators import discrete_iv_design, gen_discrete
from asem.nn_models import TwoLayerConfig, init_network


def run(fn, th, om, batch, T, eta=0.01, alpha=0.05):
    W, V = th.matrix().copy(), om.matrix().copy()
    stride = max(1, T // 512)
    n_snap = T // stride
    log = np.zeros((T, 6))
    sf, su = np.zeros((n_snap,) + W.shape), np.zeros((n_snap,) + V.shape)
    t0 = time.perf_counter()
    status = fn(
        W, th.matrix(th.init_weights).copy(), th.output_signs, V, om.matrix(om.init_weights).copy(), om.output_signs,
        batch.coefs, batch.points, batch.x2, batch.b_tilde, batch.ridge_index,
        alpha, eta, 10.0, 10.0, T, 1, stride, log, sf, su,
    )
    assert status == -1
    return time.perf_counter() - t0, W


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--T", type=int, default=4000)
    p.add_argument("--widths", type=int, nargs="+", default=[64, 512, 4096])
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    design = discrete_iv_design()
    batch = gen_discrete(design, args.T, 0)
    print(f"{'m':>6} {'numba_s':>10} {'numpy_s':>10} {'speedup':>8}")
    for m in args.widths:
        cfg = TwoLayerConfig(design.dim, m, 10.0)
        th, om = init_network("two_layer", cfg, 1), init_network("two_layer", cfg, 2)
        run(kernels.sgda_two_layer_numba, th, om, batch, 2)  # compile
        tn = min(run(kernels.sgda_two_layer_numba, th, om, batch, args.T)[0] for _ in range(args.repeat))
        tp = min(run(kernels.sgda_two_layer_numpy, th, om, batch, args.T)[0] for _ in range(args.repeat))
        wn = run(kernels.sgda_two_layer_numba, th, om, batch, args.T)[1]
        wp = run(kernels.sgda_two_layer_numpy, th, om, batch, args.T)[1]
        np.testing.assert_allclose(wn, wp, rtol=1e-9, atol=1e-12)
        print(f"{m:>6} {tn:>10.4f} {tp:>10.4f} {tp / tn:>8.1f}")


if __name__ == "__main__":
    main()
