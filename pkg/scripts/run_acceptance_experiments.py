"""Populate the results/ cache used by tests/test_acceptance.py.

Runs cheapest experiments first so partial progress is still useful.  On one
core the full set takes roughly two hours; rerunning is a no-op once cached.
"""
import argparse
import sys
import time

from ckrdduq import experiments as ex

SEEDS = range(5)
ESS_RATIO_SEEDS = range(3)
MIXTURE_DIMS = (8, 12, 14)
MIXTURE_SIZES = (200_000, 400_000)


def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--only", nargs="*", default=None,
                    help="subset of: dd linear diffusion three mixture ratio")
    args = ap.parse_args(argv)
    want = lambda k: args.only is None or k in args.only
    if want("dd"):
        log(f"exact DD agreement: {ex.exact_dd_agreement()}")
    if want("linear"):
        for n in (1_000, 10_000, 100_000):
            for s in range(10):
                r = ex.linear_gaussian_run(n, s)
            log(f"linear-Gaussian n={n} last abs_error={r['abs_error']:.4f}")
    if want("diffusion"):
        log(f"reference two: {ex.reference('two', 100_000)['mean']}")
        for n in (1_000, 10_000):
            for s in SEEDS:
                r = ex.diffusion_run("two", n, s)
                log(f"two n_off={n} seed={s} ess={r['ess']} {r['timings']}")
    if want("three"):
        log(f"reference three: {ex.reference('three', 100_000)['mean']}")
        r = ex.diffusion_run("three", 10_000, 0)
        log(f"three n_off=1e4 ess={r['ess']}")
    if want("mixture"):
        for n in MIXTURE_SIZES:
            for s in SEEDS:
                for c in MIXTURE_DIMS:
                    r = ex.mixture_run(c, n, s)
                    log(f"mixture c={c} n={n} seed={s} ckr={r['delta_ckr']:.4f} kr={r['delta_kr']:.4f}")
    if want("ratio"):
        for s in ESS_RATIO_SEEDS:
            r = ex.diffusion_run("two", 100_000, s)
            log(f"two n_off=1e5 seed={s} ess={r['ess']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
