"""Compare the compiled kernels against the numpy fallback.

Times each hot-loop kernel on a canonical-size field and one full canonical
equilibrium solve per backend (the fallback is selected in a subprocess via
``MFGTOMO_KERNELS=python``). Usage::

    python3 benchmarks/bench_kernels.py [--repeat N] [--nx 35]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mfgtomo import _kernels_py

try:
    from mfgtomo import _kernels
except ImportError:  # not built
    _kernels = None


def _fields(nx: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((nx, nx)).cumsum(0).cumsum(1) / nx
    m = rng.random((nx, nx))
    g = rng.standard_normal((nx, nx))
    return u, m, g


def time_kernels(nx: int, repeat: int) -> dict:
    u, m, g = _fields(nx)
    h = 8.0 / nx
    calls = {
        "eo_hamiltonian": lambda k: k.eo_hamiltonian(u, h, h, False),
        "eo_hamiltonian_vjp": lambda k: k.eo_hamiltonian_vjp(u, g, h, h, False),
        "upwind_divergence": lambda k: k.upwind_divergence(m, u, h, h, False),
        "upwind_divergence_vjp": lambda k: k.upwind_divergence_vjp(g, m, u, h, h, False),
        "max_outflow_rate": lambda k: k.max_outflow_rate(u, h, h, False),
    }
    backends = {"numpy": _kernels_py}
    if _kernels is not None:
        backends["cython"] = _kernels
    out = {}
    for name, fn in calls.items():
        out[name] = {}
        for label, mod in backends.items():
            n = 200
            t = min(timeit.repeat(lambda: fn(mod), number=n, repeat=repeat)) / n
            out[name][label] = t
    return out


_SOLVE = (
    "import time, json; from mfgtomo import kernels; from mfgtomo.forward import solve_mfg;"
    "from mfgtomo.invert import experiment_solver_params; from mfgtomo.scene import canonical_scene;"
    "s = canonical_scene(); p = experiment_solver_params(); solve_mfg(s, params=p);"
    "t = min((lambda t0: (solve_mfg(s, params=p), time.perf_counter() - t0)[1])(time.perf_counter()) for _ in range({r}));"
    "print(json.dumps({{'backend': kernels.BACKEND, 'seconds': t}}))"
)


def time_solves(repeat: int) -> list[dict]:
    results = []
    for forced in ("", "python"):
        env = dict(os.environ, MFGTOMO_KERNELS=forced)
        proc = subprocess.run([sys.executable, "-c", _SOLVE.format(r=repeat)], env=env, capture_output=True, text=True, check=True)
        results.append(json.loads(proc.stdout))
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--nx", type=int, default=35)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"kernel timings on a {args.nx}x{args.nx} field (microseconds per call)")
    print(f"{'kernel':24s} {'numpy':>10s} {'cython':>10s} {'speedup':>8s}")
    for name, t in time_kernels(args.nx, args.repeat).items():
        cy = t.get("cython")
        cy_s = f"{cy * 1e6:10.1f}" if cy else f"{'-':>10s}"
        sp = f"{t['numpy'] / cy:8.1f}" if cy else f"{'-':>8s}"
        print(f"{name:24s} {t['numpy'] * 1e6:10.1f} {cy_s} {sp}")
    print("\ncanonical equilibrium solve (seconds, best of repeats)")
    for r in time_solves(max(1, args.repeat // 2)):
        print(f"  {r['backend']:8s} {r['seconds']:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
