"""Backend selection for the chain kernels.

The compiled extension is used when it imports; set ``NONLOCAL_CRF_PURE=1``
to force the numpy implementation.
"""
import os

from . import _pykernels

BACKEND = "python"
forward_backward = _pykernels.forward_backward
viterbi = _pykernels.viterbi

if os.environ.get("NONLOCAL_CRF_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        forward_backward = _ckernels.forward_backward
        viterbi = _ckernels.viterbi

BACKENDS = {"python": _pykernels}
if BACKEND == "cython":
    BACKENDS["cython"] = _ckernels


def benchmark_backends(shapes=((20, 5), (20, 25), (100, 10)), repeats: int = 20, seed: int = 0) -> dict:
    """Median wall time of forward-backward and Viterbi per backend.

    Returns ``{"n=..,k=..": {backend: {kernel: seconds}, "speedup": {...}}}``.
    """
    import time

    import numpy as np

    rng = np.random.default_rng(seed)
    result = {}
    for n, k in shapes:
        node = rng.normal(size=(n, k))
        edge = rng.normal(size=(n - 1, k, k))
        row = {}
        for name, mod in BACKENDS.items():
            row[name] = {}
            for kernel in ("forward_backward", "viterbi"):
                fn = getattr(mod, kernel)
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    fn(node, edge)
                    times.append(time.perf_counter() - t0)
                row[name][kernel] = float(np.median(times))
        if "cython" in row:
            row["speedup"] = {kern: row["python"][kern] / row["cython"][kern] for kern in row["python"]}
        result[f"n={n},k={k}"] = row
    return result
