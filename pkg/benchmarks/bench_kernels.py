"""Cython kernels vs the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Times each kernel on mini-resnet shapes (probe batch of 1000, 8x8 images),
checks both backends agree bit-for-bit, then times one training step of the
default model with each backend swapped in.
"""
import argparse
import json
import timeit

import numpy as np

from hawqkit import _pykernels as py
from hawqkit import kernels

try:
    from hawqkit import _ckernels as cy
except ImportError:
    cy = None


def cases(rng):
    x8 = rng.standard_normal((1000, 20, 8, 8))
    x4 = rng.standard_normal((1000, 20, 4, 4))
    cols8 = py.im2col(x8, 3, 3, 1, 1)
    cols4s = py.im2col(x8, 3, 3, 2, 1)
    w = rng.standard_normal(200_000)
    return [
        ("im2col 20x8x8 k3 s1", "im2col", (x8, 3, 3, 1, 1)),
        ("im2col 20x8x8 k3 s2", "im2col", (x8, 3, 3, 2, 1)),
        ("im2col 20x4x4 k3 s1", "im2col", (x4, 3, 3, 1, 1)),
        ("col2im 20x8x8 k3 s1", "col2im", (cols8, x8.shape, 3, 3, 1, 1)),
        ("col2im 20x8x8 k3 s2", "col2im", (cols4s, x8.shape, 3, 3, 2, 1)),
        ("quantize 200k 4-bit", "quantize_symmetric", (w, 0.1, 7.0)),
        ("quantize_sign 200k", "quantize_sign", (w, 0.5)),
        ("clip_mask 200k", "clip_mask", (w, 1.0)),
    ]


def best(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def train_step_time(backend, repeat):
    from hawqkit import tensor as T
    from hawqkit.config import RunConfig
    from hawqkit.models import build_model, forward_loss

    saved = {k: getattr(kernels, k) for k in ("im2col", "col2im")}
    for k in saved:
        setattr(kernels, k, getattr(backend, k))
    try:
        cfg = RunConfig()
        model, _ = build_model(cfg.model_spec(), 0)
        rng = np.random.default_rng(0)
        x, y = rng.random((128, 1, 8, 8)), rng.integers(0, 10, 128)
        params = list(model.params.values())
        return best(lambda: T.grad(forward_loss(model, x, y), params), (), repeat)
    finally:
        for k, v in saved.items():
            setattr(kernels, k, v)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    if cy is None:
        raise SystemExit("the Cython extension is not built; run `pip install -e .` first")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<24}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  identical")
    for label, name, a in cases(rng):
        tp = best(getattr(py, name), a, args.repeat)
        tc = best(getattr(cy, name), a, args.repeat)
        same = np.array_equal(getattr(py, name)(*a), getattr(cy, name)(*a))
        rows.append({"kernel": label, "numpy_s": tp, "cython_s": tc, "identical": bool(same)})
        print(f"{label:<24}{tp * 1e3:>10.3f}{tc * 1e3:>11.3f}{tp / tc:>8.2f}x  {same}")
    tp = train_step_time(py, max(3, args.repeat // 4))
    tc = train_step_time(cy, max(3, args.repeat // 4))
    rows.append({"kernel": "train step (batch 128)", "numpy_s": tp, "cython_s": tc})
    print(f"{'train step (batch 128)':<24}{tp * 1e3:>10.3f}{tc * 1e3:>11.3f}{tp / tc:>8.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
