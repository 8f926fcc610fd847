"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 50]

Times each row kernel on transformer-sized inputs, then one full
forward+backward training step of the default policy under each backend.
"""

import argparse
import time

import numpy as np

from fsail import _kernels_py, kernels


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(32 * 2 * 61, 61))
    acts = rng.normal(size=(32 * 61, 64))
    feats = rng.normal(size=(32 * 61, 32))
    gain, bias = rng.normal(size=32), rng.normal(size=32)
    y = _kernels_py.softmax_rows_forward(scores)
    _, xhat, rstd = _kernels_py.layer_norm_forward(feats, gain, bias, 1e-5)
    cases = {
        "softmax_fwd": lambda m: m.softmax_rows_forward(scores),
        "softmax_bwd": lambda m: m.softmax_rows_backward(y, scores),
        "layer_norm_fwd": lambda m: m.layer_norm_forward(feats, gain, bias, 1e-5),
        "layer_norm_bwd": lambda m: m.layer_norm_backward(feats, xhat, rstd, gain),
        "gelu_fwd": lambda m: m.gelu_forward(acts),
        "gelu_bwd": lambda m: m.gelu_backward(acts, acts),
        "log_softmax": lambda m: m.log_softmax_rows(scores),
    }
    backends = kernels.backends()
    print(f"{'kernel':<16}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for label, fn in cases.items():
        times = {name: _time(lambda: fn(mod), repeat) for name, mod in backends.items()}
        row = f"{label:<16}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times.values())
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.2f}x"
        print(row)


def training_step(repeat):
    from fsail import autodiff as ad
    from fsail.policy import ModelConfig, forward, imitation_loss, init_backbone, init_head

    cfg = ModelConfig()
    bb, head = init_backbone(cfg, 0), init_head(cfg, 0)
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, cfg.vocab_size, (32, cfg.max_tokens))
    views = rng.integers(0, 2, (32, 3, cfg.view_size, cfg.view_size, cfg.n_planes)).astype(float)
    acts = np.zeros((32, 5), dtype=int)

    def run():
        with ad.Tape() as tape:
            out = forward(bb, head, None, tokens, views, cfg)
            loss = imitation_loss(out.logits, acts, cfg)
        ad.backward(loss, tape)

    results = {}
    saved = {name: getattr(kernels, name) for name in
             ("softmax_rows_forward", "softmax_rows_backward", "layer_norm_forward",
              "layer_norm_backward", "gelu_forward", "gelu_backward", "log_softmax_rows")}
    for backend, mod in kernels.backends().items():
        for name in saved:
            setattr(kernels, name, getattr(mod, name))
        results[backend] = _time(run, max(3, repeat // 10))
    for name, fn in saved.items():
        setattr(kernels, name, fn)
    print()
    for backend, t in results.items():
        print(f"train step (B=32) [{backend}]: {t * 1e3:.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    kernel_table(args.repeat)
    training_step(args.repeat)


if __name__ == "__main__":
    main()
