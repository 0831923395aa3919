"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times one training step of the default 16x16x16 single-stage network
under each backend.
"""
import argparse
import time

import numpy as np

from volpose import _kernels
from volpose.autonet import Tape
from volpose.render import render_evidence
from volpose.skeleton import make_toy_skeleton, project_pose, sample_pose
from volpose.trainer import RMSProp, TrainConfig, batch_loss, build_model, make_dataset


def best_of(fn, repeat):
    fn()  # warm up (and trigger numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 32, 32, 32)).astype(np.float32)
    cols = _kernels.im2col3(x)
    pooled, idx = _kernels.maxpool2(x)
    toy = make_toy_skeleton()
    pose = sample_pose(toy, 0)
    pose2d = project_pose(pose, 1000.0, (500.0, 500.0))

    cfg = TrainConfig(n_train=8, n_test=1)
    train, _ = make_dataset(toy, 8, 1, 0, cfg)
    net = build_model(cfg, toy)
    opt = RMSProp(net.parameters(), cfg.learning_rate)

    def train_step():
        with Tape() as tape:
            loss = batch_loss(net, train[:4], cfg, toy)
        tape.backward(loss)
        opt.step()
        net.zero_grad()

    return [
        ("im2col3 4x32x32x32", lambda: _kernels.im2col3(x)),
        ("col2im3 4x32x32x32", lambda: _kernels.col2im3(cols, x.shape)),
        ("maxpool2 4x32x32x32", lambda: _kernels.maxpool2(x)),
        ("maxpool2_backward", lambda: _kernels.maxpool2_backward(pooled, idx)),
        ("render 64x64", lambda: render_evidence(toy, pose, pose2d, 64, 0)),
        ("train step (16^3, batch 4)", train_step),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<30}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, fn in cases():
        timings = {}
        for backend in ("numpy", "numba"):
            _kernels.set_backend(backend)
            timings[backend] = best_of(fn, args.repeat) * 1e3
        ratio = timings["numpy"] / timings["numba"]
        print(f"{name:<30}{timings['numpy']:>10.3f}{timings['numba']:>10.3f}{ratio:>8.2f}x")


if __name__ == "__main__":
    main()
