"""Layer-local training against global backprop on separable blobs.

Local modes compute an error signal at every hidden block from two
single-layer sub-networks (a classifier and a similarity head), update the
block immediately, and detach. The payoff this script makes visible: the
trainer never holds more than one hidden activation cache at a time, while
backprop keeps one per layer.
"""

import numpy as np

from locallearn.data import synthetic_blobs
from locallearn.losses import LossConfig
from locallearn.numerics import one_hot
from locallearn.rng import make_rng
from locallearn.trainer import TrainConfig, build_network, parse_arch, train, train_step

ds = synthetic_blobs(classes=3, per_class=60, dim=16, separation=6.0, seed=5)
print(f"dataset: {len(ds)} points, {ds.num_classes} classes, 16-dim\n")

print(f"{'mode':12s} {'final train err':>16s} {'epochs to 0':>12s}")
for mode in ("glob", "pred", "sim", "predsim", "pred-bpf", "sim-bpf", "predsim-bpf"):
    cfg = TrainConfig(arch="fc32-fc", epochs=20, lr=5e-3, batch_size=32,
                      seed=100, clean_train_error=True)
    _, hist = train(cfg, LossConfig(mode), ds)
    first_zero = next((h.epoch for h in hist if h.train_error == 0.0), None)
    when = str(first_zero) if first_zero is not None else "never"
    print(f"{mode:12s} {hist[-1].train_error:16.4f} {when:>12s}")

print("\n== activation memory during one step of a 6-block conv net ==")
x = make_rng(6).standard_normal((8, 2, 8, 8)).astype(np.float32)
y = one_hot(np.arange(8) % 3, 3, np.float32)
arch = "conv4-conv4-conv4-conv4-conv4-conv4-fc"
for mode in ("predsim", "glob"):
    net = build_network(parse_arch(arch, (2, 8, 8), 3),
                        LossConfig(mode), seed=1, pred_target_dim=32)
    res = train_step(net, x, y, 1e-3, make_rng(0))
    print(f"{mode:8s} peak live caches: {res.peak_caches} of {len(net.blocks)} blocks")
print("\nlocal modes free each cache right after that block's update;")
print("backprop must keep all of them until the backward pass returns.")
