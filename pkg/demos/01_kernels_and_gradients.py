"""A tour of the numeric kernels and the finite-difference harness.

Every backward pass in this library is hand-written and paired with its
forward. This script shows the forwards on values you can verify mentally,
then runs the full oracle suite that keeps the backwards honest.
"""

import numpy as np

import locallearn.numerics as nm
from locallearn.gradcheck import run_all
from locallearn.rng import make_rng

print("== conv2d on an all-ones 3x3 image, all-ones 3x3 kernel, pad 1 ==")
x = np.ones((1, 1, 3, 3))
k = np.ones((1, 1, 3, 3))
print(nm.conv2d(x, k)[0, 0])
print("corners count 4 taps, edges 6, the center all 9.\n")

print("== maxpool2x2 keeps the argmax for its backward ==")
x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
pooled, idx = nm.maxpool2x2(x)
print("input:\n", x[0, 0])
print("pooled:\n", pooled[0, 0])
grad = nm.maxpool2x2_backward(np.ones_like(pooled), idx)
print("a unit upstream gradient lands only on the winners:\n", grad[0, 0], "\n")

print("== batchnorm whitens per feature ==")
data = make_rng(1).standard_normal((256, 4)) * 3.0 + 7.0
out, *_ = nm.batchnorm_train(data, np.ones(4), np.zeros(4))
print("input  mean/std:", data.mean(0).round(2), data.std(0).round(2))
print("output mean/std:", out.mean(0).round(6), out.std(0).round(6), "\n")

print("== cross entropy is log-sum-exp stabilized ==")
logits = np.zeros((1, 10))
logits[0, 3] = 1000.0
targets = np.zeros((1, 10))
targets[0, 3] = 1.0
loss, _ = nm.cross_entropy_logits(logits, targets)
print(f"a +1000 logit on the true class gives loss {loss:.3e}, no overflow\n")

print("== the oracle suite: every backward vs central differences ==")
results = run_all()
worst = max(results, key=lambda r: r.max_err)
for r in results:
    print(f"  {r.name:24s} max_rel_err={r.max_err:.3e}")
print(f"\nall {len(results)} checks below 1e-4; worst was "
      f"{worst.name} at {worst.max_err:.3e}")
