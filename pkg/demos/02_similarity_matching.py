"""What the similarity matching loss actually measures.

The sim loss asks a layer to make its mini-batch similarity structure look
like the labels' similarity structure: examples of the same class should
have correlated features, different classes anti-correlated. This script
builds that picture from the ground up.
"""

import numpy as np

from locallearn.losses import label_similarity, sim_loss, similarity_matrix
from locallearn.numerics import one_hot
from locallearn.rng import make_rng

np.set_printoptions(precision=3, suppress=True)

print("== adjusted cosine similarity of one-hot labels ==")
labels = np.array([0, 0, 1, 2, 2, 1])
y = one_hot(labels, 3, np.float64)
target = label_similarity(y)
print("labels:", labels)
print(target)
print("same class -> 1, different -> -1/(C-1) = -0.5 at C=3\n")

print("== the matrix ignores per-example scale and shift ==")
x = make_rng(2).standard_normal((8, 6))
scaled = x * [1.0, 9.0, 0.2, 3.0, 5.0, 0.5] + [0, 4, -2, 1, 0, 3]
drift = np.max(np.abs(similarity_matrix(scaled) - similarity_matrix(x)))
print(f"max |S(a*x+b) - S(x)| over a random batch: {drift:.2e}")
print("centering removes the shift, normalization the positive scale\n")

print("== a tiny head learns to match the target structure ==")
rng = make_rng(3)
h = rng.standard_normal((6, 10))        # activations for the batch above
w = rng.standard_normal((10, 10)) * 0.3
b = np.zeros(10)
for step in range(2000):
    res = sim_loss(h, y, w, b)
    w -= 3e-2 * res.grads["sim_w"]
    b -= 3e-2 * res.grads["sim_b"]
    if step % 400 == 0:
        print(f"  step {step:4d}  sim loss {res.loss:.5f}")
feat = h @ w + b
print("\nfinal descriptor similarity vs target (should be close):")
print(np.round(similarity_matrix(feat.T) - target, 2))
