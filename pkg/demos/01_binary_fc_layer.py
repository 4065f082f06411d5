"""A binary fully connected layer, from float weights to a packed kernel.

Run: python3 demos/01_binary_fc_layer.py
"""

import numpy as np

from bcsinet.binarize import binarize
from bcsinet.binkernel import binary_gemv, pack, unpack
from bcsinet.complexity import LayerShape, layer_cost

rng = np.random.default_rng(0)

# A float layer mapping a 2048-vector to a 512-codeword.
W = rng.standard_normal((512, 2048)).astype(np.float32) * 0.02
b = rng.standard_normal(512).astype(np.float32) * 0.01
x = rng.standard_normal(2048).astype(np.float32)

# Binarize: signs plus one scale, the mean absolute weight.
B, alpha = binarize(W)
print(f"alpha = {alpha:.5f}  (mean |W| = {np.abs(W).mean():.5f})")
print(f"sign values used: {sorted(set(np.unique(B).tolist()))}")

# The approximation error of alpha * B against W.
rel = np.linalg.norm(W - alpha * B) / np.linalg.norm(W)
print(f"relative weight error of alpha * B: {rel:.3f}")

# Pack 64 signs per uint64 word; bit 1 stands for +1.
P = pack(B)
print(f"packed: {P.words.shape} uint64 words, {P.nbytes} bytes vs {W.nbytes} float bytes")
assert np.array_equal(unpack(P), B)

# The packed product adds and subtracts inputs, then applies one scale per output.
y = binary_gemv(P, x, alpha, b)
y_ref = alpha * (B.astype(np.float64) @ x) + b
print(f"max |packed - dense reference| = {np.abs(y - y_ref).max():.2e}")

for kind in ("BinaryDense", "Dense"):
    cost = layer_cost(LayerShape(kind, "fc", (2048,), (512,)))
    print(f"{kind:12s} multiplications per inference: {cost.mults}")
