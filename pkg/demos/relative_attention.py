"""Post-softmax relative bias: what it does to attention rows.

Run: python demos/relative_attention.py
"""
import numpy as np

from seqformer.encodings import erpe_attention
from seqformer.rng import Rng

np.set_printoptions(precision=3, suppress=True)

r = Rng(0)
L, dh = 5, 4
q, k, v = (r.normal(size=(L, dh)) for _ in range(3))

_, plain = erpe_attention(q, k, v, np.zeros(2 * L - 1), return_weights=True)
print("softmax weights (rows sum to 1):")
print(plain.data)

# favour looking one step back: offset i - j = +1 sits at 0-based slot L
w = np.zeros(2 * L - 1)
w[L] = 0.5
_, biased = erpe_attention(q, k, v, w, return_weights=True)
print("\nwith +0.5 on the 'previous step' offset (added after softmax, not renormalized):")
print(biased.data)
print("row sums:", biased.data.sum(axis=1))
