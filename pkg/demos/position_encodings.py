"""Length-adaptive absolute encodings and the relative-offset index map.

Run: python demos/position_encodings.py
"""
import numpy as np

from seqformer.encodings import build_tape_table, erpe_index_map, sinusoidal_table, tape_frequencies

np.set_printoptions(precision=4, suppress=True, linewidth=110)

d = 8
print("base frequencies (L = d_model, identical to the classic table):")
print(tape_frequencies(d, d))
for L in (8, 16, 32):
    # frequencies shrink as L grows, so a short window still spans a full cycle on the slow channels
    print(f"L={L:2d}  omega:", tape_frequencies(L, d))

print("\nrow 0 is sin(0)/cos(0):", build_tape_table(16, d).table[0])
same = np.allclose(build_tape_table(d, d).table, sinusoidal_table(d, d), atol=1e-12)
print("L == d_model reproduces the classic table:", same)

print("\nrelative index map for L=4 (constant along diagonals, L on the main one):")
print(erpe_index_map(4))
