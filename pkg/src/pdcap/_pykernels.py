"""Pure-Python/numpy versions of the hot kernels (fallback when the extension is absent)."""

import numpy as np


def avg_pool2d(grid, bin):
    """Stride-1, unpadded mean pooling of a (w, h, d) float64 array."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    w, h, d = grid.shape
    ow, oh = w - bin + 1, h - bin + 1
    out = np.zeros((ow, oh, d))
    # accumulate window offsets in (dx, dy) order; the compiled kernel matches it
    for dx in range(bin):
        for dy in range(bin):
            out += grid[dx:dx + ow, dy:dy + oh]
    out /= bin * bin
    return out


def lcs_length(a, b):
    """Longest common subsequence length of two integer sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            if x == y:
                cur.append(prev[j] + 1)
            else:
                cur.append(cur[j] if cur[j] > prev[j + 1] else prev[j + 1])
        prev = cur
    return prev[-1]
