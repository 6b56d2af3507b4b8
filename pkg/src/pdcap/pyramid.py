"""Multi-scale pyramid maps built by stride-1, unpadded average pooling.

Level ``b`` of a w x h grid has ``(w-b+1)*(h-b+1)`` rows; levels are stacked
level-major, each level row-major (row index ``x*(h-b+1) + y``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pdcap import kernels
from pdcap.data import FeatureMap
from pdcap.errors import ContractError


@dataclass(frozen=True)
class PyramidConfig:
    bins: tuple = (1, 2, 4)
    stride: int = field(default=1, init=False)
    padding: int = field(default=0, init=False)

    def __post_init__(self):
        bins = tuple(int(b) for b in self.bins)
        if not bins or bins[0] < 1 or any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
            raise ContractError(f"pyramid bins must be strictly increasing and >= 1, got {bins}")
        object.__setattr__(self, "bins", bins)


@dataclass
class PyramidFeatures:
    levels: list
    stacked: FeatureMap


def avg_pool2d(fmap: FeatureMap, bin: int) -> FeatureMap:
    if fmap.grid is None:
        raise ContractError("avg_pool2d needs a feature map with a spatial grid")
    w, h = fmap.grid
    if not 1 <= bin <= min(w, h):
        raise ContractError(f"bin {bin} does not fit a {w}x{h} grid")
    if bin == 1:
        return FeatureMap(fmap.data.copy(), grid=(w, h))
    pooled = kernels.avg_pool2d(fmap.as_float64().reshape(w, h, -1), bin)
    ow, oh = pooled.shape[:2]
    return FeatureMap(pooled.reshape(ow * oh, -1), grid=(ow, oh))


def spatial_grid(fmap: FeatureMap, bins):
    """Grid used for pooling. Gridless maps with a perfect-square L are laid out
    on a sqrt(L) x sqrt(L) grid in stored row order; other gridless maps only
    support the identity pyramid."""
    if fmap.grid is not None:
        return fmap.grid
    side = math.isqrt(fmap.regions)
    if side * side == fmap.regions:
        return (side, side)
    if tuple(bins) == (1,):
        return None
    raise ContractError(
        f"a gridless map with L={fmap.regions} regions cannot be pooled: pyramid levels beyond "
        "bin 1 require L to be a perfect square so the rows can be laid out on a square grid")


def build_pyramid(fmap: FeatureMap, cfg: PyramidConfig = PyramidConfig()) -> PyramidFeatures:
    grid = spatial_grid(fmap, cfg.bins)
    if grid is None:
        return PyramidFeatures([fmap], FeatureMap(fmap.data.copy()))
    if cfg.bins[-1] > min(grid):
        raise ContractError(f"bin {cfg.bins[-1]} exceeds the {grid[0]}x{grid[1]} grid")
    base = FeatureMap(fmap.data, grid=grid)
    levels = [avg_pool2d(base, b) for b in cfg.bins]
    stacked = np.concatenate([lv.data for lv in levels], axis=0)
    return PyramidFeatures(levels, FeatureMap(stacked, grid=None))


def level_rows(grid, bins):
    w, h = grid
    return [(w - b + 1) * (h - b + 1) for b in bins]


def pooling_matrix(grid, bins):
    """Constant (L' x L) matrix ``P`` with ``P @ V`` equal to the stacked pyramid of V.

    Used inside the decoder, where pooling is applied to mapped features that
    carry gradients.
    """
    w, h = grid
    rows = []
    for b in bins:
        ow, oh = w - b + 1, h - b + 1
        for x in range(ow):
            for y in range(oh):
                r = np.zeros(w * h)
                for dx in range(b):
                    for dy in range(b):
                        r[(x + dx) * h + (y + dy)] = 1.0 / (b * b)
                rows.append(r)
    return np.array(rows)
