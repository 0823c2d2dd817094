"""Eight-nearest-neighbor grids: each tract plus its neighbors on a 3x3 map.

Neighbors are ranked by ascending Euclidean centroid distance (ties broken by
tract id) and placed at fixed cells around the centered target, pairing off
ranks symmetrically: closest two flank the center left/right, next two sit
above/below, then the corners. The layout is frozen under a version tag so
serialized models are unambiguous about how their inputs were assembled.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date, timedelta
from typing import Sequence

import numpy as np

from .domain import Tract, day_of_week
from .errors import ArityError, InsufficientHistory, NotEnoughTracts
from .features import FeaturePanel, FeatureStats, N_CHANNELS, standardize_panel

CELL_LAYOUT_TAG = "ring8-v1"

#: distance rank (1 = closest) -> (row, col) on the 3x3 grid; target at (1, 1)
RANK_TO_CELL: dict[int, tuple[int, int]] = {
    1: (1, 0),
    2: (1, 2),
    3: (0, 1),
    4: (2, 1),
    5: (0, 0),
    6: (2, 2),
    7: (0, 2),
    8: (2, 0),
}


@dataclass(frozen=True)
class NeighborArrangement:
    target: str
    cells: tuple[tuple[str, str, str], ...]  # 3 rows of 3 tract ids
    rank_of: dict[str, int]  # neighbor id -> distance rank 1..8

    def cell_ids_row_major(self) -> tuple[str, ...]:
        return tuple(tid for row in self.cells for tid in row)


def nearest_neighbors(tracts: Sequence[Tract], target_id: str, k: int = 8) -> list[str]:
    """Ids of the ``k`` tracts closest to ``target_id``, closest first.

    Distance is Euclidean on centroid coordinates; exact ties order by
    ascending tract id.
    """
    if len(tracts) < k + 1:
        raise NotEnoughTracts(f"need at least {k + 1} tracts, have {len(tracts)}")
    by_id = {t.id: t for t in tracts}
    if target_id not in by_id:
        raise KeyError(f"unknown tract {target_id!r}")
    tx, ty = by_id[target_id].centroid_x, by_id[target_id].centroid_y
    ranked = sorted(
        (
            (math.hypot(t.centroid_x - tx, t.centroid_y - ty), t.id)
            for t in tracts
            if t.id != target_id
        ),
    )
    return [tid for _, tid in ranked[:k]]


def arrange_grid(target_id: str, neighbors: Sequence[str]) -> NeighborArrangement:
    """Place ranked neighbors at their fixed cells around the centered target."""
    if len(neighbors) != 8:
        raise ArityError(f"expected exactly 8 neighbors, got {len(neighbors)}")
    if len(set(neighbors) | {target_id}) != 9:
        raise ArityError("target and neighbors must be 9 distinct tracts")
    grid = [[None] * 3 for _ in range(3)]
    grid[1][1] = target_id
    rank_of: dict[str, int] = {}
    for rank, tid in enumerate(neighbors, start=1):
        r, c = RANK_TO_CELL[rank]
        grid[r][c] = tid
        rank_of[tid] = rank
    return NeighborArrangement(
        target=target_id,
        cells=tuple(tuple(row) for row in grid),
        rank_of=rank_of,
    )


def city_arrangements(tracts: Sequence[Tract]) -> dict[str, NeighborArrangement]:
    """Arrangement for every tract; computed once per city and reused."""
    return {
        t.id: arrange_grid(t.id, nearest_neighbors(tracts, t.id)) for t in tracts
    }


def grid_index_array(
    tracts: Sequence[Tract], tract_ids: Sequence[str]
) -> np.ndarray:
    """(n_tracts, 9) tract indices in row-major cell order, for tensor assembly."""
    index = {tid: i for i, tid in enumerate(tract_ids)}
    out = np.empty((len(tract_ids), 9), dtype=np.int64)
    arrangements = city_arrangements(tracts)
    for tid, arr in arrangements.items():
        out[index[tid]] = [index[c] for c in arr.cell_ids_row_major()]
    return out


def grid_tensor(
    arr: NeighborArrangement,
    panel: FeaturePanel,
    stats: FeatureStats,
    t: date,
    lookback: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Model input for predicting day ``t``: standardized feature map plus dow.

    Returns ``(x, dow_onehot)`` where ``x`` has shape (11 * lookback, 3, 3)
    with channel ``d * 11 + f`` holding feature ``f`` on look-back day ``d``
    (oldest first), and ``dow_onehot`` is the 7-vector for day ``t`` itself.
    """
    t_idx = panel.day_index(t)
    if t_idx - lookback < 0 or t_idx - 1 >= panel.n_days:
        raise InsufficientHistory(
            f"predicting {t} needs days {t - timedelta(days=lookback)}..{t - timedelta(days=1)} in panel"
        )
    z = standardize_panel(stats, panel)
    cell_idx = np.array(
        [panel.tract_index(tid) for tid in arr.cell_ids_row_major()], dtype=np.int64
    )
    window = z[cell_idx, t_idx - lookback : t_idx, :]  # (9, lookback, 11)
    x = window.transpose(1, 2, 0).reshape(lookback * N_CHANNELS, 3, 3)
    onehot = np.zeros(7, dtype=np.float64)
    onehot[day_of_week(t)] = 1.0
    return x, onehot


def export_neighbors_csv(tracts: Sequence[Tract], path) -> None:
    """Dump ``target,rank,neighbor,distance_m`` rows for every tract."""
    by_id = {t.id: t for t in tracts}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "rank", "neighbor", "distance_m"])
        for t in tracts:
            for rank, nid in enumerate(nearest_neighbors(tracts, t.id), start=1):
                n = by_id[nid]
                dist = math.hypot(n.centroid_x - t.centroid_x, n.centroid_y - t.centroid_y)
                w.writerow([t.id, rank, nid, f"{dist:.3f}"])
