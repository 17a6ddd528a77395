"""Source-view selection protocols: random conditioning-view sampling for
training and pose-difference ranking into evaluation sets.
"""

import numpy as np

from .geometry import pose_difference

SET_SIZE = 10                    # views per ranked evaluation set
M_RANGE = (8, 12)                # source-view count, sampled uniformly
POOL_FACTOR_RANGE = (1, 5)       # nearest-pool multiplier, sampled uniformly


def ranked_by_difference(target, surrounding, rotation_weight=1.0):
    """Indices of ``surrounding`` sorted by ascending pose difference to
    ``target`` (stable: input index breaks ties)."""
    diffs = np.array([pose_difference(target, cam, rotation_weight)
                      for cam in surrounding])
    return np.argsort(diffs, kind="stable"), diffs


def sample_source_views(target, pool, rng, rotation_weight=1.0):
    """Training-time conditioning draw.

    Draw M ~ U{8..12} and a pool factor m ~ U{1..5}; restrict to the m*M
    views nearest the target by pose difference (clamped to the pool), then
    pick M of those uniformly without replacement. Returns pool indices.
    """
    if len(pool) == 0:
        raise ValueError("source-view pool is empty")
    m_views = int(rng.integers(M_RANGE[0], M_RANGE[1] + 1))
    factor = int(rng.integers(POOL_FACTOR_RANGE[0], POOL_FACTOR_RANGE[1] + 1))
    order, _ = ranked_by_difference(target, pool, rotation_weight)
    candidates = order[:min(factor * m_views, len(pool))]
    m_views = min(m_views, len(candidates))
    chosen = rng.choice(len(candidates), size=m_views, replace=False)
    return [int(candidates[i]) for i in chosen]


def _set_anchors(n_sets, spare):
    """Starting ranks for each 10-view set, as fractions of the spare rank
    range. Mirrors the protocol's top / middle / (3/4) / bottom anchors."""
    if n_sets == 1:
        quantiles = [0.0]
    elif n_sets == 3:
        quantiles = [0.0, 0.5, 1.0]
    elif n_sets == 4:
        quantiles = [0.0, 0.5, 0.75, 1.0]
    else:
        quantiles = [i / (n_sets - 1) for i in range(n_sets)]
    return [int(np.floor(q * spare)) for q in quantiles]


def rank_source_sets(target, surrounding, n_sets, rotation_weight=1.0):
    """Ranked 10-view conditioning sets, easiest (nearest poses) first.

    Sorts ``surrounding`` by ascending pose difference; the first set takes
    ranks 1-10, the last the bottom 10, intermediates sit at quantile
    anchors of the rank range. Returns a list of index lists.
    """
    if len(surrounding) < SET_SIZE:
        raise ValueError(f"need at least {SET_SIZE} surrounding views, "
                         f"got {len(surrounding)}")
    order, _ = ranked_by_difference(target, surrounding, rotation_weight)
    spare = len(surrounding) - SET_SIZE
    return [[int(i) for i in order[s:s + SET_SIZE]]
            for s in _set_anchors(n_sets, spare)]
