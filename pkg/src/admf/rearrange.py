"""Static asset ordering from DTW-distance average-linkage clustering.

Assets whose coarse (monthly average) return series align well under DTW
are merged first; the ordered member lists of merged clusters are
concatenated, so the root cluster's list places similar assets next to each
other. Reordering ADM rows/columns with it gives the convolutions spatially
local structure to work with.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from admf import _core
from admf.data import ADM, ADMSequence

PROVENANCES = ("original", "dtw_hierarchical")


@dataclass
class AssetOrdering:
    order: list
    provenance: str = "original"

    def __post_init__(self):
        if len(set(self.order)) != len(self.order):
            raise ValueError("ordering contains duplicate assets")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self):
        return len(self.order)

    def indices(self, universe):
        """Positions of ``order`` within ``universe`` (the permutation as an index array)."""
        if sorted(map(str, universe)) != sorted(map(str, self.order)):
            raise ValueError("ordering universe does not match the ADM universe")
        pos = {a: i for i, a in enumerate(universe)}
        return np.array([pos[a] for a in self.order], dtype=np.int64)

    def then(self, other):
        """Apply ``self`` first, then ``other`` (whose order is over self's output)."""
        return AssetOrdering([self.order[i] for i in other.indices(self.order)],
                             other.provenance)

    @classmethod
    def identity(cls, assets):
        return cls(list(assets), "original")

    def save(self, path):
        lines = [f"# provenance: {self.provenance}"] + [str(a) for a in self.order]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        provenance = "original"
        order = []
        for line in Path(path).read_text().splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                if key.strip() == "provenance":
                    provenance = val.strip()
            elif line.strip():
                order.append(line.strip())
        return cls(order, provenance)


@dataclass
class DistanceMatrix:
    assets: list
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        n = len(self.assets)
        if self.d.shape != (n, n):
            raise ValueError(f"distance matrix shape {self.d.shape} for {n} assets")
        if not np.allclose(self.d, self.d.T, rtol=0, atol=1e-12) or np.any(self.d < 0) \
                or np.any(np.diag(self.d) != 0):
            raise ValueError("distances must be symmetric, nonnegative, zero on the diagonal")


def monthly_average_returns(rt, period=21):
    """Non-overlapping block means of each asset's returns, shape ``(n_assets, n_blocks)``.

    A trailing partial block is averaged over its own length.
    """
    if period < 1:
        raise ValueError("period must be >= 1")
    r = np.asarray(rt.returns if hasattr(rt, "returns") else rt, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    if r.shape[0] == 0:
        raise ValueError("empty return table")
    starts = np.arange(0, r.shape[0], period)
    sums = np.add.reduceat(r, starts, axis=0)
    lengths = np.diff(np.append(starts, r.shape[0]))
    return (sums / lengths[:, None]).T


def dtw_distance(a, b):
    """Unconstrained DTW with |a_i - b_j| local cost."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("DTW needs nonempty series")
    return _core.dtw_distance(a, b)


def dtw_distance_matrix(series, assets):
    series = np.asarray(series, dtype=np.float64)
    return DistanceMatrix(list(assets), _core.dtw_matrix(series))


def hierarchical_order(D):
    """Average-linkage (UPGMA) agglomeration returning the root's ordered asset list.

    Ties on the minimal linkage go to the cluster pair whose
    ``(min index, max index)`` of member minima is lexicographically smallest;
    at a merge the child holding the smaller original index goes first.
    """
    n = len(D.assets)
    if n == 0:
        raise ValueError("cannot order an empty universe")
    # clusters keyed by their smallest original index
    members = {i: [i] for i in range(n)}
    link = D.d.copy()
    active = list(range(n))
    while len(active) > 1:
        best = None
        best_key = None
        for ai, a in enumerate(active):
            for b in active[ai + 1:]:
                d = link[a, b]
                key = (min(a, b), max(a, b))
                if best is None or d < best or (d == best and key < best_key):
                    best, best_key = d, key
        a, b = best_key
        na, nb = len(members[a]), len(members[b])
        for c in active:
            if c not in (a, b):
                link[a, c] = link[c, a] = (na * link[a, c] + nb * link[b, c]) / (na + nb)
        members[a] = members[a] + members.pop(b)
        active.remove(b)
    return AssetOrdering([D.assets[i] for i in members[active[0]]], "dtw_hierarchical")


def fit_ordering(rt, period=21):
    """Alg.-style pipeline: coarse returns -> DTW matrix -> hierarchical order."""
    coarse = monthly_average_returns(rt, period)
    return hierarchical_order(dtw_distance_matrix(coarse, rt.assets))


def apply_ordering(adm, ordering):
    """``result[i][j] = original[ord(i)][ord(j)]``; works on ADM or ADMSequence."""
    idx = ordering.indices(adm.ordering if isinstance(adm, ADM) else adm.assets)
    if isinstance(adm, ADM):
        return ADM(adm.timestamp, adm.measure, adm.matrix[np.ix_(idx, idx)],
                   list(ordering.order), adm.n_lag, adm.predicted)
    return ADMSequence(adm.matrices[:, idx][:, :, idx], list(ordering.order), adm.measure,
                       adm.n_lag, adm.first_timestamp)
