"""Assignment-based set losses, set-size RMSE and subset precision/recall/F1."""
from collections import Counter
from dataclasses import dataclass
from itertools import permutations
from typing import FrozenSet, Iterable, List, Sequence, Tuple

import numpy as np

from lib.errors import ContractError, DimensionError


@dataclass(frozen=True)
class Assignment:
    """Matched (row, col) pairs and the summed cost of those pairs."""

    pairs: Tuple[Tuple[int, int], ...]
    total_cost: float

    def columns(self) -> np.ndarray:
        """Column matched to each row, rows in order."""
        cols = np.empty(len(self.pairs), dtype=np.intp)
        for row, col in self.pairs:
            cols[row] = col
        return cols


def _as_set(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"a set must be a [n, d] array, got shape {a.shape}")
    return a


def pairwise_cost(a, b) -> np.ndarray:
    """Squared Euclidean distance between every row of ``a`` and every row of ``b``."""
    a, b = _as_set(a), _as_set(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"element widths differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def linear_assignment(cost: np.ndarray) -> Assignment:
    """Minimum-cost perfect matching of a square matrix (O(n³) shortest augmenting paths)."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ContractError(f"cost matrix must be square, got {cost.shape}")
    if n == 0:
        return Assignment((), 0.0)

    # 1-based potentials; column 0 is the virtual start of each augmenting path
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    pairs = tuple(sorted((int(p[j]) - 1, j - 1) for j in range(1, n + 1)))
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(pairs, total)


def hungarian(a, b) -> Tuple[float, Assignment]:
    """Mean matched squared distance under the optimal bijection of equal-size sets."""
    a, b = _as_set(a), _as_set(b)
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"hungarian needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] == 0:
        raise ContractError("hungarian needs non-empty sets")
    assignment = linear_assignment(pairwise_cost(a, b))
    return assignment.total_cost / a.shape[0], assignment


def hungarian_bruteforce(a, b) -> float:
    """Exhaustive minimum over all bijections; reference for small sets."""
    cost = pairwise_cost(a, b)
    n = cost.shape[0]
    if cost.shape[1] != n:
        raise ContractError("hungarian needs equal sizes")
    best = min(sum(cost[i, perm[i]] for i in range(n)) for perm in permutations(range(n)))
    return float(best) / n


def chamfer_terms(a, b) -> Tuple[float, float]:
    """(mean over a of nearest b, mean over b of nearest a), squared distances."""
    a, b = _as_set(a), _as_set(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("chamfer needs two non-empty sets")
    cost = pairwise_cost(a, b)
    return float(cost.min(axis=1).mean()), float(cost.min(axis=0).mean())


def chamfer(a, b) -> float:
    forward, reverse = chamfer_terms(a, b)
    return forward + reverse


def chamfer_bruteforce(a, b) -> float:
    """Loop-based Chamfer; reference for the vectorized one."""
    a, b = _as_set(a), _as_set(b)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("chamfer needs two non-empty sets")
    dist = lambda p, q: float(sum((pi - qi) ** 2 for pi, qi in zip(p, q)))
    return (sum(min(dist(p, q) for q in b) for p in a) / len(a)
            + sum(min(dist(p, q) for p in a) for q in b) / len(b))


def set_size_rmse(true_sizes: Sequence[int], pred_sizes: Sequence[int]) -> float:
    t = np.asarray(true_sizes, dtype=np.float64)
    p = np.asarray(pred_sizes, dtype=np.float64)
    if t.shape != p.shape:
        raise ContractError(f"size lists differ in length: {t.shape} vs {p.shape}")
    if t.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((t - p) ** 2)))


def subset_metrics(predictions: Sequence[Iterable[int]], valid: Iterable[Iterable[int]]) -> Tuple[float, float, float]:
    """Frequency-weighted precision, recall over valid subsets, and their F1.

    ``predictions`` holds one predicted outlier subset per run; repeated
    subsets count with their frequency in precision and once in recall.
    """
    family: List[FrozenSet[int]] = list({frozenset(s) for s in valid})
    if not family:
        raise ContractError("valid subset family is empty")
    runs = [frozenset(s) for s in predictions]
    if not runs:
        raise ContractError("need at least one prediction")
    counts = Counter(runs)
    valid_set = set(family)
    precision = sum(c for s, c in counts.items() if s in valid_set) / len(runs)
    recall = len(set(counts) & valid_set) / len(valid_set)
    return precision, recall, f1_score(precision, recall)


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
