import numpy as np


def unit_sphere(n: int, seed: int = 0) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def exhaustive_knn(query: np.ndarray, reference: np.ndarray, k: int) -> np.ndarray:
    """Double loop, ties resolved by the lower reference index."""
    out = []
    for q in query:
        dist = []
        for j, r in enumerate(reference):
            dx, dy, dz = q[0] - r[0], q[1] - r[1], q[2] - r[2]
            dist.append((dx * dx + dy * dy + dz * dz, j))
        out.append([j for _, j in sorted(dist)[:k]])
    return np.asarray(out, dtype=np.int64)


def pairwise_auroc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))
