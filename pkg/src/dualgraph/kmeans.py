import numpy as np

from .errors import DomainError


def kmeans_pp(x: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new center is drawn with probability ~ D(x)^2."""
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, c):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[0])
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(x)), labels]


def lloyd(x: np.ndarray, centers: np.ndarray, tol: float = 1e-6, max_iter: int = 300):
    """Lloyd iterations until the largest center move is below ``tol``.

    An emptied cluster is re-seeded at the point farthest from its center.
    Returns ``(centers, labels, inertia, n_iter)``.
    """
    centers = centers.copy()
    for it in range(1, max_iter + 1):
        labels, d2 = assign(x, centers)
        new = centers.copy()
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(d2.argmax())
                new[j] = x[far]
                d2[far] = 0.0
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    labels, d2 = assign(x, centers)
    return centers, labels, float(d2.sum()), it


def kmeans(x, c: int, seed: int = 0, n_init: int = 10, tol: float = 1e-6, max_iter: int = 300):
    """Best of ``n_init`` k-means++ + Lloyd runs by inertia. Returns ``(centers, labels)``."""
    x = np.asarray(x, dtype=np.float64)
    if c < 1:
        raise DomainError(f"number of clusters must be positive, got {c}")
    if c > x.shape[0]:
        raise DomainError(f"cannot form {c} clusters from {x.shape[0]} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, labels, inertia, _ = lloyd(x, kmeans_pp(x, c, rng), tol, max_iter)
        if best is None or inertia < best[2]:
            best = (centers, labels, inertia)
    return best[0], best[1]
