"""Dense numeric primitives: cosine similarity, k-means, nearest-center scans,
and a central-difference gradient used as the test oracle for every
hand-written backward pass.

The two scan kernels (squared-distance assignment and cosine argmax) have a
numba implementation and a vectorised numpy implementation; which one runs
is decided by :func:`scene_action_vad._jit.use_jit`.
"""

from dataclasses import dataclass, field

import numpy as np

from ._jit import njit, use_jit
from .errors import ContractViolation, ZeroNormError

MAX_ITER = 300
_CHUNK_ELEMS = 1 << 22


def as_vec(x):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ContractViolation("vector has non-finite entries")
    return v


def as_points(points):
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ContractViolation(f"expected a 2-d point array, got shape {X.shape}")
    return X


def cosine_similarity(u, v):
    u = as_vec(u)
    v = as_vec(v)
    if u.shape != v.shape:
        raise ContractViolation(f"dimension mismatch: {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


# -- nearest-center scans ----------------------------------------------------

@njit
def _sqdist_assign_jit(X, C):
    n, d = X.shape
    k = C.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for i in range(n):
        bi = 0
        bd = np.inf
        for j in range(k):
            s = 0.0
            for t in range(d):
                diff = X[i, t] - C[j, t]
                s += diff * diff
            if s < bd:
                bd = s
                bi = j
        labels[i] = bi
        best[i] = bd
    return labels, best


def _sqdist_assign_np(X, C):
    n, d = X.shape
    k = C.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(1, k * d))
    for lo in range(0, n, step):
        diff = X[lo:lo + step, None, :] - C[None, :, :]
        dist = np.einsum("nkd,nkd->nk", diff, diff)
        lab = np.argmin(dist, axis=1)
        labels[lo:lo + step] = lab
        best[lo:lo + step] = dist[np.arange(lab.size), lab]
    return labels, best


def assign_nearest(X, C):
    """Index of the nearest center (squared Euclidean) per row, and that distance.

    Ties resolve to the lowest center index.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    if use_jit():
        return _sqdist_assign_jit(X, C)
    return _sqdist_assign_np(X, C)


@njit
def _cos_argmax_jit(X, C):
    n, d = X.shape
    k = C.shape[0]
    cn = np.empty(k, dtype=np.float64)
    for j in range(k):
        s = 0.0
        for t in range(d):
            s += C[j, t] * C[j, t]
        cn[j] = np.sqrt(s)
    idx = np.empty(n, dtype=np.int64)
    val = np.empty(n, dtype=np.float64)
    for i in range(n):
        xs = 0.0
        for t in range(d):
            xs += X[i, t] * X[i, t]
        xn = np.sqrt(xs)
        bi = 0
        bv = -np.inf
        for j in range(k):
            s = 0.0
            for t in range(d):
                s += X[i, t] * C[j, t]
            c = s / (xn * cn[j])
            if c > 1.0:
                c = 1.0
            elif c < -1.0:
                c = -1.0
            if c > bv:
                bv = c
                bi = j
        idx[i] = bi
        val[i] = bv
    return idx, val


def _cos_argmax_np(X, C):
    xn = np.sqrt(np.einsum("nd,nd->n", X, X))
    cn = np.sqrt(np.einsum("kd,kd->k", C, C))
    sims = np.clip((X @ C.T) / np.outer(xn, cn), -1.0, 1.0)
    idx = np.argmax(sims, axis=1)
    return idx.astype(np.int64), sims[np.arange(idx.size), idx]


def argmax_cosine(X, C):
    """Batched :func:`max_similarity`: best center index and cosine per row of X."""
    X = np.ascontiguousarray(as_points(X))
    C = np.ascontiguousarray(as_points(C))
    if C.shape[0] == 0:
        raise ContractViolation("empty center list")
    if X.shape[1] != C.shape[1]:
        raise ContractViolation(f"dimension mismatch: {X.shape[1]} vs {C.shape[1]}")
    if np.any(np.einsum("nd,nd->n", X, X) == 0.0) or np.any(np.einsum("kd,kd->k", C, C) == 0.0):
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    if use_jit():
        return _cos_argmax_jit(X, C)
    return _cos_argmax_np(X, C)


def max_similarity(x, centers):
    """Return ``(index, cosine)`` of the most similar center; lowest index wins ties."""
    if len(centers) == 0:
        raise ContractViolation("empty center list")
    idx, val = argmax_cosine(as_vec(x)[None, :], centers)
    return int(idx[0]), float(val[0])


# -- k-means -----------------------------------------------------------------

@dataclass
class ClusterModel:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    @property
    def k(self):
        return self.centers.shape[0]

    def counts(self):
        return np.bincount(self.assignments, minlength=self.k)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0.0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every remaining point coincides with a chosen center
            taken = set(chosen)
            nxt = next(i for i in range(n) if i not in taken)
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[chosen].copy()


def _update_centers(X, labels, centers, dist):
    k = centers.shape[0]
    new = np.zeros_like(centers)
    counts = np.bincount(labels, minlength=k)
    np.add.at(new, labels, X)
    dist = dist.copy()
    for j in range(k):
        if counts[j] > 0:
            new[j] /= counts[j]
        else:
            far = int(np.argmax(dist))
            new[j] = X[far]
            dist[far] = -1.0
    return new


def kmeans(points, k, seed=0, max_iter=MAX_ITER):
    """Lloyd's algorithm with k-means++ seeding; deterministic for fixed inputs."""
    X = as_points(points)
    n = X.shape[0]
    if n == 0 or X.shape[1] == 0:
        raise ContractViolation("kmeans on empty input")
    if not np.all(np.isfinite(X)):
        raise ContractViolation("kmeans input has non-finite entries")
    if k < 1 or k > n:
        raise ContractViolation(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, k, rng)
    labels, dist = assign_nearest(X, centers)
    history = [float(dist.sum())]
    it = 0
    while it < max_iter:
        it += 1
        centers = _update_centers(X, labels, centers, dist)
        new_labels, dist = assign_nearest(X, centers)
        history.append(float(dist.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    # snap centers to the final partition so assignments are a fixed point
    counts = np.bincount(labels, minlength=k)
    if np.all(counts > 0):
        centers = np.zeros_like(centers)
        np.add.at(centers, labels, X)
        centers /= counts[:, None]
        labels, dist = assign_nearest(X, centers)
    inertia = float(np.sum((X - centers[labels]) ** 2))
    return ClusterModel(centers=centers, assignments=labels, inertia=inertia,
                        n_iter=it, inertia_history=history)


# -- gradient oracle ---------------------------------------------------------

def finite_diff_gradient(f, x, h=1e-5):
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate."""
    if h <= 0:
        raise ContractViolation("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ContractViolation(f"non-finite function value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
