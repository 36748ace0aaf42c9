"""Region graph construction: adjacency, Laplacians, Chebyshev filter basis.

Nodes are geographic units with planar centroids (meters) and a small static
feature vector. Edge weights blend two Gaussian kernels, one over centroid
distance and one over static-feature distance, with a fixed 0.9/0.1 split in
favor of physical proximity. From the weighted adjacency we derive the
combinatorial Laplacian ``L = D - A``, rescale it with its largest eigenvalue
so the spectrum lands in [-1, 1], and precompute the Chebyshev polynomial
matrices the spectral graph convolution consumes.

Every reduction over the node axis (kernel bandwidth statistics, degree sums,
power-iteration matvecs, the Chebyshev recurrence products) adds terms in
ascending value order. That makes every derived quantity a function of the
node *multiset*, so relabeling nodes produces bit-identical permuted
matrices; graphs are reproducible artifacts, not "close enough" ones.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, UsageError

__all__ = [
    "StaticFeatures",
    "UnitNode",
    "RegionGraph",
    "static_norm_stats",
    "pairwise_static_distance",
    "build_adjacency",
    "laplacian",
    "power_iteration_lambda_max",
    "scaled_laplacian",
    "chebyshev_basis",
    "load_nodes_csv",
    "save_adjacency_csv",
]

# numeric static fields, in the order they enter the distance vector
_NUMERIC_FIELDS = ("in_floodplain", "residential_ratio", "dist_coast", "dist_stream")


def _csum(a: np.ndarray) -> float:
    """Order-canonical sum: terms added in ascending value order."""
    return float(np.sum(np.sort(a, axis=None)))


def _cmean_std(values: np.ndarray) -> tuple[float, float]:
    """Population mean/std computed with order-canonical sums."""
    n = values.size
    mean = _csum(values) / n
    var = _csum((values - mean) ** 2) / n
    return mean, float(np.sqrt(var))


@dataclass(frozen=True)
class StaticFeatures:
    """Per-unit static descriptors used for adjacency similarity."""

    in_floodplain: bool
    residential_ratio: float
    watershed_id: str
    dist_coast: float
    dist_stream: float

    def __post_init__(self):
        vals = (float(self.in_floodplain), self.residential_ratio,
                self.dist_coast, self.dist_stream)
        if not all(np.isfinite(v) for v in vals):
            raise DomainError("static features must be finite")
        if not 0.0 <= self.residential_ratio <= 1.0:
            raise DomainError(f"residential_ratio {self.residential_ratio} outside [0, 1]")
        if self.dist_coast < 0 or self.dist_stream < 0:
            raise DomainError("distances must be nonnegative")

    def numeric_vector(self) -> np.ndarray:
        return np.array([float(self.in_floodplain), self.residential_ratio,
                         self.dist_coast, self.dist_stream])


@dataclass(frozen=True)
class UnitNode:
    """One geographic unit: id, planar centroid in meters, static features."""

    id: str
    x: float
    y: float
    static: StaticFeatures

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise DomainError(f"node {self.id} has non-finite coordinates")


def static_norm_stats(nodes: Sequence[UnitNode]) -> dict[str, tuple[float, float]]:
    """Mean/std per numeric static field over the node set.

    Fields that are constant across the population (std == 0) are dropped
    from the returned dict and therefore from the distance vector.
    """
    stats: dict[str, tuple[float, float]] = {}
    mat = np.array([n.static.numeric_vector() for n in nodes])
    for j, field in enumerate(_NUMERIC_FIELDS):
        mean, std = _cmean_std(mat[:, j])
        if std > 0.0:
            stats[field] = (mean, std)
    return stats


def pairwise_static_distance(a: StaticFeatures, b: StaticFeatures,
                             norm_stats: dict[str, tuple[float, float]]) -> float:
    """Euclidean distance between two z-scored static feature vectors.

    The watershed id is categorical, so it contributes a 0/1 mismatch
    coordinate instead of a z-scored delta. Fields absent from
    ``norm_stats`` (constant over the population) are skipped.
    """
    total = 0.0
    av, bv = a.numeric_vector(), b.numeric_vector()
    for j, field in enumerate(_NUMERIC_FIELDS):
        if field not in norm_stats:
            continue
        mean, std = norm_stats[field]
        dz = (av[j] - mean) / std - (bv[j] - mean) / std
        total += dz * dz
    total += 0.0 if a.watershed_id == b.watershed_id else 1.0
    return float(np.sqrt(total))


def build_adjacency(nodes: Sequence[UnitNode], w_dist: float = 0.9,
                    w_feat: float = 0.1, epsilon: float = 1e-4) -> np.ndarray:
    """Weighted adjacency from centroid proximity and static similarity.

    For i != j::

        A_ij = w_dist * exp(-(d_ij / sigma_d)^2) + w_feat * exp(-(s_ij / sigma_s)^2)

    where ``d`` is centroid distance, ``s`` the static-feature distance, and
    each ``sigma`` is the population std of that quantity's off-diagonal
    values (data-driven kernel bandwidths). Entries below ``epsilon`` are
    zeroed to keep large graphs sparse-ish; the diagonal is zero.
    """
    n = len(nodes)
    if n < 2:
        raise UsageError(f"need at least 2 nodes, got {n}")
    if w_dist < 0 or w_feat < 0 or abs(w_dist + w_feat - 1.0) > 1e-12:
        raise UsageError(f"weights must be nonnegative and sum to 1, got {w_dist}, {w_feat}")
    ids = [node.id for node in nodes]
    if len(set(ids)) != n:
        raise UsageError("node ids must be unique")

    xy = np.array([[node.x, node.y] for node in nodes])
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])

    stats = static_norm_stats(nodes)
    # z-score numerics, then take pairwise squared deltas plus watershed mismatch
    zcols = []
    for j, field in enumerate(_NUMERIC_FIELDS):
        if field not in stats:
            continue
        mean, std = stats[field]
        col = np.array([(node.static.numeric_vector()[j] - mean) / std for node in nodes])
        zcols.append(col)
    s2 = np.zeros((n, n))
    for col in zcols:
        dz = col[:, None] - col[None, :]
        s2 += dz * dz
    sheds = [node.static.watershed_id for node in nodes]
    mismatch = np.array([[0.0 if a == b else 1.0 for b in sheds] for a in sheds])
    s = np.sqrt(s2 + mismatch)

    off = ~np.eye(n, dtype=bool)
    _, sigma_d = _cmean_std(d[off])
    _, sigma_s = _cmean_std(s[off])
    if sigma_d == 0.0:
        warnings.warn("all pairwise centroid distances identical; using sigma_d = 1")
        sigma_d = 1.0
    if sigma_s == 0.0:
        warnings.warn("all pairwise static distances identical; using sigma_s = 1")
        sigma_s = 1.0

    a = w_dist * np.exp(-((d / sigma_d) ** 2)) + w_feat * np.exp(-((s / sigma_s) ** 2))
    np.fill_diagonal(a, 0.0)
    a[a < epsilon] = 0.0
    return a


def _validate_adjacency(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise UsageError(f"adjacency must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("adjacency contains non-finite values")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-12:
        raise UsageError("adjacency must be symmetric")
    if np.any(a < 0):
        raise UsageError("adjacency must be nonnegative")
    if np.any(np.diag(a) != 0.0):
        raise UsageError("adjacency diagonal must be zero")


def laplacian(a: np.ndarray) -> np.ndarray:
    """Combinatorial Laplacian ``L = D - A`` with canonical degree sums."""
    _validate_adjacency(a)
    degrees = np.array([_csum(row) for row in a])
    lap = np.diag(degrees) - a
    return lap


def _matvec_sorted(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    prod = m * v[None, :]
    return np.sum(np.sort(prod, axis=1), axis=1)


def _dot_sorted(a: np.ndarray, b: np.ndarray) -> float:
    return _csum(a * b)


def _start_vector(lap: np.ndarray) -> np.ndarray:
    """Deterministic start for power iteration.

    Candidates are functions of the matrix that permute with its rows, so the
    whole iteration (and thus lambda_max) is invariant under node relabeling.
    A candidate must have a nonzero image under L (the degree vector, for
    example, is null on any component where degrees are equal). A fixed ramp
    is the last resort for graphs whose symmetry kills every equivariant
    candidate; on such graphs relabel-invariance of lambda_max is only
    guaranteed for permutations that leave the matrix bit-identical.
    """
    n = lap.shape[0]
    scale = float(np.max(np.abs(lap), initial=0.0))
    candidates = [np.diag(lap).copy(),
                  np.array([_csum(row * row) for row in lap]),
                  np.linspace(1.0, 2.0, n)]
    for cand in candidates:
        if cand.max() - cand.min() <= 0.0:
            continue
        image = _matvec_sorted(lap, cand)
        img_norm = np.sqrt(_dot_sorted(image, image))
        if img_norm > 1e-12 * scale * np.sqrt(_dot_sorted(cand, cand)):
            return cand
    return candidates[-1]


def power_iteration_lambda_max(lap: np.ndarray, tol: float = 1e-9,
                               max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops when the residual ``||L v - lambda v||`` drops below
    ``tol * lambda`` (which bounds the eigenvalue error for symmetric
    matrices), or after ``max_iter`` sweeps with a warning.
    """
    n = lap.shape[0]
    if n == 0:
        raise UsageError("empty matrix")
    v = _start_vector(lap)
    nrm = np.sqrt(_dot_sorted(v, v))
    if nrm == 0.0:
        return 0.0
    v = v / nrm
    lam = 0.0
    for _ in range(max_iter):
        w = _matvec_sorted(lap, v)
        wn = np.sqrt(_dot_sorted(w, w))
        if wn <= 1e-300:
            return 0.0
        lam = _dot_sorted(v, w)
        resid = w - lam * v
        if np.sqrt(_dot_sorted(resid, resid)) <= tol * max(abs(lam), 1e-300):
            return float(lam)
        v = w / wn
    warnings.warn(f"power iteration did not reach tol={tol} in {max_iter} iterations")
    return float(lam)


def scaled_laplacian(lap: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Rescale ``L`` to ``(2 / lambda_max) L - I`` with spectrum in [-1, 1].

    ``lambda_max`` comes from power iteration; the estimate is inflated by
    one tolerance unit so a slight underestimate cannot push the top of the
    spectrum past +1. An (almost) edgeless graph has ``lambda_max ~ 0``; that
    degenerate case falls back to ``lambda_max = 2``, i.e. ``L_tilde = L - I``.
    """
    if np.max(np.abs(lap - lap.T), initial=0.0) > 1e-12:
        raise UsageError("laplacian must be symmetric")
    n = lap.shape[0]
    lam = power_iteration_lambda_max(lap, tol=tol)
    if lam < 1e-12:
        warnings.warn("laplacian is (numerically) zero; using lambda_max = 2")
        lam = 2.0
    else:
        lam = lam * (1.0 + tol)
    scaled = (2.0 / lam) * lap - np.eye(n)
    return scaled, float(lam)


def _matmul_sorted(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, k) @ (k, m) with each output entry summed in ascending value order."""
    n, k = a.shape
    m = b.shape[1]
    out = np.empty((n, m))
    chunk = max(1, int(4_000_000 // max(1, n * k)))
    for j0 in range(0, m, chunk):
        prod = a[:, :, None] * b[None, :, j0:j0 + chunk]
        out[:, j0:j0 + chunk] = np.sum(np.sort(prod, axis=1), axis=1)
    return out


def chebyshev_basis(scaled: np.ndarray, k: int) -> list[np.ndarray]:
    """Chebyshev matrices ``T_0 = I, T_1 = L~, T_j = 2 L~ T_{j-1} - T_{j-2}``."""
    if k < 1:
        raise UsageError(f"K must be >= 1, got {k}")
    n = scaled.shape[0]
    basis = [np.eye(n)]
    if k > 1:
        basis.append(scaled.copy())
    for _ in range(2, k):
        basis.append(2.0 * _matmul_sorted(scaled, basis[-1]) - basis[-2])
    return basis


@dataclass(frozen=True)
class RegionGraph:
    """Immutable bundle of a node set and its derived spectral operators."""

    nodes: tuple[UnitNode, ...]
    adjacency: np.ndarray
    degree: np.ndarray             # diagonal entries of D
    laplacian: np.ndarray
    scaled_laplacian: np.ndarray
    lambda_max: float
    cheb_basis: tuple[np.ndarray, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    @property
    def order(self) -> int:
        return len(self.cheb_basis)

    @classmethod
    def from_adjacency(cls, nodes: Sequence[UnitNode], adjacency: np.ndarray,
                       k: int = 3) -> "RegionGraph":
        if adjacency.shape != (len(nodes), len(nodes)):
            raise UsageError(f"adjacency shape {adjacency.shape} does not match {len(nodes)} nodes")
        lap = laplacian(adjacency)
        scaled, lam = scaled_laplacian(lap)
        basis = chebyshev_basis(scaled, k)
        arrays = [adjacency, np.diag(lap).copy(), lap, scaled, *basis]
        for arr in arrays:
            arr.setflags(write=False)
        return cls(nodes=tuple(nodes), adjacency=adjacency, degree=arrays[1],
                   laplacian=lap, scaled_laplacian=scaled, lambda_max=lam,
                   cheb_basis=tuple(basis))

    @classmethod
    def build(cls, nodes: Sequence[UnitNode], k: int = 3, w_dist: float = 0.9,
              w_feat: float = 0.1, epsilon: float = 1e-4) -> "RegionGraph":
        return cls.from_adjacency(nodes, build_adjacency(nodes, w_dist, w_feat, epsilon), k=k)

    @classmethod
    def edgeless(cls, nodes: Sequence[UnitNode], k: int = 3) -> "RegionGraph":
        """Graph-free ablation: zero adjacency, so ``L~ = -I`` and T_j = (-1)^j I."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return cls.from_adjacency(nodes, np.zeros((len(nodes), len(nodes))), k=k)


# -- CSV interfaces ----------------------------------------------------------

NODES_HEADER = ["id", "x", "y", "in_floodplain", "residential_ratio",
                "watershed_id", "dist_coast", "dist_stream"]


def load_nodes_csv(path: str | Path) -> list[UnitNode]:
    """Read the node table (`id,x,y,in_floodplain,...` header, see NODES_HEADER)."""
    nodes = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != NODES_HEADER:
            raise UsageError(f"unexpected nodes header {reader.fieldnames} in {path}")
        for row in reader:
            static = StaticFeatures(
                in_floodplain=bool(int(row["in_floodplain"])),
                residential_ratio=float(row["residential_ratio"]),
                watershed_id=row["watershed_id"],
                dist_coast=float(row["dist_coast"]),
                dist_stream=float(row["dist_stream"]),
            )
            nodes.append(UnitNode(id=row["id"], x=float(row["x"]), y=float(row["y"]),
                                  static=static))
    if not nodes:
        raise UsageError(f"no nodes in {path}")
    return nodes


def save_adjacency_csv(graph: RegionGraph, path: str | Path) -> None:
    """Write nonzero upper-triangle edges as `id_i,id_j,weight`."""
    ids = graph.node_ids
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id_i", "id_j", "weight"])
        n = graph.n_nodes
        for i in range(n):
            for j in range(i + 1, n):
                w = graph.adjacency[i, j]
                if w != 0.0:
                    writer.writerow([ids[i], ids[j], repr(float(w))])
