#!/usr/bin/env python3
"""
FocusReg - Primitives géométriques partagées par toutes les étapes
Nuages de points, transformations rigides, index spatial, sous-échantillonnage,
estimation de pose (Kabsch pondéré) et mesures d'erreur de pose.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

# Tolérances des invariants
ORTHO_TOL = 1e-9
NORMAL_TOL = 1e-6
UNREACHABLE = np.inf


class InvariantError(ValueError):
    """Violation d'un invariant de type (rotation non orthonormée, labels incohérents...)."""


class DegenerateInputError(ValueError):
    """Configuration dégénérée (points colinéaires ou confondus, poids nuls)."""


def derive_seed(run_seed: int, *keys) -> int:
    """Graine stable dérivée de (graine du run, clés) par blake2b, indépendante de l'ordonnancement."""
    payload = ':'.join(str(k) for k in (run_seed,) + keys).encode('utf-8')
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), 'little')


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PointCloud:
    """Nuage de points (mètres) avec labels d'instance (-1 = fond) et normales optionnels."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise InvariantError("Coordonnées non finies dans le nuage de points")
        object.__setattr__(self, 'points', _frozen(points))

        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(points):
                raise InvariantError(
                    f"Labels ({len(labels)}) et points ({len(points)}) de tailles différentes"
                )
            object.__setattr__(self, 'labels', _frozen(labels))

        if self.normals is not None:
            normals = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(points):
                raise InvariantError("Normales et points de tailles différentes")
            norms = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(norms - 1.0) > NORMAL_TOL):
                raise InvariantError("Normales non unitaires")
            object.__setattr__(self, 'normals', _frozen(normals))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def gather(self, indices: Sequence[int]) -> 'PointCloud':
        """Sous-nuage aux indices donnés (labels et normales suivent)."""
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            points=self.points[idx],
            labels=None if self.labels is None else self.labels[idx],
            normals=None if self.normals is None else self.normals[idx],
        )

    def transformed(self, transform: 'RigidTransform') -> 'PointCloud':
        normals = None if self.normals is None else self.normals @ transform.R.T
        return PointCloud(transform.apply(self.points), self.labels, normals)

    def with_labels(self, labels: Optional[np.ndarray]) -> 'PointCloud':
        return PointCloud(self.points, labels, self.normals)

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("Centroïde d'un nuage vide")
        return self.points.mean(axis=0)

    def radius(self) -> float:
        """Distance max entre le centroïde et un point du nuage."""
        return float(np.max(np.linalg.norm(self.points - self.centroid(), axis=1)))


@dataclass(frozen=True)
class RigidTransform:
    """Transformation rigide x -> R x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvariantError("Transformation non finie")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise InvariantError("R n'est pas orthonormée (RᵀR ≠ I)")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvariantError("det(R) ≠ 1")
        object.__setattr__(self, 'R', _frozen(R))
        object.__setattr__(self, 't', _frozen(t))

    @classmethod
    def identity(cls) -> 'RigidTransform':
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> 'RigidTransform':
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.R
        matrix[:3, 3] = self.t
        return matrix

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def inverse(self) -> 'RigidTransform':
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: 'RigidTransform') -> 'RigidTransform':
        """self ∘ other : applique d'abord other puis self."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def __matmul__(self, other: 'RigidTransform') -> 'RigidTransform':
        return self.compose(other)


@dataclass(frozen=True)
class SpatialIndex:
    """k-d tree immuable sur un nuage, requêtes exactes (égalité avec la force brute)."""

    points: np.ndarray
    tree: cKDTree = field(repr=False)

    @classmethod
    def build(cls, cloud) -> 'SpatialIndex':
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        points = _frozen(np.array(points, dtype=np.float64).reshape(-1, 3))
        return cls(points=points, tree=cKDTree(points, leafsize=32))

    def __len__(self) -> int:
        return len(self.points)


def ball_query(index: SpatialIndex, center: np.ndarray, radius: float) -> np.ndarray:
    """Indices i avec ‖p_i − center‖ ≤ radius (bord inclus), triés."""
    if radius < 0:
        raise ValueError(f"Rayon négatif: {radius}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if len(index) == 0:
        return np.zeros(0, dtype=np.int64)
    # marge sur le k-d tree, le filtre exact tranche
    candidates = np.asarray(index.tree.query_ball_point(center, radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
    if len(candidates) == 0:
        return candidates
    dist = np.linalg.norm(index.points[candidates] - center, axis=1)
    return np.sort(candidates[dist <= radius])


def radius_neighbors(
    index: SpatialIndex, queries: np.ndarray, radius: float, threads: int = 1
) -> List[np.ndarray]:
    """ball_query pour un lot de centres; le parallélisme ne change pas le résultat."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if threads <= 1 or len(queries) < 2:
        return [ball_query(index, q, radius) for q in queries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda q: ball_query(index, q, radius), queries))


def knn(index: SpatialIndex, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """k plus proches voisins, égalités de distance départagées par l'indice le plus bas."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    n = len(index)
    if k < 1 or k > n:
        raise ValueError(f"k={k} invalide pour {n} points")
    extra = min(k + 1, n)
    _, idx = index.tree.query(queries, k=extra)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), extra)
    # distances recalculées comme la force brute, puis tri (distance, indice)
    dist = np.linalg.norm(index.points[idx] - queries[:, None, :], axis=2)
    order = np.lexsort((idx, dist), axis=-1)
    idx = np.take_along_axis(idx, order, axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    out_idx = idx[:, :k].copy()
    out_dist = dist[:, :k].copy()

    if extra > k:
        # égalité à la frontière: on récupère tout l'anneau par requête de boule
        for row in np.flatnonzero(dist[:, k - 1] == dist[:, k]):
            cand = ball_query(index, queries[row], dist[row, k - 1])
            cand_dist = np.linalg.norm(index.points[cand] - queries[row], axis=1)
            best = np.lexsort((cand, cand_dist))[:k]
            out_idx[row] = cand[best]
            out_dist[row] = cand_dist[best]
    return out_dist, out_idx


def voxel_downsample(cloud: PointCloud, voxel: float) -> Tuple[PointCloud, List[np.ndarray]]:
    """Grille de voxels: un centroïde par voxel occupé + carte d'indices vers la source.

    Les labels sont propagés par vote majoritaire (égalité -> plus petit label).
    """
    if voxel <= 0:
        raise ValueError(f"Taille de voxel invalide: {voxel}")
    if len(cloud) == 0:
        labels = None if cloud.labels is None else np.zeros(0, dtype=np.int64)
        return PointCloud(np.zeros((0, 3)), labels), []

    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_vox = len(counts)

    sums = np.zeros((n_vox, 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]

    order = np.argsort(inverse, kind='stable')
    index_map = np.split(order, np.cumsum(counts)[:-1])

    labels = None
    if cloud.labels is not None:
        pairs, pair_counts = np.unique(
            np.stack([inverse, cloud.labels], axis=1), axis=0, return_counts=True
        )
        # tri par voxel, puis effectif décroissant, puis label croissant
        ranking = np.lexsort((pairs[:, 1], -pair_counts, pairs[:, 0]))
        ranked = pairs[ranking]
        first = np.ones(len(ranked), dtype=bool)
        first[1:] = ranked[1:, 0] != ranked[:-1, 0]
        labels = np.empty(n_vox, dtype=np.int64)
        labels[ranked[first, 0]] = ranked[first, 1]

    return PointCloud(centroids, labels), index_map


def weighted_kabsch(src: np.ndarray, dst: np.ndarray, weights: Optional[np.ndarray] = None) -> RigidTransform:
    """argmin_T Σ w_k ‖T(src_k) − dst_k‖² par SVD, sans réflexion.

    Lève DegenerateInputError si moins de 3 points effectifs ou configuration colinéaire.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"Formes incompatibles: {src.shape} vs {dst.shape}")
    if weights is None:
        weights = np.ones(len(src))
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(weights) != len(src) or np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("Poids invalides (négatifs, non finis ou mauvaise taille)")

    active = weights > 0
    if np.count_nonzero(active) < 3:
        raise DegenerateInputError(f"{np.count_nonzero(active)} points effectifs (< 3)")
    w = weights[active] / weights[active].sum()
    src, dst = src[active], dst[active]

    src_c = w @ src
    dst_c = w @ dst
    src_0 = src - src_c
    dst_0 = dst - dst_c

    spread = np.linalg.svd(np.sqrt(w)[:, None] * src_0, compute_uv=False)
    if spread[0] == 0.0 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateInputError("Points source colinéaires ou confondus")

    H = src_0.T @ (w[:, None] * dst_0)
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    if d == 0:
        d = 1.0
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    # re-projection pour tenir RᵀR = I à 1e-9 près même après l'arrondi
    U2, _, Vt2 = np.linalg.svd(R)
    R = U2 @ Vt2
    t = dst_c - R @ src_c
    return RigidTransform(R, t)


def rre(R_pred: np.ndarray, R_gt: np.ndarray) -> float:
    """Erreur de rotation relative en degrés, dans [0°, 180°].

    Égale à arccos(clamp((tr(R_gtᵀ R_pred) − 1)/2)) ; la forme atan2 garde la précision
    près de 0° et 180°.
    """
    M = np.asarray(R_gt, dtype=np.float64).T @ np.asarray(R_pred, dtype=np.float64)
    cos_part = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    axis = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    sin_part = np.linalg.norm(axis) / 2.0
    return float(np.degrees(np.arctan2(sin_part, cos_part)))


def rte(t_pred: np.ndarray, t_gt: np.ndarray) -> float:
    """Erreur de translation relative (mètres)."""
    return float(np.linalg.norm(np.asarray(t_pred, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def knn_graph(cloud: PointCloud, k: int) -> csr_matrix:
    """Graphe kNN symétrique (arête gardée si l'une des extrémités la choisit), poids euclidiens."""
    n = len(cloud)
    if k < 2:
        raise ValueError(f"k doit être ≥ 2 (reçu {k})")
    if n < 2:
        return csr_matrix((n, n))
    k_eff = min(k, n - 1)
    dist, idx = knn(SpatialIndex.build(cloud), cloud.points, k_eff + 1)
    rows = np.repeat(np.arange(n), k_eff + 1)
    cols = idx.reshape(-1)
    weights = dist.reshape(-1)
    keep = rows != cols
    rows, cols, weights = rows[keep], cols[keep], weights[keep]

    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    edges, first = np.unique(np.stack([lo, hi], axis=1), axis=0, return_index=True)
    w = weights[first]
    both_rows = np.concatenate([edges[:, 0], edges[:, 1]])
    both_cols = np.concatenate([edges[:, 1], edges[:, 0]])
    # les arêtes de longueur nulle restent stockées explicitement (= arêtes)
    return coo_matrix((np.concatenate([w, w]), (both_rows, both_cols)), shape=(n, n)).tocsr()


def geodesic_distances(cloud: PointCloud, k: int, sources: Sequence[int]) -> np.ndarray:
    """Distance géodésique (plus court chemin sur le graphe kNN) à la source la plus proche.

    Les points inatteignables reçoivent +inf.
    """
    sources = np.unique(np.asarray(sources, dtype=np.int64).reshape(-1))
    if len(sources) == 0:
        raise ValueError("Aucune source pour les distances géodésiques")
    if np.any(sources < 0) or np.any(sources >= len(cloud)):
        raise ValueError("Indice de source hors du nuage")
    graph = knn_graph(cloud, k)
    dist = dijkstra(graph, directed=False, indices=sources, min_only=True)
    return np.asarray(dist, dtype=np.float64)
