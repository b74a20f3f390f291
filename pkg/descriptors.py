#!/usr/bin/env python3
"""
FocusReg - Descripteurs par point
Fournisseurs de features (oracle, covariance, enrichi par attention), blocs
d'attention chargeables depuis un fichier de poids et encodage géodésique.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from geom_core import PointCloud, RigidTransform, SpatialIndex, knn, radius_neighbors

logger = logging.getLogger(__name__)

ATTW_MAGIC = b'ATTW'
ATTW_VERSION = 1
ATTW_HEADER = np.dtype([('magic', 'S4'), ('version', '<u4'), ('layers', '<u4'), ('D', '<u4')])

COVARIANCE_WIDTH = 8
# tags des flux aléatoires de l'oracle
_MODEL_STREAM, _NOISE_STREAM, _BACKGROUND_STREAM = 0, 1, 2


class FeatureWidthError(ValueError):
    """Largeurs de features incompatibles entre opérandes."""


@dataclass(frozen=True)
class FeatureMap:
    """Un vecteur de largeur D par point; flags marque les points sans voisinage exploitable."""

    vectors: np.ndarray
    flags: Optional[np.ndarray] = None

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise FeatureWidthError(f"FeatureMap attend une matrice N×D (reçu {vectors.shape})")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("FeatureMap contient des valeurs non finies")
        vectors.setflags(write=False)
        object.__setattr__(self, 'vectors', vectors)
        if self.flags is not None:
            flags = np.array(self.flags, dtype=bool).reshape(-1)
            flags.setflags(write=False)
            object.__setattr__(self, 'flags', flags)

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.vectors)

    def gather(self, indices: Sequence[int]) -> 'FeatureMap':
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureMap(self.vectors[idx], None if self.flags is None else self.flags[idx])


@dataclass(frozen=True)
class GeodesicEmbedding:
    vectors: np.ndarray

    @property
    def E(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.vectors)

    def gather(self, indices: Sequence[int]) -> 'GeodesicEmbedding':
        return GeodesicEmbedding(self.vectors[np.asarray(indices, dtype=np.int64)])


@dataclass(frozen=True)
class AttentionLayer:
    """Projections d'une couche: Q = X·W_Qᵀ, K = C·W_Kᵀ, V = C·W_Vᵀ, sortie ·W_Oᵀ."""

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray

    def __post_init__(self):
        shapes = set()
        for name in ('W_Q', 'W_K', 'W_V', 'W_O'):
            matrix = np.array(getattr(self, name), dtype=np.float64)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise FeatureWidthError(f"{name} doit être carrée (reçu {matrix.shape})")
            if not np.all(np.isfinite(matrix)):
                raise ValueError(f"{name} contient des valeurs non finies")
            shapes.add(matrix.shape)
            object.__setattr__(self, name, matrix)
        if len(shapes) != 1:
            raise FeatureWidthError(f"Projections de largeurs différentes: {sorted(shapes)}")

    @property
    def D(self) -> int:
        return self.W_Q.shape[0]


@dataclass(frozen=True)
class AttentionWeights:
    layers: Tuple[AttentionLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("AttentionWeights sans couche")
        if len({layer.D for layer in layers}) != 1:
            raise FeatureWidthError("Couches d'attention de largeurs différentes")
        object.__setattr__(self, 'layers', layers)

    @property
    def D(self) -> int:
        return self.layers[0].D

    @property
    def n_layers(self) -> int:
        return len(self.layers)


class DescriptorProviderConfig(BaseModel):
    """Paramètres du fournisseur de descripteurs."""
    kind: Literal['oracle', 'covariance', 'attention-enhanced'] = 'oracle'
    sigma_f: float = Field(default=0.0, ge=0.0, le=100.0)
    radius: Optional[float] = Field(default=None, gt=0.0)  # défaut: 4 × voxel du profil
    D: int = Field(default=32, ge=1, le=1024)
    base_kind: Literal['oracle', 'covariance'] = 'oracle'  # pour attention-enhanced
    attention_layers: int = Field(default=3, ge=1, le=16)
    attention_weights: Optional[str] = None


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=1, keepdims=True)


def attention_matrix(queries: FeatureMap, context: FeatureMap, layer: AttentionLayer) -> np.ndarray:
    """Matrice softmax (requêtes × clés), lignes de somme 1."""
    _check_width(queries, layer)
    _check_width(context, layer)
    if len(context) == 0:
        raise ValueError("Contexte d'attention vide")
    Q = queries.vectors @ layer.W_Q.T
    K = context.vectors @ layer.W_K.T
    return softmax_rows(Q @ K.T / np.sqrt(layer.D))


def cross_attention(queries: FeatureMap, context: FeatureMap, layer: AttentionLayer,
                    residual: bool = True) -> FeatureMap:
    """Attention produit scalaire mono-tête, clés/valeurs issues du contexte."""
    if len(queries) == 0:
        _check_width(queries, layer)
        return FeatureMap(np.zeros((0, layer.D)))
    A = attention_matrix(queries, context, layer)
    V = context.vectors @ layer.W_V.T
    out = (A @ V) @ layer.W_O.T
    if residual:
        out = queries.vectors + out
    return FeatureMap(out)


def self_attention(features: FeatureMap, layer: AttentionLayer, residual: bool = True) -> FeatureMap:
    return cross_attention(features, features, layer, residual)


def self_attention_stack(features: FeatureMap, weights: AttentionWeights, residual: bool = True) -> FeatureMap:
    for layer in weights.layers:
        features = self_attention(features, layer, residual)
    return features


def cross_attention_stack(queries: FeatureMap, context: FeatureMap, weights: AttentionWeights,
                          residual: bool = True) -> FeatureMap:
    """Chaque couche reçoit la sortie de la précédente; le contexte reste fixe."""
    for layer in weights.layers:
        queries = cross_attention(queries, context, layer, residual)
    return queries


def _check_width(features: FeatureMap, layer: AttentionLayer) -> None:
    if features.D != layer.D:
        raise FeatureWidthError(f"Largeur {features.D} incompatible avec une couche de largeur {layer.D}")


def random_attention_weights(D: int, layers: int = 3, seed: int = 0,
                             scale: Optional[float] = None) -> AttentionWeights:
    """Poids gaussiens d'écart-type scale (défaut 1/√D)."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(D) if scale is None else scale
    return AttentionWeights(tuple(
        AttentionLayer(*(rng.normal(0.0, scale, size=(D, D)) for _ in range(4)))
        for _ in range(layers)
    ))


def save_attention_weights(path, weights: AttentionWeights) -> None:
    """Conteneur binaire: en-tête ATTW (magic, version, couches, D) puis float32 LE,
    ordre couche → (Q, K, V, O) → ligne par ligne."""
    header = np.array([(ATTW_MAGIC, ATTW_VERSION, weights.n_layers, weights.D)], dtype=ATTW_HEADER)
    payload = np.stack([
        np.stack([layer.W_Q, layer.W_K, layer.W_V, layer.W_O]) for layer in weights.layers
    ]).astype('<f4')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(header.tobytes())
        f.write(payload.tobytes())


def load_attention_weights(path) -> AttentionWeights:
    raw = Path(path).read_bytes()
    if len(raw) < ATTW_HEADER.itemsize:
        raise ValueError(f"{path}: fichier de poids trop court")
    header = np.frombuffer(raw, dtype=ATTW_HEADER, count=1)[0]
    if header['magic'] != ATTW_MAGIC:
        raise ValueError(f"{path}: magic {header['magic']!r} au lieu de {ATTW_MAGIC!r}")
    if header['version'] != ATTW_VERSION:
        raise ValueError(f"{path}: version {header['version']} non supportée")
    n_layers, D = int(header['layers']), int(header['D'])
    expected = n_layers * 4 * D * D
    body = np.frombuffer(raw, dtype='<f4', offset=ATTW_HEADER.itemsize)
    if body.size != expected:
        raise ValueError(f"{path}: {body.size} valeurs pour {expected} attendues ({n_layers} couches, D={D})")
    blocks = body.astype(np.float64).reshape(n_layers, 4, D, D)
    return AttentionWeights(tuple(AttentionLayer(*block) for block in blocks))


# ---------------------------------------------------------------------------
# Fournisseurs
# ---------------------------------------------------------------------------

def _unit_rows(rng: np.random.Generator, n: int, D: int) -> np.ndarray:
    vectors = rng.normal(size=(n, D))
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / np.where(norms > 0, norms, 1.0)


def oracle_model_features(n_points: int, D: int, seed: int) -> FeatureMap:
    """Vecteur unitaire pseudo-aléatoire par point du modèle, indexé par son rang."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _MODEL_STREAM]))
    return FeatureMap(_unit_rows(rng, n_points, D))


def oracle_descriptor(scene: PointCloud, model: PointCloud, gt_poses: Sequence[RigidTransform],
                      sigma_f: float, D: int, seed: int) -> Tuple[FeatureMap, FeatureMap]:
    """Descripteurs de supervision: chaque point d'instance reçoit la feature du point
    modèle le plus proche sous l'inverse de sa pose vraie, plus un bruit N(0, σ_f²/D)."""
    if not scene.has_labels:
        raise ValueError("oracle_descriptor: la scène doit porter des labels d'instance")
    if sigma_f < 0:
        raise ValueError(f"sigma_f négatif: {sigma_f}")
    if len(model) == 0:
        raise ValueError("oracle_descriptor: modèle vide")
    labels = scene.labels
    if np.any(labels >= len(gt_poses)) or np.any(labels < -1):
        raise ValueError(f"Labels hors des {len(gt_poses)} poses fournies")

    model_fm = oracle_model_features(len(model), D, seed)
    vectors = np.empty((len(scene), D))

    background = labels < 0
    bg_rng = np.random.default_rng(np.random.SeedSequence([seed, _BACKGROUND_STREAM]))
    vectors[:] = _unit_rows(bg_rng, len(scene), D)

    model_index = SpatialIndex.build(model)
    for k, pose in enumerate(gt_poses):
        members = np.flatnonzero(labels == k)
        if len(members) == 0:
            continue
        local = pose.inverse().apply(scene.points[members])
        _, nearest = knn(model_index, local, 1)
        vectors[members] = model_fm.vectors[nearest[:, 0]]

    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, _NOISE_STREAM]))
    noise = noise_rng.normal(0.0, sigma_f / np.sqrt(D), size=(len(scene), D))
    vectors[~background] += noise[~background]
    return FeatureMap(vectors), model_fm


def covariance_descriptor(cloud: PointCloud, radius: float) -> FeatureMap:
    """Features de covariance locale (largeur 8):
    valeurs propres normalisées e1 ≥ e2 ≥ e3, linéarité, planarité, sphéricité,
    omnivariance et log-densité. Moins de 3 voisins → zéros + flag."""
    if radius <= 0:
        raise ValueError(f"Rayon invalide: {radius}")
    n = len(cloud)
    features = np.zeros((n, COVARIANCE_WIDTH))
    if n == 0:
        return FeatureMap(features, np.zeros(0, dtype=bool))

    points = cloud.points
    neighbors = radius_neighbors(SpatialIndex.build(cloud), points, radius)
    counts = np.array([len(nb) for nb in neighbors], dtype=np.int64)
    rows = np.repeat(np.arange(n), counts)
    cols = np.concatenate(neighbors)

    safe = np.maximum(counts, 1)[:, None]
    means = np.zeros((n, 3))
    np.add.at(means, rows, points[cols])
    means /= safe
    centered = points[cols] - means[rows]
    cov = np.zeros((n, 3, 3))
    np.add.at(cov, rows, centered[:, :, None] * centered[:, None, :])
    cov /= safe[:, :, None]

    eig = np.clip(np.linalg.eigvalsh(cov)[:, ::-1], 0.0, None)
    trace = eig.sum(axis=1)
    valid = (counts >= 3) & (trace > 0)

    e = eig[valid] / trace[valid, None]
    e1, e2, e3 = e[:, 0], e[:, 1], e[:, 2]
    volume = 4.0 / 3.0 * np.pi * radius ** 3
    features[valid] = np.stack([
        e1, e2, e3,
        (e1 - e2) / e1,
        (e2 - e3) / e1,
        e3 / e1,
        np.cbrt(e1 * e2 * e3),
        np.log(counts[valid] / volume),
    ], axis=1)

    flagged = ~valid
    if np.any(flagged):
        logger.debug("covariance_descriptor: %d points avec moins de 3 voisins", int(flagged.sum()))
    return FeatureMap(features, flagged)


def pad_features(features: FeatureMap, D: int) -> FeatureMap:
    if features.D > D:
        raise FeatureWidthError(f"Largeur native {features.D} > D={D}")
    if features.D == D:
        return features
    padded = np.zeros((len(features), D))
    padded[:, :features.D] = features.vectors
    return FeatureMap(padded, features.flags)


def geodesic_embedding(distances: np.ndarray, E: int, base_period: float) -> GeodesicEmbedding:
    """Encodage sinusoïdal (sin, cos entrelacés) aux périodes base_period / 2^k.

    Une distance infinie (point inatteignable) donne le vecteur nul.
    """
    if E < 2 or E % 2:
        raise ValueError(f"E doit être pair et ≥ 2 (reçu {E})")
    if base_period <= 0:
        raise ValueError(f"Période de base invalide: {base_period}")
    distances = np.asarray(distances, dtype=np.float64).reshape(-1)
    finite = np.isfinite(distances)
    periods = base_period / 2.0 ** np.arange(E // 2)
    angles = 2.0 * np.pi * np.where(finite, distances, 0.0)[:, None] / periods[None, :]
    vectors = np.zeros((len(distances), E))
    vectors[:, 0::2] = np.sin(angles)
    vectors[:, 1::2] = np.cos(angles)
    vectors[~finite] = 0.0
    return GeodesicEmbedding(vectors)


def pool_patch_features(features: FeatureMap, members: List[np.ndarray]) -> FeatureMap:
    """Feature d'ancre = moyenne normalisée (L2) des features de ses membres."""
    pooled = np.zeros((len(members), features.D))
    for i, idx in enumerate(members):
        if len(idx):
            pooled[i] = features.vectors[idx].mean(axis=0)
    norms = np.linalg.norm(pooled, axis=1, keepdims=True)
    return FeatureMap(pooled / np.where(norms > 0, norms, 1.0))


class DescriptorProvider:
    """Interface commune: features(scène, modèle, poses) puis enhance() au niveau des ancres."""

    needs_ground_truth = False

    def __init__(self, config: DescriptorProviderConfig, seed: int = 0):
        self.config = config
        self.seed = seed

    @property
    def width(self) -> int:
        return self.config.D

    def features(self, scene: PointCloud, model: PointCloud,
                 gt_poses: Optional[Sequence[RigidTransform]] = None) -> Tuple[FeatureMap, FeatureMap]:
        raise NotImplementedError

    def enhance(self, anchors: FeatureMap) -> FeatureMap:
        return anchors


class OracleProvider(DescriptorProvider):
    needs_ground_truth = True

    def features(self, scene, model, gt_poses=None):
        if gt_poses is None:
            raise ValueError("Le fournisseur oracle exige les poses vraies (manifeste)")
        return oracle_descriptor(scene, model, gt_poses, self.config.sigma_f, self.config.D, self.seed)


class CovarianceProvider(DescriptorProvider):
    def __init__(self, config: DescriptorProviderConfig, seed: int = 0, radius: Optional[float] = None):
        super().__init__(config, seed)
        self.radius = config.radius if config.radius is not None else radius
        if self.radius is None:
            raise ValueError("Le fournisseur covariance exige un rayon de voisinage")
        self.D = max(config.D, COVARIANCE_WIDTH)

    @property
    def width(self) -> int:
        return self.D

    def features(self, scene, model, gt_poses=None):
        return (pad_features(covariance_descriptor(scene, self.radius), self.D),
                pad_features(covariance_descriptor(model, self.radius), self.D))


class AttentionEnhancedProvider(DescriptorProvider):
    """Fournisseur de base suivi d'auto-attention empilée sur les ancres."""

    def __init__(self, base: DescriptorProvider, weights: AttentionWeights):
        super().__init__(base.config, base.seed)
        self.base = base
        self.weights = weights
        self.needs_ground_truth = base.needs_ground_truth

    @property
    def width(self) -> int:
        return self.base.width

    def features(self, scene, model, gt_poses=None):
        scene_fm, model_fm = self.base.features(scene, model, gt_poses)
        if scene_fm.D != self.weights.D:
            raise FeatureWidthError(f"Features de largeur {scene_fm.D}, poids d'attention de largeur {self.weights.D}")
        return scene_fm, model_fm

    def enhance(self, anchors: FeatureMap) -> FeatureMap:
        if len(anchors) == 0:
            return anchors
        return self_attention_stack(anchors, self.weights)


def make_provider(config: DescriptorProviderConfig, seed: int = 0,
                  default_radius: Optional[float] = None) -> DescriptorProvider:
    """Construit le fournisseur décrit par la configuration."""
    kind = config.base_kind if config.kind == 'attention-enhanced' else config.kind
    if kind == 'oracle':
        base = OracleProvider(config, seed)
    else:
        base = CovarianceProvider(config, seed, default_radius)
    if config.kind != 'attention-enhanced':
        return base

    width = base.width
    if config.attention_weights:
        weights = load_attention_weights(config.attention_weights)
        logger.info("Poids d'attention chargés: %s (%d couches, D=%d)",
                    config.attention_weights, weights.n_layers, weights.D)
    else:
        weights = random_attention_weights(width, config.attention_layers, seed)
    return AttentionEnhancedProvider(base, weights)
