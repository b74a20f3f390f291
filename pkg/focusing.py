#!/usr/bin/env python3
"""
FocusReg - Étape 1: focalisation multi-objets
Décalage des points vers leur centre d'instance, filtrage par masque, DBSCAN,
moyenne par cluster puis découpe des propositions par boule.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from descriptors import (
    AttentionLayer,
    AttentionWeights,
    DescriptorProvider,
    DescriptorProviderConfig,
    FeatureMap,
    FeatureWidthError,
    GeodesicEmbedding,
    cross_attention_stack,
    geodesic_embedding,
    make_provider,
    random_attention_weights,
)
from geom_core import (
    PointCloud,
    SpatialIndex,
    ball_query,
    derive_seed,
    geodesic_distances,
    knn,
    radius_neighbors,
    voxel_downsample,
)
from ply_io import write_ply

logger = logging.getLogger(__name__)

FOCUS_ATTENTION_LAYERS = 3


class FocusParams(BaseModel):
    """Paramètres de l'étape de focalisation."""
    mode: Literal['oracle', 'heads', 'gt-centers'] = 'oracle'
    eps: Optional[float] = Field(default=None, gt=0.0)  # défaut: eps_factor × rayon modèle
    eps_factor: float = Field(default=0.25, gt=0.0, le=10.0)
    min_pts: int = Field(default=5, ge=1, le=10000)
    tau: float = Field(default=0.5, gt=0.0, lt=1.0)
    scale: float = Field(default=1.2, gt=0.0, le=10.0)
    max_points: int = Field(default=4096, ge=1)
    sample_voxel_factor: float = Field(default=2.0, gt=0.0)
    geodesic_k: int = Field(default=8, ge=2, le=64)
    geodesic_width: int = Field(default=16, ge=2, le=256)
    heads_path: Optional[str] = None


@dataclass(frozen=True)
class OffsetField:
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(vectors)):
            raise ValueError("OffsetField non fini")
        object.__setattr__(self, 'vectors', vectors)

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass(frozen=True)
class MaskScores:
    scores: np.ndarray

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(scores)) or np.any(scores < 0) or np.any(scores > 1):
            raise ValueError("Scores de masque hors de [0, 1]")
        object.__setattr__(self, 'scores', scores)

    def __len__(self) -> int:
        return len(self.scores)

    @classmethod
    def constant(cls, n: int, value: float = 1.0) -> 'MaskScores':
        return cls(np.full(n, value))


@dataclass(frozen=True)
class CenterSet:
    centers: np.ndarray
    members: Tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'centers', np.array(self.centers, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, 'members', tuple(np.asarray(m, dtype=np.int64) for m in self.members))

    def __len__(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class Proposal:
    """Sous-nuage découpé autour d'un centre détecté."""

    id: int
    center: np.ndarray
    radius: float
    indices: np.ndarray
    cloud: PointCloud

    def __len__(self) -> int:
        return len(self.indices)


# ---------------------------------------------------------------------------
# Têtes perceptron
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Perceptron:
    """Couches (W, b) appliquées ligne à ligne, ReLU entre les couches."""

    layers: Tuple[Tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        layers = []
        for W, b in self.layers:
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if W.ndim != 2 or W.shape[0] != len(b):
                raise FeatureWidthError(f"Couche incohérente: W {W.shape}, b {b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("Paramètres de tête non finis")
            layers.append((W, b))
        for (W1, _), (W2, _) in zip(layers, layers[1:]):
            if W2.shape[1] != W1.shape[0]:
                raise FeatureWidthError("Couches successives de largeurs incompatibles")
        object.__setattr__(self, 'layers', tuple(layers))

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise FeatureWidthError(f"Entrée de largeur {x.shape[-1]} pour une tête de largeur {self.in_width}")
        for i, (W, b) in enumerate(self.layers):
            x = x @ W.T + b
            if i < len(self.layers) - 1:
                x = np.maximum(x, 0.0)
        return x


def random_perceptron(widths: Sequence[int], rng: np.random.Generator) -> Perceptron:
    return Perceptron(tuple(
        (rng.normal(0.0, 1.0 / np.sqrt(w_in), size=(w_out, w_in)), np.zeros(w_out))
        for w_in, w_out in zip(widths[:-1], widths[1:])
    ))


@dataclass(frozen=True)
class FocusHeads:
    """Tête d'offset (D → 3) et tête de masque (D + E → 1)."""

    offset: Perceptron
    mask: Perceptron
    attention: Optional[AttentionWeights] = None


def random_focus_heads(D: int, E: int, seed: int = 0, hidden: Optional[int] = None,
                       attention_layers: int = FOCUS_ATTENTION_LAYERS) -> FocusHeads:
    rng = np.random.default_rng(seed)
    hidden = 2 * D if hidden is None else hidden
    return FocusHeads(
        offset=random_perceptron([D, hidden, 3], rng),
        mask=random_perceptron([D + E, hidden, 1], rng),
        attention=random_attention_weights(D, attention_layers, seed + 1),
    )


def _perceptron_arrays(prefix: str, head: Perceptron) -> Dict[str, np.ndarray]:
    arrays = {}
    for i, (W, b) in enumerate(head.layers):
        arrays[f'{prefix}_W{i}'] = W
        arrays[f'{prefix}_b{i}'] = b
    return arrays


def _perceptron_from(prefix: str, arrays) -> Perceptron:
    layers = []
    i = 0
    while f'{prefix}_W{i}' in arrays:
        layers.append((arrays[f'{prefix}_W{i}'], arrays[f'{prefix}_b{i}']))
        i += 1
    if not layers:
        raise ValueError(f"Aucune couche '{prefix}' dans le fichier de têtes")
    return Perceptron(tuple(layers))


def save_focus_heads(path, heads: FocusHeads) -> None:
    arrays = {**_perceptron_arrays('offset', heads.offset), **_perceptron_arrays('mask', heads.mask)}
    if heads.attention is not None:
        arrays['attention'] = np.stack([
            np.stack([l.W_Q, l.W_K, l.W_V, l.W_O]) for l in heads.attention.layers
        ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_focus_heads(path) -> FocusHeads:
    with np.load(path) as arrays:
        attention = None
        if 'attention' in arrays:
            attention = AttentionWeights(tuple(AttentionLayer(*block) for block in arrays['attention']))
        return FocusHeads(_perceptron_from('offset', arrays), _perceptron_from('mask', arrays), attention)


def _sigmoid(logits: np.ndarray) -> np.ndarray:
    out = np.empty_like(logits)
    positive = logits >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-logits[positive]))
    exp_l = np.exp(logits[~positive])
    out[~positive] = exp_l / (1.0 + exp_l)
    return out


def predict_offsets(features: FeatureMap, heads: FocusHeads) -> OffsetField:
    """V_p = MLP(H_p)."""
    if heads.offset.out_width != 3:
        raise FeatureWidthError(f"La tête d'offset doit sortir 3 valeurs ({heads.offset.out_width})")
    return OffsetField(heads.offset.forward(features.vectors))


def mask_from_head(head: Perceptron, features: FeatureMap, geo: GeodesicEmbedding) -> MaskScores:
    """Perceptron sur Concat(features, plongement géodésique) puis logistique."""
    if len(features) != len(geo):
        raise FeatureWidthError(f"{len(features)} features pour {len(geo)} plongements")
    if head.out_width != 1:
        raise FeatureWidthError("Une tête de masque doit sortir une seule valeur")
    logits = head.forward(np.concatenate([features.vectors, geo.vectors], axis=1))[:, 0]
    return MaskScores(_sigmoid(logits))


def predict_point_mask(features: FeatureMap, geo: GeodesicEmbedding, heads: FocusHeads) -> MaskScores:
    """Y_p = MLP(Concat(H_p, G_p))."""
    return mask_from_head(heads.mask, features, geo)


# ---------------------------------------------------------------------------
# Décalage, clustering, centres, propositions
# ---------------------------------------------------------------------------

def shift_and_filter(scene_sampled: PointCloud, offsets: OffsetField, mask: MaskScores,
                     tau: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Retourne ({p_i + v_i : y_i > τ}, indices survivants)."""
    if not (len(scene_sampled) == len(offsets) == len(mask)):
        raise ValueError("Nuage, offsets et masque de tailles différentes")
    survivors = np.flatnonzero(mask.scores > tau)
    shifted = scene_sampled.points[survivors] + offsets.vectors[survivors]
    return shifted, survivors


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN déterministe: parcours dans l'ordre des indices, expansion en largeur.

    Un point frontière rejoint le premier cluster qui l'atteint (le plus petit id).
    """
    if eps <= 0:
        raise ValueError(f"eps doit être > 0 (reçu {eps})")
    if min_pts < 1:
        raise ValueError(f"min_pts doit être ≥ 1 (reçu {min_pts})")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels

    neighbors = radius_neighbors(SpatialIndex.build(points), points, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    cluster = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            current = queue.popleft()
            for nb in neighbors[current]:
                if labels[nb] == -1:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(nb)
        cluster += 1
    return labels


def compute_centers(shifted: np.ndarray, labels: np.ndarray) -> CenterSet:
    """Un centre par cluster (moyenne arithmétique des membres), bruit exclu."""
    shifted = np.asarray(shifted, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(shifted) != len(labels):
        raise ValueError("Points et labels de tailles différentes")
    cluster_ids = np.unique(labels[labels >= 0])
    members = tuple(np.flatnonzero(labels == c) for c in cluster_ids)
    centers = np.array([shifted[m].mean(axis=0) for m in members]).reshape(-1, 3)
    return CenterSet(centers, members)


def _sorted_center_order(centers: np.ndarray) -> np.ndarray:
    return np.lexsort((centers[:, 2], centers[:, 1], centers[:, 0]))


def generate_proposals(scene_dense: PointCloud, centers: CenterSet, model_radius: float,
                       scale: float = 1.2, max_points: int = 4096, seed: int = 0,
                       index: Optional[SpatialIndex] = None) -> List[Proposal]:
    """Boule de rayon scale × model_radius par centre, sous-échantillonnée si besoin.

    Les propositions sont triées par centre (ordre lexicographique) puis numérotées.
    """
    if model_radius <= 0:
        raise ValueError(f"Rayon du modèle invalide: {model_radius}")
    if max_points < 1:
        raise ValueError("max_points doit être ≥ 1")
    index = SpatialIndex.build(scene_dense) if index is None else index
    radius = scale * model_radius

    proposals = []
    for c in _sorted_center_order(centers.centers):
        center = centers.centers[c]
        members = ball_query(index, center, radius)
        if len(members) == 0:
            logger.warning("Proposition vide autour de %s: ignorée", np.round(center, 4).tolist())
            continue
        proposal_id = len(proposals)
        if len(members) > max_points:
            rng = np.random.default_rng(derive_seed(seed, 'proposal', proposal_id))
            members = np.sort(rng.choice(members, size=max_points, replace=False))
        proposals.append(Proposal(
            id=proposal_id,
            center=center.copy(),
            radius=radius,
            indices=members,
            cloud=scene_dense.gather(members),
        ))
    return proposals


def save_proposals(directory, scene_id: str, proposals: Sequence[Proposal]) -> Path:
    """Écrit <scene_id>.proposals.json (centre, rayon, effectif) et un PLY par proposition."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in proposals:
        ply_name = f"{scene_id}.proposal_{p.id:03d}.ply"
        write_ply(directory / ply_name, p.cloud, precision='float64')
        entries.append({
            'id': p.id,
            'center': p.center.tolist(),
            'radius': p.radius,
            'count': len(p),
            'ply': ply_name,
        })
    index_path = directory / f"{scene_id}.proposals.json"
    index_path.write_text(json.dumps({'scene_id': scene_id, 'proposals': entries}, indent=1) + '\n')
    logger.debug("%d proposition(s) écrite(s) dans %s", len(entries), directory)
    return index_path


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def oracle_focus(scene_sampled: PointCloud, instance_centroids: np.ndarray) -> Tuple[OffsetField, MaskScores]:
    """Injection de la vérité terrain: offset = centroïde visible − p, masque = 1 sur les instances."""
    if not scene_sampled.has_labels:
        raise ValueError("oracle_focus: nuage sans labels")
    labels = scene_sampled.labels
    centroids = np.asarray(instance_centroids, dtype=np.float64).reshape(-1, 3)
    foreground = (labels >= 0) & (labels < len(centroids))
    offsets = np.zeros((len(scene_sampled), 3))
    offsets[foreground] = centroids[labels[foreground]] - scene_sampled.points[foreground]
    return OffsetField(offsets), MaskScores(foreground.astype(np.float64))


def scene_geodesic_embedding(cloud: PointCloud, k: int, E: int, base_period: float) -> GeodesicEmbedding:
    """Plongement géodésique depuis le point le plus proche du centroïde du nuage."""
    if len(cloud) == 0:
        return GeodesicEmbedding(np.zeros((0, E)))
    _, source = knn(SpatialIndex.build(cloud), cloud.centroid()[None, :], 1)
    distances = geodesic_distances(cloud, k, source[0]) if len(cloud) > 1 else np.zeros(1)
    return geodesic_embedding(distances, E, base_period)


@dataclass
class FocusResult:
    proposals: List[Proposal]
    centers: CenterSet
    shifted: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    diagnostics: List[str] = field(default_factory=list)


class MultiObjectFocuser:
    """Étape 1 complète: sous-échantillonnage → offsets/masque → DBSCAN → centres → propositions."""

    def __init__(
        self,
        model: PointCloud,
        voxel: float,
        params: Optional[FocusParams] = None,
        provider: Optional[DescriptorProvider] = None,
        heads: Optional[FocusHeads] = None,
        seed: int = 0,
    ):
        self.model = model
        self.voxel = voxel
        self.params = params or FocusParams()
        self.provider = provider
        self.heads = heads
        self.seed = seed
        self.model_radius = model.radius()
        self.eps = self.params.eps if self.params.eps is not None else self.params.eps_factor * self.model_radius

    def attention(self, D: int) -> AttentionWeights:
        """Poids des attentions croisées scène → modèle; tirage graine-dérivé si les têtes n'en portent pas."""
        if self.heads.attention is not None:
            return self.heads.attention
        return random_attention_weights(D, FOCUS_ATTENTION_LAYERS, derive_seed(self.seed, 'focus-attention'))

    def predict(self, sampled: PointCloud, gt_poses=None) -> Tuple[OffsetField, MaskScores]:
        """Offsets et masque prédits par les têtes sur H_p = CrossAttn³(scène, modèle)."""
        if self.provider is None or self.heads is None:
            raise ValueError("Le mode 'heads' exige un fournisseur de descripteurs et des têtes")
        scene_fm, model_fm = self.provider.features(sampled, self.model, gt_poses)
        scene_fm = cross_attention_stack(scene_fm, model_fm, self.attention(scene_fm.D))
        geo = scene_geodesic_embedding(
            sampled, self.params.geodesic_k, self.params.geodesic_width, 4.0 * self.model_radius
        )
        return predict_offsets(scene_fm, self.heads), predict_point_mask(scene_fm, geo, self.heads)

    def process(self, scene: PointCloud, instance_centroids: Optional[np.ndarray] = None,
                gt_poses=None) -> FocusResult:
        params = self.params
        index = SpatialIndex.build(scene)

        if params.mode == 'gt-centers':
            if instance_centroids is None:
                raise ValueError("Le mode gt-centers exige les centres vrais (manifeste)")
            centers = CenterSet(np.asarray(instance_centroids, dtype=np.float64).reshape(-1, 3),
                                tuple(np.zeros(0, dtype=np.int64) for _ in range(len(instance_centroids))))
            proposals = generate_proposals(scene, centers, self.model_radius, params.scale,
                                           params.max_points, self.seed, index)
            return FocusResult(proposals, centers)

        if len(scene) == 0:
            return FocusResult([], CenterSet(np.zeros((0, 3))), diagnostics=["scène vide"])

        sampled, _ = voxel_downsample(scene, params.sample_voxel_factor * self.voxel)
        if params.mode == 'oracle':
            if instance_centroids is None:
                raise ValueError("Le mode oracle exige les centres vrais (manifeste)")
            offsets, mask = oracle_focus(sampled, instance_centroids)
        else:
            offsets, mask = self.predict(sampled, gt_poses)

        shifted, survivors = shift_and_filter(sampled, offsets, mask, params.tau)
        labels = dbscan(shifted, self.eps, params.min_pts)
        centers = compute_centers(shifted, labels)
        diagnostics = []
        if len(shifted) and np.all(labels < 0):
            diagnostics.append(f"{len(shifted)} points décalés, aucun cluster (eps={self.eps:.4g})")
        logger.debug("Focalisation: %d points échantillonnés, %d survivants, %d centres",
                     len(sampled), len(survivors), len(centers))
        proposals = generate_proposals(scene, centers, self.model_radius, params.scale,
                                       params.max_points, self.seed, index)
        if len(proposals) < len(centers):
            diagnostics.append(f"{len(centers) - len(proposals)} proposition(s) vide(s) ignorée(s)")
        return FocusResult(proposals, centers, shifted, diagnostics)


def focus_pipeline(scene: PointCloud, model: PointCloud, provider: Optional[DescriptorProviderConfig],
                   voxel: float, params: Optional[FocusParams] = None, heads: Optional[FocusHeads] = None,
                   instance_centroids: Optional[np.ndarray] = None, gt_poses=None,
                   seed: int = 0) -> List[Proposal]:
    """Point d'entrée fonctionnel de l'étape 1."""
    params = params or FocusParams()
    built = None
    if params.mode == 'heads':
        config = provider or DescriptorProviderConfig()
        built = make_provider(config, seed, default_radius=4.0 * voxel)
        if heads is None:
            width = built.width
            heads = (load_focus_heads(params.heads_path) if params.heads_path
                     else random_focus_heads(width, params.geodesic_width, seed))
    focuser = MultiObjectFocuser(model, voxel, params, built, heads, seed)
    return focuser.process(scene, instance_centroids, gt_poses).proposals
