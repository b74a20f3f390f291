#!/usr/bin/env python3
"""
FocusReg - Étape 2: appariement par instance
Masques d'instance et de recouvrement, appariement grossier des patches,
transport optimal (Sinkhorn, dustbin) filtré par les deux masques, top-k mutuel,
puis estimation de pose locale → globale.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import logsumexp

from descriptors import (
    AttentionLayer,
    AttentionWeights,
    DescriptorProvider,
    FeatureMap,
    GeodesicEmbedding,
    cross_attention_stack,
    geodesic_embedding,
    pool_patch_features,
    random_attention_weights,
)
from focusing import MaskScores, Perceptron, Proposal, mask_from_head, random_perceptron
from geom_core import (
    DegenerateInputError,
    PointCloud,
    RigidTransform,
    SpatialIndex,
    geodesic_distances,
    knn,
    voxel_downsample,
    weighted_kabsch,
)

logger = logging.getLogger(__name__)

# valeur log des cellules masquées (finie pour éviter inf - inf)
MASKED_LOG = -1e12


class RegistrationFailedError(ValueError):
    """Aucune hypothèse de pose exploitable pour une proposition."""


class MatchParams(BaseModel):
    """Paramètres de l'appariement par instance.

    coarse_k: top-k mutuel sur les ancres, défaut 2, dans [1, 64].
    dense_k: top-k mutuel point à point dans chaque paire de patches, défaut 3, dans [1, 64].
    min_confidence: masse de transport minimale d'une correspondance dense, défaut 0.05.
    """
    mask_mode: Literal['oracle', 'heads', 'none'] = 'oracle'
    use_instance_mask: bool = True
    use_overlap_mask: bool = True
    tau_mask: float = Field(default=0.5, gt=0.0, lt=1.0)
    coarse_k: int = Field(default=2, ge=1, le=64)
    dense_k: int = Field(default=3, ge=1, le=64)
    sinkhorn_iterations: int = Field(default=100, ge=1, le=10000)
    dustbin_alpha: float = 0.0
    temperature: float = Field(default=0.02, gt=0.0)
    score_margin: float = Field(default=0.9, ge=-1.0, le=1.0)  # logit = (cos − marge) / température
    min_confidence: float = Field(default=0.05, ge=0.0, le=1.0)
    tau_in: Optional[float] = Field(default=None, gt=0.0)  # défaut: 2 × voxel
    refinement_rounds: int = Field(default=5, ge=0, le=100)
    min_inliers: int = Field(default=6, ge=0)
    patch_voxel_factor: float = Field(default=8.0, gt=0.0)
    geodesic_k: int = Field(default=8, ge=2, le=64)
    geodesic_width: int = Field(default=16, ge=2, le=256)
    heads_path: Optional[str] = None


@dataclass(frozen=True)
class PatchSet:
    """Ancres (indices de points) et membres denses rattachés à l'ancre la plus proche."""

    anchor_indices: np.ndarray
    members: Tuple[np.ndarray, ...]
    assignment: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor_indices)


@dataclass(frozen=True)
class CoarseMatch:
    proposal_anchor: int
    model_anchor: int
    score: float


@dataclass(frozen=True)
class AssignmentMatrix:
    """Plan de transport (n+1)×(m+1), dernière ligne/colonne = dustbin."""

    plan: np.ndarray
    provenance: Optional[CoarseMatch] = None

    @property
    def interior(self) -> np.ndarray:
        return self.plan[:-1, :-1]


@dataclass(frozen=True)
class Correspondences:
    """Paires denses (indice dans la proposition, indice dans le modèle) et poids."""

    proposal_idx: np.ndarray
    model_idx: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.proposal_idx)

    @classmethod
    def empty(cls) -> 'Correspondences':
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))

    @classmethod
    def concat(cls, groups: Sequence['Correspondences']) -> 'Correspondences':
        if not groups:
            return cls.empty()
        return cls(
            np.concatenate([g.proposal_idx for g in groups]).astype(np.int64),
            np.concatenate([g.model_idx for g in groups]).astype(np.int64),
            np.concatenate([g.weights for g in groups]).astype(np.float64),
        )


@dataclass
class InstanceRegistration:
    proposal_id: int
    pose: RigidTransform
    correspondences: Correspondences
    inlier_count: int = 0
    failed: bool = False
    diagnostic: str = ''
    candidate_inliers: List[int] = field(default_factory=list)
    proposal_center: Optional[np.ndarray] = None
    inliers: Optional[np.ndarray] = None


@dataclass(frozen=True)
class MatchHeads:
    """Têtes du masque d'instance (D + E → 1) et du masque de recouvrement (D + E → 1)."""

    instance: Perceptron
    overlap: Perceptron
    attention: AttentionWeights


def random_match_heads(D: int, E: int, seed: int = 0, hidden: Optional[int] = None,
                       attention_layers: int = 3) -> MatchHeads:
    rng = np.random.default_rng(seed)
    hidden = 2 * D if hidden is None else hidden
    return MatchHeads(
        instance=random_perceptron([D + E, hidden, 1], rng),
        overlap=random_perceptron([D + E, hidden, 1], rng),
        attention=random_attention_weights(D, attention_layers, seed + 1),
    )


def save_match_heads(path, heads: MatchHeads) -> None:
    arrays = {}
    for prefix, head in (('instance', heads.instance), ('overlap', heads.overlap)):
        for i, (W, b) in enumerate(head.layers):
            arrays[f'{prefix}_W{i}'] = W
            arrays[f'{prefix}_b{i}'] = b
    arrays['attention'] = np.stack([
        np.stack([l.W_Q, l.W_K, l.W_V, l.W_O]) for l in heads.attention.layers
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)


def load_match_heads(path) -> MatchHeads:
    with np.load(path) as arrays:
        heads = []
        for prefix in ('instance', 'overlap'):
            layers = []
            while f'{prefix}_W{len(layers)}' in arrays:
                i = len(layers)
                layers.append((arrays[f'{prefix}_W{i}'], arrays[f'{prefix}_b{i}']))
            if not layers:
                raise ValueError(f"{path}: aucune couche '{prefix}'")
            heads.append(Perceptron(tuple(layers)))
        if 'attention' not in arrays:
            raise ValueError(f"{path}: poids d'attention absents")
        attention = AttentionWeights(tuple(AttentionLayer(*block) for block in arrays['attention']))
    return MatchHeads(heads[0], heads[1], attention)


# ---------------------------------------------------------------------------
# Patches et masques
# ---------------------------------------------------------------------------

def build_patches(cloud: PointCloud, voxel: float) -> PatchSet:
    """Ancres = points les plus proches des centroïdes de voxels; chaque point rejoint l'ancre la plus proche."""
    if len(cloud) == 0:
        return PatchSet(np.zeros(0, dtype=np.int64), (), np.zeros(0, dtype=np.int64))
    sampled, _ = voxel_downsample(cloud, voxel)
    _, nearest = knn(SpatialIndex.build(cloud), sampled.points, 1)
    anchors = np.unique(nearest[:, 0])
    _, owner = knn(SpatialIndex.build(cloud.points[anchors]), cloud.points, 1)
    assignment = owner[:, 0]
    order = np.argsort(assignment, kind='stable')
    counts = np.bincount(assignment, minlength=len(anchors))
    members = tuple(np.split(order, np.cumsum(counts)[:-1]))
    return PatchSet(anchors, members, assignment)


def predict_instance_mask(proposal_features: FeatureMap, geo: GeodesicEmbedding, head: Perceptron) -> MaskScores:
    """Y_o = MLP(Concat(E_o, G_o)), un score par point échantillonné."""
    return mask_from_head(head, proposal_features, geo)


def predict_overlap_mask(proposal_features: FeatureMap, model_features: FeatureMap, geo: GeodesicEmbedding,
                         attention: AttentionWeights, head: Perceptron,
                         assignment: Optional[np.ndarray] = None) -> MaskScores:
    """Z_o = CrossAttn(E_o, E_q, E_q), Y_op = MLP(Concat(Z_o, G_o)), diffusé aux points denses
    via l'ancre de rattachement."""
    enhanced = cross_attention_stack(proposal_features, model_features, attention)
    sampled = mask_from_head(head, enhanced, geo)
    if assignment is None:
        return sampled
    return MaskScores(sampled.scores[np.asarray(assignment, dtype=np.int64)])


def oracle_proposal_masks(proposal: Proposal, instance_centroids: np.ndarray) -> Tuple[MaskScores, MaskScores]:
    """Masques vrais: l'instance visée est celle dont le centroïde visible est le plus proche du centre."""
    labels = proposal.cloud.labels
    if labels is None:
        raise ValueError("Masques oracle: proposition sans labels")
    centroids = np.asarray(instance_centroids, dtype=np.float64).reshape(-1, 3)
    if len(centroids) == 0:
        zeros = MaskScores(np.zeros(len(proposal)))
        return zeros, zeros
    target = int(np.argmin(np.linalg.norm(centroids - proposal.center, axis=1)))
    on_instance = MaskScores((labels == target).astype(np.float64))
    return on_instance, on_instance


def combined_gate(instance_mask: MaskScores, overlap_mask: MaskScores, params: MatchParams) -> np.ndarray:
    """Score combiné instance × recouvrement (un masque désactivé vaut 1)."""
    gate = np.ones(len(instance_mask))
    if params.use_instance_mask:
        gate = gate * instance_mask.scores
    if params.use_overlap_mask:
        gate = gate * overlap_mask.scores
    return gate


# ---------------------------------------------------------------------------
# Appariement
# ---------------------------------------------------------------------------

def _normalized(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / np.where(norms > 0, norms, 1.0)


def mutual_topk(matrix: np.ndarray, k: int) -> np.ndarray:
    """Cellules (i, j) telles que j ∈ topk(ligne i) et i ∈ topk(colonne j); égalités → plus petit indice."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n, m = matrix.shape
    selected = np.zeros((n, m), dtype=bool)
    if n == 0 or m == 0:
        return selected
    row_top = np.argsort(-matrix, axis=1, kind='stable')[:, :min(k, m)]
    col_top = np.argsort(-matrix, axis=0, kind='stable')[:min(k, n), :]
    in_row = np.zeros((n, m), dtype=bool)
    in_row[np.arange(n)[:, None], row_top] = True
    in_col = np.zeros((n, m), dtype=bool)
    in_col[col_top, np.arange(m)[None, :]] = True
    return in_row & in_col


def coarse_match(proposal_anchors: FeatureMap, model_anchors: FeatureMap, k: int = 1) -> List[CoarseMatch]:
    """Top-k mutuel sur la similarité cosinus des features d'ancres, trié par score décroissant."""
    if k < 1:
        raise ValueError(f"k doit être ≥ 1 (reçu {k})")
    if len(proposal_anchors) == 0 or len(model_anchors) == 0:
        return []
    similarity = _normalized(proposal_anchors.vectors) @ _normalized(model_anchors.vectors).T
    rows, cols = np.nonzero(mutual_topk(similarity, k))
    scores = similarity[rows, cols]
    order = np.lexsort((cols, rows, -scores))
    return [CoarseMatch(int(rows[o]), int(cols[o]), float(scores[o])) for o in order]


def sinkhorn_transport(scores: np.ndarray, alpha: float = 0.0, iterations: int = 100) -> AssignmentMatrix:
    """Transport optimal entropique en domaine log, avec ligne/colonne dustbin à α.

    Marges: 1 par ligne/colonne intérieure, m (resp. n) pour la ligne (resp. colonne) dustbin.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or not np.all(np.isfinite(scores)):
        raise ValueError("Scores de transport non finis ou mal formés")
    if iterations < 1:
        raise ValueError("iterations doit être ≥ 1")
    n, m = scores.shape
    if n == 0 or m == 0:
        plan = np.zeros((n + 1, m + 1))
        plan[:n, m] = 1.0
        plan[n, :m] = 1.0
        return AssignmentMatrix(plan)

    Z = np.full((n + 1, m + 1), float(alpha))
    Z[:n, :m] = scores
    norm = -np.log(n + m)
    log_mu = np.append(np.full(n, norm), np.log(m) + norm)
    log_nu = np.append(np.full(m, norm), np.log(n) + norm)
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    for _ in range(iterations):
        u = log_mu - logsumexp(Z + v[None, :], axis=1)
        v = log_nu - logsumexp(Z + u[:, None], axis=0)
    return AssignmentMatrix(np.exp(Z + u[:, None] + v[None, :] - norm))


def sinkhorn_transport_batch(scores: np.ndarray, row_valid: np.ndarray, col_valid: np.ndarray,
                             alpha: float = 0.0, iterations: int = 100) -> np.ndarray:
    """Sinkhorn sur un lot (B, n, m) complété par du padding; cellules invalides à masse nulle."""
    scores = np.asarray(scores, dtype=np.float64)
    B, n, m = scores.shape
    row_valid = np.asarray(row_valid, dtype=bool).reshape(B, n)
    col_valid = np.asarray(col_valid, dtype=bool).reshape(B, m)
    n_b = row_valid.sum(axis=1)
    m_b = col_valid.sum(axis=1)
    if np.any(n_b == 0) or np.any(m_b == 0):
        raise ValueError("Chaque élément du lot doit avoir au moins une ligne et une colonne valides")

    valid = np.ones((B, n + 1, m + 1), dtype=bool)
    valid[:, :n, :] &= row_valid[:, :, None]
    valid[:, :, :m] &= col_valid[:, None, :]
    Z = np.full((B, n + 1, m + 1), float(alpha))
    Z[:, :n, :m] = scores
    Z = np.where(valid, Z, MASKED_LOG)

    norm = -np.log(n_b + m_b)
    log_mu = np.concatenate([np.where(row_valid, norm[:, None], MASKED_LOG),
                             (np.log(m_b) + norm)[:, None]], axis=1)
    log_nu = np.concatenate([np.where(col_valid, norm[:, None], MASKED_LOG),
                             (np.log(n_b) + norm)[:, None]], axis=1)
    u = np.zeros((B, n + 1))
    v = np.zeros((B, m + 1))
    for _ in range(iterations):
        u = log_mu - logsumexp(Z + v[:, None, :], axis=2)
        v = log_nu - logsumexp(Z + u[:, :, None], axis=1)
    plan = np.exp(Z + u[:, :, None] + v[:, None, :] - norm[:, None, None])
    plan[~valid] = 0.0
    return plan


def _extract_correspondences(interior: np.ndarray, members_p: np.ndarray, members_q: np.ndarray,
                             k: int, min_confidence: float) -> Correspondences:
    selected = mutual_topk(interior, k) & (interior >= min_confidence)
    rows, cols = np.nonzero(selected)
    return Correspondences(members_p[rows], members_q[cols], interior[rows, cols])


def _patch_members(coarse: CoarseMatch, proposal_patches: PatchSet, model_patches: PatchSet,
                   gate: np.ndarray, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    members_p = proposal_patches.members[coarse.proposal_anchor]
    members_p = members_p[gate[members_p] > tau]
    return members_p, model_patches.members[coarse.model_anchor]


def _patch_scores(members_p, members_q, proposal_features, model_features, params: MatchParams) -> np.ndarray:
    P = _normalized(proposal_features.vectors[members_p])
    Q = _normalized(model_features.vectors[members_q])
    return (P @ Q.T - params.score_margin) / params.temperature


def dense_match(coarse: CoarseMatch, proposal_patches: PatchSet, model_patches: PatchSet,
                proposal_features: FeatureMap, model_features: FeatureMap,
                instance_mask: MaskScores, overlap_mask: MaskScores,
                params: Optional[MatchParams] = None) -> Correspondences:
    """Correspondances denses d'une paire de patches, après élimination des points masqués."""
    params = params or MatchParams()
    gate = combined_gate(instance_mask, overlap_mask, params)
    members_p, members_q = _patch_members(coarse, proposal_patches, model_patches, gate, params.tau_mask)
    if len(members_p) == 0 or len(members_q) == 0:
        return Correspondences.empty()
    scores = _patch_scores(members_p, members_q, proposal_features, model_features, params)
    plan = sinkhorn_transport(scores, params.dustbin_alpha, params.sinkhorn_iterations)
    return _extract_correspondences(plan.interior, members_p, members_q, params.dense_k, params.min_confidence)


def dense_match_all(coarse: Sequence[CoarseMatch], proposal_patches: PatchSet, model_patches: PatchSet,
                    proposal_features: FeatureMap, model_features: FeatureMap,
                    instance_mask: MaskScores, overlap_mask: MaskScores,
                    params: Optional[MatchParams] = None) -> List[Correspondences]:
    """dense_match pour toutes les correspondances grossières, Sinkhorn résolu en un seul lot."""
    params = params or MatchParams()
    gate = combined_gate(instance_mask, overlap_mask, params)
    pairs = [_patch_members(c, proposal_patches, model_patches, gate, params.tau_mask) for c in coarse]
    live = [i for i, (p, q) in enumerate(pairs) if len(p) and len(q)]
    groups = [Correspondences.empty() for _ in coarse]
    if not live:
        return groups

    n = max(len(pairs[i][0]) for i in live)
    m = max(len(pairs[i][1]) for i in live)
    scores = np.zeros((len(live), n, m))
    row_valid = np.zeros((len(live), n), dtype=bool)
    col_valid = np.zeros((len(live), m), dtype=bool)
    for b, i in enumerate(live):
        members_p, members_q = pairs[i]
        scores[b, :len(members_p), :len(members_q)] = _patch_scores(
            members_p, members_q, proposal_features, model_features, params)
        row_valid[b, :len(members_p)] = True
        col_valid[b, :len(members_q)] = True

    plans = sinkhorn_transport_batch(scores, row_valid, col_valid, params.dustbin_alpha,
                                     params.sinkhorn_iterations)
    for b, i in enumerate(live):
        members_p, members_q = pairs[i]
        interior = plans[b, :len(members_p), :len(members_q)]
        groups[i] = _extract_correspondences(interior, members_p, members_q,
                                             params.dense_k, params.min_confidence)
    return groups


def _inlier_mask(pose: RigidTransform, union: Correspondences, proposal_points: np.ndarray,
                 model_points: np.ndarray, tau_in: float) -> np.ndarray:
    residual = pose.apply(model_points[union.model_idx]) - proposal_points[union.proposal_idx]
    return np.linalg.norm(residual, axis=1) <= tau_in


def local_to_global(groups: Sequence[Correspondences], proposal_points: np.ndarray, model_points: np.ndarray,
                    tau_in: float, rounds: int = 5, min_inliers: int = 0,
                    proposal_id: int = 0) -> InstanceRegistration:
    """Une hypothèse de pose par groupe (Kabsch pondéré), notée par le nombre d'inliers sur
    l'union des correspondances; la meilleure est ré-estimée sur ses inliers."""
    if tau_in <= 0:
        raise ValueError(f"tau_in doit être > 0 (reçu {tau_in})")
    proposal_points = np.asarray(proposal_points, dtype=np.float64)
    model_points = np.asarray(model_points, dtype=np.float64)
    union = Correspondences.concat([g for g in groups if len(g)])
    if len(union) == 0:
        raise RegistrationFailedError("aucune correspondance dense")

    best_pose, best_mask, best_count = None, None, -1
    candidate_inliers = []
    for group in groups:
        if len(group) < 3:
            continue
        try:
            pose = weighted_kabsch(model_points[group.model_idx], proposal_points[group.proposal_idx], group.weights)
        except DegenerateInputError:
            continue
        mask = _inlier_mask(pose, union, proposal_points, model_points, tau_in)
        count = int(mask.sum())
        candidate_inliers.append(count)
        if count > best_count:
            best_pose, best_mask, best_count = pose, mask, count
    if best_pose is None:
        raise RegistrationFailedError(f"les {len(groups)} groupes sont dégénérés")

    for _ in range(rounds):
        if best_count < 3:
            break
        try:
            pose = weighted_kabsch(model_points[union.model_idx[best_mask]],
                                   proposal_points[union.proposal_idx[best_mask]],
                                   union.weights[best_mask])
        except DegenerateInputError:
            break
        mask = _inlier_mask(pose, union, proposal_points, model_points, tau_in)
        count = int(mask.sum())
        if count < best_count:
            break
        best_pose, best_mask, best_count = pose, mask, count

    assert best_count >= max(candidate_inliers)
    registration = InstanceRegistration(
        proposal_id=proposal_id,
        pose=best_pose,
        correspondences=union,
        inlier_count=best_count,
        candidate_inliers=candidate_inliers,
        inliers=best_mask,
    )
    if best_count == 0:
        registration.failed = True
        registration.diagnostic = f"aucun inlier à tau_in={tau_in:.4g}"
    elif best_count < min_inliers:
        registration.failed = True
        registration.diagnostic = f"{best_count} inliers < min_inliers={min_inliers}"
    return registration


def proposal_geodesic_embedding(proposal: Proposal, k: int, E: int, base_period: float) -> GeodesicEmbedding:
    """Plongement géodésique depuis le point de la proposition le plus proche de son centre."""
    cloud = proposal.cloud
    if len(cloud) < 2:
        return geodesic_embedding(np.zeros(len(cloud)), E, base_period)
    _, source = knn(SpatialIndex.build(cloud), proposal.center[None, :], 1)
    return geodesic_embedding(geodesic_distances(cloud, k, source[0]), E, base_period)


def _failed(proposal: Proposal, diagnostic: str) -> InstanceRegistration:
    return InstanceRegistration(
        proposal_id=proposal.id,
        pose=RigidTransform.identity(),
        correspondences=Correspondences.empty(),
        failed=True,
        diagnostic=diagnostic,
        proposal_center=proposal.center,
    )


class InstanceMatcher:
    """Recalage modèle → proposition; le modèle et ses patches sont préparés une seule fois."""

    def __init__(
        self,
        model: PointCloud,
        model_features: FeatureMap,
        voxel: float,
        params: Optional[MatchParams] = None,
        provider: Optional[DescriptorProvider] = None,
        heads: Optional[MatchHeads] = None,
    ):
        self.model = model
        self.model_features = model_features
        self.voxel = voxel
        self.params = params or MatchParams()
        self.provider = provider
        self.heads = heads
        self.patch_voxel = self.params.patch_voxel_factor * voxel
        self.tau_in = self.params.tau_in if self.params.tau_in is not None else 2.0 * voxel
        self.base_period = 4.0 * model.radius()
        if self.params.mask_mode == 'heads' and heads is None:
            raise ValueError("mask_mode='heads' exige des têtes de masque")
        self.model_patches = build_patches(model, self.patch_voxel)
        self.model_anchors = self._enhance(pool_patch_features(model_features, list(self.model_patches.members)))

    def _enhance(self, anchors: FeatureMap) -> FeatureMap:
        return anchors if self.provider is None else self.provider.enhance(anchors)

    def masks(self, proposal: Proposal, patches: PatchSet, anchors: FeatureMap,
              instance_centroids: Optional[np.ndarray]) -> Tuple[MaskScores, MaskScores]:
        mode = self.params.mask_mode
        if mode == 'none':
            ones = MaskScores.constant(len(proposal))
            return ones, ones
        if mode == 'oracle':
            if instance_centroids is None:
                raise ValueError("mask_mode='oracle' exige les centres vrais (manifeste)")
            return oracle_proposal_masks(proposal, instance_centroids)
        geo = proposal_geodesic_embedding(proposal, self.params.geodesic_k, self.params.geodesic_width,
                                          self.base_period).gather(patches.anchor_indices)
        instance = predict_instance_mask(anchors, geo, self.heads.instance)
        overlap = predict_overlap_mask(anchors, self.model_anchors, geo, self.heads.attention,
                                       self.heads.overlap, patches.assignment)
        return MaskScores(instance.scores[patches.assignment]), overlap

    def register(self, proposal: Proposal, proposal_features: FeatureMap,
                 instance_centroids: Optional[np.ndarray] = None,
                 masks: Optional[Tuple[MaskScores, MaskScores]] = None) -> InstanceRegistration:
        """Recale une proposition; un échec produit un enregistrement diagnostiqué, jamais une exception."""
        params = self.params
        if len(proposal) == 0:
            return _failed(proposal, "proposition vide")
        if len(proposal_features) != len(proposal):
            raise ValueError(f"{len(proposal_features)} features pour {len(proposal)} points de proposition")

        patches = build_patches(proposal.cloud, self.patch_voxel)
        anchors = self._enhance(pool_patch_features(proposal_features, list(patches.members)))
        if masks is None:
            masks = self.masks(proposal, patches, anchors, instance_centroids)
        instance_mask, overlap_mask = masks

        coarse = coarse_match(anchors, self.model_anchors, params.coarse_k)
        if not coarse:
            return _failed(proposal, "aucune correspondance grossière")
        groups = dense_match_all(coarse, patches, self.model_patches, proposal_features, self.model_features,
                                 instance_mask, overlap_mask, params)
        if not any(len(g) for g in groups):
            return _failed(proposal, f"{len(coarse)} patches vidés par les masques")
        try:
            registration = local_to_global(groups, proposal.cloud.points, self.model.points, self.tau_in,
                                           params.refinement_rounds, params.min_inliers, proposal.id)
        except RegistrationFailedError as e:
            return _failed(proposal, str(e))
        registration.proposal_center = proposal.center
        if registration.failed:
            logger.info("Proposition %d: %s", proposal.id, registration.diagnostic)
        return registration

    def register_scene(self, proposals: Sequence[Proposal], scene_features: FeatureMap,
                       instance_centroids: Optional[np.ndarray] = None,
                       threads: int = 1) -> List[InstanceRegistration]:
        """Recalage de toutes les propositions, résultats ordonnés par id quel que soit l'ordonnancement."""
        def run(proposal: Proposal) -> InstanceRegistration:
            return self.register(proposal, scene_features.gather(proposal.indices), instance_centroids)

        if threads <= 1 or len(proposals) < 2:
            results = [run(p) for p in proposals]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run, proposals))
        return sorted(results, key=lambda r: r.proposal_id)


def register_proposal(proposal: Proposal, model: PointCloud, proposal_features: FeatureMap,
                      model_features: FeatureMap, voxel: float, params: Optional[MatchParams] = None,
                      masks: Optional[Tuple[MaskScores, MaskScores]] = None,
                      instance_centroids: Optional[np.ndarray] = None,
                      provider: Optional[DescriptorProvider] = None,
                      heads: Optional[MatchHeads] = None) -> InstanceRegistration:
    """Point d'entrée fonctionnel: recalage d'une seule proposition."""
    matcher = InstanceMatcher(model, model_features, voxel, params, provider, heads)
    return matcher.register(proposal, proposal_features, instance_centroids, masks)


def register_scene(proposals: Sequence[Proposal], model: PointCloud, scene_features: FeatureMap,
                   model_features: FeatureMap, voxel: float, params: Optional[MatchParams] = None,
                   instance_centroids: Optional[np.ndarray] = None,
                   provider: Optional[DescriptorProvider] = None,
                   heads: Optional[MatchHeads] = None, threads: int = 1) -> List[InstanceRegistration]:
    matcher = InstanceMatcher(model, model_features, voxel, params, provider, heads)
    return matcher.register_scene(proposals, scene_features, instance_centroids, threads)
