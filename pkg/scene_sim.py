#!/usr/bin/env python3
"""
FocusReg - Génération de scènes synthétiques multi-instances
K copies posées d'un modèle, occlusion par demi-espace, fouillis (uniforme,
sol, parois de bac), bruit capteur, et manifeste JSON de vérité terrain.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from scipy.spatial.transform import Rotation

from geom_core import InvariantError, PointCloud, RigidTransform, SpatialIndex, knn
from ply_io import read_ply

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = 'focusreg-manifest'
MANIFEST_VERSION = 1
MAX_PLACEMENT_ATTEMPTS = 1000
MODEL_SEED = 1234

Vec3 = Tuple[float, float, float]


class SceneGenerationError(ValueError):
    """Contraintes de placement insatisfaisables."""


class ManifestError(ValueError):
    """Manifeste illisible ou invalide (ligne / champ indiqués)."""


# ---------------------------------------------------------------------------
# Modèles procéduraux
# ---------------------------------------------------------------------------

# boîtes (coin min, coin max) en mètres
_CHAIR_BOXES = [
    ((-0.25, -0.25, 0.42), (0.25, 0.25, 0.47)),      # assise
    ((-0.25, 0.20, 0.47), (0.25, 0.25, 0.95)),       # dossier
    ((-0.25, -0.25, 0.0), (-0.20, -0.20, 0.42)),     # pieds
    ((0.20, -0.25, 0.0), (0.25, -0.20, 0.42)),
    ((-0.25, 0.20, 0.0), (-0.20, 0.25, 0.42)),
    ((0.20, 0.20, 0.0), (0.25, 0.25, 0.42)),
    ((0.22, -0.20, 0.62), (0.27, 0.20, 0.66)),       # accoudoir droit seul
    ((0.22, -0.20, 0.47), (0.26, -0.16, 0.62)),
]

_BRACKET_BOXES = [
    ((0.0, 0.0, 0.0), (0.040, 0.030, 0.004)),        # semelle
    ((0.0, 0.0, 0.004), (0.004, 0.030, 0.032)),      # aile
    ((0.004, 0.0, 0.004), (0.016, 0.004, 0.016)),    # renfort, d'un seul côté
    ((0.028, 0.010, 0.004), (0.036, 0.020, 0.008)),  # bossage
]

PROCEDURAL_MODELS: Dict[str, list] = {
    'chair': _CHAIR_BOXES,
    'bracket': _BRACKET_BOXES,
}


def _box_faces(lo: np.ndarray, hi: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Les 6 faces d'une boîte sous forme (origine, arête u, arête v)."""
    size = hi - lo
    faces = []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        u = np.zeros(3)
        v = np.zeros(3)
        u[u_axis] = size[u_axis]
        v[v_axis] = size[v_axis]
        for side in (lo, hi):
            origin = lo.copy()
            origin[axis] = side[axis]
            faces.append((origin, u, v))
    return faces


def sample_box_surfaces(boxes: Sequence[Tuple[Vec3, Vec3]], n_points: int, seed: int = MODEL_SEED) -> np.ndarray:
    """Échantillonnage uniforme (pondéré par l'aire) des faces d'un assemblage de boîtes."""
    faces = []
    for lo, hi in boxes:
        faces.extend(_box_faces(np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)))
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
    rng = np.random.default_rng(seed)
    choice = rng.choice(len(faces), size=n_points, p=areas / areas.sum())
    uv = rng.uniform(size=(n_points, 2))
    origins = np.array([f[0] for f in faces])[choice]
    us = np.array([f[1] for f in faces])[choice]
    vs = np.array([f[2] for f in faces])[choice]
    return origins + uv[:, :1] * us + uv[:, 1:] * vs


def procedural_model(name: str, n_points: int = 2048, seed: int = MODEL_SEED) -> PointCloud:
    """Modèle asymétrique centré sur son centroïde."""
    if name not in PROCEDURAL_MODELS:
        raise ValueError(f"Modèle inconnu '{name}' (disponibles: {', '.join(PROCEDURAL_MODELS)})")
    if n_points < 3:
        raise ValueError("Un modèle doit compter au moins 3 points")
    points = sample_box_surfaces(PROCEDURAL_MODELS[name], n_points, seed)
    return PointCloud(points - points.mean(axis=0))


def resolve_model(model: str, n_points: int = 2048) -> PointCloud:
    """Nom de modèle procédural ou chemin PLY (recentré, labels ignorés)."""
    if model in PROCEDURAL_MODELS:
        return procedural_model(model, n_points)
    cloud = read_ply(model)
    if len(cloud) < 3:
        raise ValueError(f"{model}: modèle de moins de 3 points")
    return PointCloud(cloud.points - cloud.centroid())


# ---------------------------------------------------------------------------
# Spécification de scène
# ---------------------------------------------------------------------------

class PoseBounds(BaseModel):
    """Boîte de translation et mode de rotation."""
    box_min: Vec3 = (0.0, 0.0, 0.0)
    box_max: Vec3 = (1.0, 1.0, 1.0)
    rotation: Literal['so3', 'yaw'] = 'so3'
    rest_on_floor: bool = False  # recale z pour poser l'instance sur z = box_min

    @model_validator(mode='after')
    def _ordered(self):
        if any(lo > hi for lo, hi in zip(self.box_min, self.box_max)):
            raise ValueError(f"box_min {self.box_min} doit être ≤ box_max {self.box_max}")
        return self


class SceneSpec(BaseModel):
    """Paramètres d'une scène synthétique."""
    model: str = 'chair'
    model_points: int = Field(default=2048, ge=3)
    instances: Tuple[int, int] = (4, 16)
    bounds: PoseBounds = Field(default_factory=PoseBounds)
    min_separation: Optional[float] = Field(default=None, ge=0.0)  # défaut: 2 × rayon modèle
    occlusion: Tuple[float, float] = (0.0, 0.0)
    clutter_points: Optional[int] = Field(default=None, ge=0)
    clutter_fraction: float = Field(default=0.2, ge=0.0)
    clutter_kind: Literal['uniform', 'floor', 'bin'] = 'uniform'
    floor_fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    noise: float = Field(default=0.0, ge=0.0)
    seed: int = 0

    @field_validator('instances', mode='before')
    @classmethod
    def _count_or_range(cls, value):
        if isinstance(value, int):
            return (value, value)
        return value

    @field_validator('instances')
    @classmethod
    def _valid_count(cls, value):
        lo, hi = value
        if lo < 0 or hi < lo:
            raise ValueError(f"Nombre d'instances invalide: {value}")
        return value

    @field_validator('occlusion', mode='before')
    @classmethod
    def _fraction_or_range(cls, value):
        if isinstance(value, (int, float)):
            return (float(value), float(value))
        return value

    @field_validator('occlusion')
    @classmethod
    def _valid_occlusion(cls, value):
        lo, hi = value
        if not (0.0 <= lo <= hi < 1.0):
            raise ValueError(f"Occlusion hors de [0, 1): {value}")
        return value


@dataclass
class InstanceTruth:
    pose: RigidTransform
    occlusion: float
    visible_model_indices: np.ndarray
    visible_scene_indices: np.ndarray
    centroid: np.ndarray
    radius: float


@dataclass
class SceneGroundTruth:
    """Vérité terrain d'une scène: poses, labels par point, ensembles visibles."""

    instances: List[InstanceTruth]
    labels: np.ndarray
    spec: SceneSpec
    seed: int
    scene_id: str = 'scene_0000'
    model_radius: float = 0.0

    @property
    def poses(self) -> List[RigidTransform]:
        return [inst.pose for inst in self.instances]

    @property
    def centroids(self) -> np.ndarray:
        """Centroïdes des nuages visibles (avant bruit)."""
        return np.array([inst.centroid for inst in self.instances]).reshape(-1, 3)

    @property
    def radii(self) -> np.ndarray:
        return np.array([inst.radius for inst in self.instances], dtype=np.float64)

    @property
    def num_points(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.instances)


# ---------------------------------------------------------------------------
# Poses, occlusion, fouillis
# ---------------------------------------------------------------------------

def sample_rotation(mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == 'yaw':
        return Rotation.from_euler('z', rng.uniform(0.0, 2.0 * np.pi)).as_matrix()
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.normal(size=4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def sample_pose(bounds: PoseBounds, rng: np.random.Generator) -> RigidTransform:
    """Rotation uniforme sur SO(3) (quaternion normalisé) ou lacet seul; translation uniforme dans la boîte."""
    R = sample_rotation(bounds.rotation, rng)
    lo = np.asarray(bounds.box_min, dtype=np.float64)
    hi = np.asarray(bounds.box_max, dtype=np.float64)
    t = lo + rng.uniform(size=3) * (hi - lo)
    return RigidTransform(R, t)


def _rest_on_floor(pose: RigidTransform, model: PointCloud, floor_z: float) -> RigidTransform:
    lowest = np.min(model.points @ pose.R[2])
    t = pose.t.copy()
    t[2] = floor_z - lowest
    return RigidTransform(pose.R, t)


def occlusion_cut(model: PointCloud, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Indices visibles après coupe par un demi-espace de normale aléatoire.

    Le décalage du plan est cherché par dichotomie pour retirer exactement
    round(fraction × M) points; en cas d'égalités de projection, coupe par rang.
    """
    M = len(model)
    n_removed = int(round(fraction * M))
    normal = rng.normal(size=3)
    normal /= max(np.linalg.norm(normal), 1e-12)
    if n_removed == 0:
        return np.arange(M)
    projection = (model.points - model.centroid()) @ normal

    lo, hi = projection.min() - 1.0, projection.max() + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        removed = int(np.count_nonzero(projection > mid))
        if removed == n_removed:
            return np.flatnonzero(projection <= mid)
        if removed > n_removed:
            lo = mid
        else:
            hi = mid
    order = np.lexsort((np.arange(M), projection))
    return np.sort(order[:M - n_removed])


def _clutter_box(spec: SceneSpec, model_radius: float) -> Tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(spec.bounds.box_min, dtype=np.float64) - model_radius
    hi = np.asarray(spec.bounds.box_max, dtype=np.float64) + model_radius
    if spec.bounds.rest_on_floor:
        lo[2] = spec.bounds.box_min[2]
        hi[2] = spec.bounds.box_max[2] + 2.0 * model_radius
    return lo, hi


def _bin_walls(lo: np.ndarray, hi: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Fond et quatre parois d'un bac, pondérés par l'aire."""
    boxes = [(lo, (hi[0], hi[1], lo[2]))]
    boxes += [(lo, (lo[0], hi[1], hi[2])), ((hi[0], lo[1], lo[2]), hi),
              (lo, (hi[0], lo[1], hi[2])), ((lo[0], hi[1], lo[2]), hi)]
    faces = []
    for b_lo, b_hi in boxes:
        b_lo, b_hi = np.asarray(b_lo, dtype=np.float64), np.asarray(b_hi, dtype=np.float64)
        axis = int(np.argmin(b_hi - b_lo))
        faces.append(next(f for f in _box_faces(b_lo, b_hi) if f[0][axis] == b_lo[axis]))
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
    if areas.sum() == 0:
        return np.repeat(lo[None, :], n, axis=0)
    choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.uniform(size=(n, 2))
    return (np.array([f[0] for f in faces])[choice]
            + uv[:, :1] * np.array([f[1] for f in faces])[choice]
            + uv[:, 1:] * np.array([f[2] for f in faces])[choice])


def sample_clutter(spec: SceneSpec, n: int, model_radius: float, rng: np.random.Generator) -> np.ndarray:
    """Points de fouillis: uniformes dans la boîte élargie, plus sol ou parois selon le profil."""
    if n == 0:
        return np.zeros((0, 3))
    lo, hi = _clutter_box(spec, model_radius)
    if spec.clutter_kind == 'uniform':
        return lo + rng.uniform(size=(n, 3)) * (hi - lo)
    n_surface = int(round(spec.floor_fraction * n))
    volume = lo + rng.uniform(size=(n - n_surface, 3)) * (hi - lo)
    if spec.clutter_kind == 'floor':
        surface = lo + rng.uniform(size=(n_surface, 3)) * (hi - lo)
        surface[:, 2] = spec.bounds.box_min[2]
    else:
        surface = _bin_walls(lo, hi, n_surface, rng)
    return np.concatenate([volume, surface])


# ---------------------------------------------------------------------------
# Construction de scène
# ---------------------------------------------------------------------------

def _place_instances(spec: SceneSpec, model: PointCloud, K: int, separation: float,
                     rng: np.random.Generator) -> List[RigidTransform]:
    poses: List[RigidTransform] = []
    for k in range(K):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            pose = sample_pose(spec.bounds, rng)
            if spec.bounds.rest_on_floor:
                pose = _rest_on_floor(pose, model, spec.bounds.box_min[2])
            if all(np.linalg.norm(pose.t - other.t) >= separation for other in poses):
                poses.append(pose)
                break
        else:
            raise SceneGenerationError(
                f"Instance {k}: séparation {separation:.4g} impossible en {MAX_PLACEMENT_ATTEMPTS} essais "
                f"({k} instance(s) déjà placée(s))"
            )
    return poses


def build_scene(spec: SceneSpec, model: Optional[PointCloud] = None,
                scene_id: str = 'scene_0000') -> Tuple[PointCloud, SceneGroundTruth]:
    """Scène synthétique et vérité terrain; labels et ensembles visibles enregistrés avant le bruit."""
    model = resolve_model(spec.model, spec.model_points) if model is None else model
    rng = np.random.default_rng(spec.seed)
    model_radius = model.radius()
    separation = 2.0 * model_radius if spec.min_separation is None else spec.min_separation

    lo_k, hi_k = spec.instances
    K = int(rng.integers(lo_k, hi_k + 1))
    poses = _place_instances(spec, model, K, separation, rng)

    chunks: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    instances: List[InstanceTruth] = []
    offset = 0
    for k, pose in enumerate(poses):
        fraction = float(rng.uniform(*spec.occlusion)) if spec.occlusion[1] > spec.occlusion[0] else spec.occlusion[0]
        visible = occlusion_cut(model, fraction, rng)
        points = pose.apply(model.points[visible])
        centroid = points.mean(axis=0) if len(points) else pose.t.copy()
        radius = float(np.max(np.linalg.norm(points - centroid, axis=1))) if len(points) else 0.0
        instances.append(InstanceTruth(
            pose=pose,
            occlusion=fraction,
            visible_model_indices=visible,
            visible_scene_indices=np.arange(offset, offset + len(visible)),
            centroid=centroid,
            radius=radius,
        ))
        chunks.append(points)
        labels.append(np.full(len(visible), k, dtype=np.int64))
        offset += len(visible)

    n_clutter = spec.clutter_points
    if n_clutter is None:
        n_clutter = int(round(spec.clutter_fraction * offset))
    clutter = sample_clutter(spec, n_clutter, model_radius, rng)
    chunks.append(clutter)
    labels.append(np.full(len(clutter), -1, dtype=np.int64))

    points = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    all_labels = np.concatenate(labels)
    if spec.noise > 0:
        points = points + rng.normal(0.0, spec.noise, size=points.shape)

    logger.debug("Scène %s: %d instances, %d points (%d fouillis)", scene_id, K, len(points), len(clutter))
    truth = SceneGroundTruth(instances, all_labels, spec, spec.seed, scene_id, model_radius)
    return PointCloud(points, all_labels), truth


def scene_seed(base_seed: int, index: int) -> int:
    return base_seed + index


def build_scenes(spec: SceneSpec, count: int, model: Optional[PointCloud] = None,
                 threads: int = 1) -> List[Tuple[PointCloud, SceneGroundTruth]]:
    """Lot de scènes, graine spec.seed + i par scène; résultat indépendant du nombre de threads."""
    model = resolve_model(spec.model, spec.model_points) if model is None else model
    specs = [spec.model_copy(update={'seed': scene_seed(spec.seed, i)}) for i in range(count)]
    names = [f'scene_{i:04d}' for i in range(count)]

    def run(item):
        s, name = item
        return build_scene(s, model, name)

    if threads <= 1 or count < 2:
        return [run(item) for item in zip(specs, names)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, zip(specs, names)))


# ---------------------------------------------------------------------------
# Manifeste
# ---------------------------------------------------------------------------

class InstanceRecord(BaseModel):
    id: int = Field(ge=0)
    R: List[List[float]]
    t: List[float]
    occlusion: float = Field(ge=0.0, lt=1.0)
    visible_model_indices: List[int]
    visible_scene_indices: List[int]
    centroid: List[float]
    radius: float = Field(ge=0.0)

    @field_validator('R')
    @classmethod
    def _rotation(cls, value):
        if len(value) != 3 or any(len(row) != 3 for row in value):
            raise ValueError("R doit être 3×3")
        R = np.array(value, dtype=np.float64)
        try:
            RigidTransform(R, np.zeros(3))
        except InvariantError as e:
            raise ValueError(f"violation d'invariant: {e}")
        return value

    @field_validator('t', 'centroid')
    @classmethod
    def _vector(cls, value):
        if len(value) != 3:
            raise ValueError("vecteur de longueur 3 attendu")
        return value


class ManifestModel(BaseModel):
    format: Literal['focusreg-manifest'] = MANIFEST_FORMAT
    version: int = MANIFEST_VERSION
    scene_id: str
    seed: int
    num_points: int = Field(ge=0)
    model_radius: float = Field(ge=0.0)
    spec: SceneSpec
    instances: List[InstanceRecord]

    @model_validator(mode='after')
    def _consistent(self):
        seen = np.zeros(self.num_points, dtype=bool)
        for k, inst in enumerate(self.instances):
            if inst.id != k:
                raise ValueError(f"instances[{k}].id = {inst.id}, attendu {k}")
            if len(inst.visible_model_indices) != len(inst.visible_scene_indices):
                raise ValueError(f"instances[{k}]: ensembles visibles de tailles différentes")
            idx = np.asarray(inst.visible_scene_indices, dtype=np.int64)
            if len(idx) and (idx.min() < 0 or idx.max() >= self.num_points):
                raise ValueError(f"instances[{k}]: indice de scène hors de [0, {self.num_points})")
            if np.any(seen[idx]):
                raise ValueError(f"instances[{k}]: point de scène attribué à deux instances")
            seen[idx] = True
        return self


def manifest_dict(gt: SceneGroundTruth) -> dict:
    return {
        'format': MANIFEST_FORMAT,
        'version': MANIFEST_VERSION,
        'scene_id': gt.scene_id,
        'seed': gt.seed,
        'num_points': gt.num_points,
        'model_radius': gt.model_radius,
        'spec': gt.spec.model_dump(mode='json'),
        'instances': [
            {
                'id': k,
                'R': inst.pose.R.tolist(),
                't': inst.pose.t.tolist(),
                'occlusion': inst.occlusion,
                'visible_model_indices': inst.visible_model_indices.tolist(),
                'visible_scene_indices': inst.visible_scene_indices.tolist(),
                'centroid': np.asarray(inst.centroid).tolist(),
                'radius': inst.radius,
            }
            for k, inst in enumerate(gt.instances)
        ],
    }


def emit_manifest(gt: SceneGroundTruth, path) -> None:
    """Manifeste JSON; les float64 passent par repr (aller-retour exact)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(manifest_dict(gt), f, indent=1)
        f.write('\n')


def _truth_from_model(data: ManifestModel) -> SceneGroundTruth:
    labels = np.full(data.num_points, -1, dtype=np.int64)
    instances = []
    for k, rec in enumerate(data.instances):
        scene_idx = np.asarray(rec.visible_scene_indices, dtype=np.int64)
        labels[scene_idx] = k
        instances.append(InstanceTruth(
            pose=RigidTransform(np.array(rec.R), np.array(rec.t)),
            occlusion=rec.occlusion,
            visible_model_indices=np.asarray(rec.visible_model_indices, dtype=np.int64),
            visible_scene_indices=scene_idx,
            centroid=np.array(rec.centroid, dtype=np.float64),
            radius=rec.radius,
        ))
    return SceneGroundTruth(instances, labels, data.spec, data.seed, data.scene_id, data.model_radius)


def load_manifest(path) -> SceneGroundTruth:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ManifestError(f"{path}: {e.strerror}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:{e.lineno}:{e.colno}: JSON invalide ({e.msg})")
    try:
        data = ManifestModel.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = '.'.join(str(part) for part in first['loc']) or '<racine>'
        raise ManifestError(f"{path}: champ '{where}': {first['msg']}")
    return _truth_from_model(data)


def validate_against_cloud(gt: SceneGroundTruth, cloud: PointCloud, model: PointCloud,
                           eps: float = 1e-5) -> List[str]:
    """Vérifie un manifeste contre son nuage: taille, labels, et distance au modèle des points
    étiquetés (≤ 4σ√3 + eps après retour dans le repère modèle). Retourne les anomalies."""
    problems = []
    if len(cloud) != gt.num_points:
        return [f"{len(cloud)} points dans le nuage, {gt.num_points} dans le manifeste"]
    if cloud.labels is not None and not np.array_equal(cloud.labels, gt.labels):
        problems.append(f"{int(np.count_nonzero(cloud.labels != gt.labels))} label(s) différent(s)")
    tolerance = 4.0 * gt.spec.noise * np.sqrt(3.0) + eps
    model_index = SpatialIndex.build(model)
    for k, inst in enumerate(gt.instances):
        if len(inst.visible_scene_indices) == 0:
            continue
        if len(inst.visible_model_indices) and inst.visible_model_indices.max() >= len(model):
            problems.append(f"instance {k}: indice modèle hors du modèle ({len(model)} points)")
            continue
        local = inst.pose.inverse().apply(cloud.points[inst.visible_scene_indices])
        dist, _ = knn(model_index, local, 1)
        worst = float(dist.max())
        if worst > tolerance:
            problems.append(f"instance {k}: point à {worst:.3g} m du modèle (tolérance {tolerance:.3g})")
    return problems
