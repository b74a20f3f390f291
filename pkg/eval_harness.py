#!/usr/bin/env python3
"""
FocusReg - Évaluation contre la vérité terrain
MR / MP / MF des poses, ratio d'inliers par paire (PIR) et métriques de
détection des centres, agrégées en moyenne par scène.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from geom_core import PointCloud, RigidTransform, rre, rte
from persist_runs import RegistrationRecord
from scene_sim import SceneGroundTruth

logger = logging.getLogger(__name__)

AGGREGATION = 'per-scene mean'


class ScenePredictionMismatchError(ValueError):
    """Prédictions pour une scène sans manifeste."""


class MetricThresholds(BaseModel):
    """Critère de succès: RTE ≤ rte_factor × voxel et RRE ≤ rre_max (degrés)."""
    voxel: float = Field(gt=0.0)
    rte_factor: float = Field(default=4.0, gt=0.0)
    rre_max: float = Field(default=15.0, gt=0.0, le=180.0)
    center_tol_factor: float = Field(default=0.1, gt=0.0)
    pir_factor: float = Field(default=2.0, gt=0.0)

    @property
    def rte_max(self) -> float:
        return self.rte_factor * self.voxel

    @property
    def pir_radius(self) -> float:
        return self.pir_factor * self.voxel


# ---------------------------------------------------------------------------
# Affectation prédictions ↔ instances
# ---------------------------------------------------------------------------

@dataclass
class PoseAssignment:
    pairs: List[Tuple[int, int]]
    correct: np.ndarray
    registered: np.ndarray
    rre: np.ndarray
    rte: np.ndarray
    counted: np.ndarray  # prédictions non échouées

    @property
    def n_pred(self) -> int:
        return int(self.counted.sum())

    @property
    def n_gt(self) -> int:
        return len(self.registered)


def pose_error_table(predictions: Sequence, poses: Sequence[RigidTransform]) -> Tuple[np.ndarray, np.ndarray]:
    """Matrices (prédictions × instances) de RRE (degrés) et RTE (mètres)."""
    rre_table = np.zeros((len(predictions), len(poses)))
    rte_table = np.zeros((len(predictions), len(poses)))
    for i, pred in enumerate(predictions):
        for j, pose in enumerate(poses):
            rre_table[i, j] = rre(pred.pose.R, pose.R)
            rte_table[i, j] = rte(pred.pose.t, pose.t)
    return rre_table, rte_table


def greedy_assignment(passing: np.ndarray, cost: np.ndarray) -> List[Tuple[int, int]]:
    """Appariement un-à-un glouton par coût croissant (égalités: ligne puis colonne)."""
    rows, cols = np.nonzero(passing)
    order = np.lexsort((cols, rows, cost[rows, cols]))
    used_rows, used_cols = set(), set()
    pairs = []
    for o in order:
        i, j = int(rows[o]), int(cols[o])
        if i in used_rows or j in used_cols:
            continue
        used_rows.add(i)
        used_cols.add(j)
        pairs.append((i, j))
    return pairs


def match_poses_to_gt(predictions: Sequence, gt: SceneGroundTruth, thr: MetricThresholds) -> PoseAssignment:
    """Une prédiction est correcte si elle est affectée à une instance dont elle passe les deux seuils.

    Les prédictions échouées (failed) ne comptent pas.
    """
    counted = np.array([not p.failed for p in predictions], dtype=bool)
    rre_table, rte_table = pose_error_table(predictions, gt.poses)
    passing = (rre_table <= thr.rre_max) & (rte_table <= thr.rte_max) & counted[:, None]
    pairs = greedy_assignment(passing, rte_table)

    correct = np.zeros(len(predictions), dtype=bool)
    registered = np.zeros(len(gt), dtype=bool)
    for i, j in pairs:
        correct[i] = True
        registered[j] = True
    return PoseAssignment(pairs, correct, registered, rre_table, rte_table, counted)


@dataclass(frozen=True)
class MetricCounts:
    registered: int
    gt_total: int
    correct: int
    pred_total: int

    @classmethod
    def from_assignment(cls, assignment: PoseAssignment) -> 'MetricCounts':
        return cls(int(assignment.registered.sum()), assignment.n_gt,
                   int(assignment.correct.sum()), assignment.n_pred)


def compute_mr_mp_mf(counts: MetricCounts) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """(MR, MP, MF). MR indéfini sans instance, MP indéfini sans prédiction; MF vaut 0 si l'un
    des deux est indéfini ou si les deux sont nuls. Scène sans instance ni prédiction → ValueError."""
    if counts.gt_total < 0 or counts.pred_total < 0:
        raise ValueError("Effectifs négatifs")
    if counts.gt_total == 0 and counts.pred_total == 0:
        raise ValueError("Scène sans instance ni prédiction")
    mr = counts.registered / counts.gt_total if counts.gt_total else None
    mp = counts.correct / counts.pred_total if counts.pred_total else None
    if mr is None or mp is None or mp + mr == 0:
        return mr, mp, 0.0
    return mr, mp, 2 * mp * mr / (mp + mr)


# ---------------------------------------------------------------------------
# PIR et centres
# ---------------------------------------------------------------------------

def pair_inlier_ratio(scene_points: np.ndarray, model_points: np.ndarray, pose: RigidTransform,
                      radius: float) -> Optional[float]:
    """Fraction des paires (p, q) avec ‖T(q) − p‖ ≤ radius; None sans correspondance."""
    scene_points = np.asarray(scene_points, dtype=np.float64).reshape(-1, 3)
    model_points = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(scene_points) == 0:
        return None
    residual = np.linalg.norm(pose.apply(model_points) - scene_points, axis=1)
    return float(np.count_nonzero(residual <= radius) / len(residual))


def compute_pir(items: Sequence[Tuple[np.ndarray, np.ndarray, RigidTransform]],
                radius: float) -> Tuple[Optional[float], List[Optional[float]]]:
    """PIR moyen sur les instances ayant des correspondances, et la valeur par instance."""
    per_instance = [pair_inlier_ratio(p, q, pose, radius) for p, q, pose in items]
    defined = [v for v in per_instance if v is not None]
    if len(defined) < len(per_instance):
        logger.info("PIR: %d instance(s) sans correspondance exclue(s)", len(per_instance) - len(defined))
    return (float(np.mean(defined)) if defined else None), per_instance


@dataclass
class CenterMetrics:
    mr: Optional[float]
    mp: Optional[float]
    rmse: Optional[float]
    pairs: List[Tuple[int, int]] = field(default_factory=list)


def center_metrics(pred_centers, gt: SceneGroundTruth, tol_factor: float = 0.1) -> CenterMetrics:
    """Détection réussie si ‖c_pred − c_gt‖ ≤ tol_factor × r_instance (rayon du nuage visible)."""
    centers = np.asarray(getattr(pred_centers, 'centers', pred_centers), dtype=np.float64).reshape(-1, 3)
    gt_centers = gt.centroids
    if len(centers) and len(gt_centers):
        dist = np.linalg.norm(centers[:, None, :] - gt_centers[None, :, :], axis=2)
    else:
        dist = np.zeros((len(centers), len(gt_centers)))
    passing = dist <= tol_factor * gt.radii[None, :]
    pairs = greedy_assignment(passing, dist)
    mr = len(pairs) / len(gt_centers) if len(gt_centers) else None
    mp = len(pairs) / len(centers) if len(centers) else None
    rmse = float(np.sqrt(np.mean([dist[i, j] ** 2 for i, j in pairs]))) if pairs else None
    return CenterMetrics(mr, mp, rmse, pairs)


# ---------------------------------------------------------------------------
# Rapport
# ---------------------------------------------------------------------------

class SceneRow(BaseModel):
    scene_id: str
    n_gt: int
    n_pred: int
    registered: int
    correct: int
    MR: Optional[float] = None
    MP: Optional[float] = None
    MF: Optional[float] = None
    PIR: Optional[float] = None
    center_MR: Optional[float] = None
    center_MP: Optional[float] = None
    center_RMSE: Optional[float] = None
    occlusion: float = 0.0
    skipped: bool = False


class InstanceRow(BaseModel):
    scene_id: str
    instance: int
    registered: bool
    proposal_id: Optional[int] = None
    RRE: Optional[float] = None
    RTE: Optional[float] = None


class EvalReport(BaseModel):
    aggregation: str = AGGREGATION
    thresholds: MetricThresholds
    scenes: List[SceneRow] = []
    instances: List[InstanceRow] = []
    summary: Dict[str, Optional[float]] = {}
    diagnostics: List[str] = []


def _nearest_instance(center: Optional[np.ndarray], gt: SceneGroundTruth) -> Optional[int]:
    if center is None or len(gt) == 0:
        return None
    return int(np.argmin(np.linalg.norm(gt.centroids - center, axis=1)))


def evaluate_scene(records: Sequence[RegistrationRecord], gt: SceneGroundTruth, scene: PointCloud,
                   model: PointCloud, thr: MetricThresholds) -> Tuple[SceneRow, List[InstanceRow], List[str]]:
    """Métriques d'une scène: poses, PIR par proposition, centres de propositions."""
    records = sorted(records, key=lambda r: r.proposal_id)
    diagnostics = [f"{gt.scene_id}/proposition {r.proposal_id}: {r.diagnostic or 'échec'}"
                   for r in records if r.failed]
    assignment = match_poses_to_gt(records, gt, thr)
    counts = MetricCounts.from_assignment(assignment)
    row = SceneRow(scene_id=gt.scene_id, n_gt=counts.gt_total, n_pred=counts.pred_total,
                   registered=counts.registered, correct=counts.correct,
                   occlusion=float(np.mean([i.occlusion for i in gt.instances])) if len(gt) else 0.0)
    if counts.gt_total == 0 and counts.pred_total == 0:
        row.skipped = True
        diagnostics.append(f"{gt.scene_id}: ni instance ni prédiction, scène ignorée")
        return row, [], diagnostics
    row.MR, row.MP, row.MF = compute_mr_mp_mf(counts)
    if row.MP is None:
        diagnostics.append(f"{gt.scene_id}: aucune prédiction, MP non défini")

    assigned = {i: j for i, j in assignment.pairs}
    items = []
    for i, record in enumerate(records):
        if len(record.scene_idx) == 0:
            continue
        target = assigned.get(i, _nearest_instance(record.center, gt))
        if target is None:
            continue
        items.append((scene.points[record.scene_idx], model.points[record.model_idx], gt.poses[target]))
    row.PIR, _ = compute_pir(items, thr.pir_radius)

    centers = [r.center for r in records if r.center is not None]
    cm = center_metrics(np.array(centers).reshape(-1, 3), gt, thr.center_tol_factor)
    row.center_MR, row.center_MP, row.center_RMSE = cm.mr, cm.mp, cm.rmse

    by_gt = {j: i for i, j in assignment.pairs}
    instance_rows = []
    for j in range(len(gt)):
        i = by_gt.get(j)
        if i is None and assignment.n_pred:
            live = np.flatnonzero(assignment.counted)
            i = int(live[np.argmin(assignment.rte[live, j])])
        instance_rows.append(InstanceRow(
            scene_id=gt.scene_id,
            instance=j,
            registered=bool(assignment.registered[j]),
            proposal_id=None if i is None else records[i].proposal_id,
            RRE=None if i is None else float(assignment.rre[i, j]),
            RTE=None if i is None else float(assignment.rte[i, j]),
        ))
    return row, instance_rows, diagnostics


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def summarize(rows: Sequence[SceneRow]) -> Dict[str, Optional[float]]:
    """Moyenne par scène des métriques définies (scènes ignorées exclues)."""
    live = [r for r in rows if not r.skipped]
    return {
        key: _mean([getattr(r, key) for r in live])
        for key in ('MR', 'MP', 'MF', 'PIR', 'center_MR', 'center_MP', 'center_RMSE')
    }


def evaluate_runs(records: Sequence[RegistrationRecord], truths: Dict[str, SceneGroundTruth],
                  scenes: Dict[str, PointCloud], model: PointCloud, thr: MetricThresholds) -> EvalReport:
    """Évalue toutes les scènes dans l'ordre de leurs identifiants."""
    unknown = sorted({r.scene_id for r in records} - set(truths))
    if unknown:
        raise ScenePredictionMismatchError(
            f"Prédictions pour des scènes sans manifeste: {', '.join(unknown)}"
        )
    by_scene: Dict[str, List[RegistrationRecord]] = {scene_id: [] for scene_id in truths}
    for record in records:
        by_scene[record.scene_id].append(record)

    report = EvalReport(thresholds=thr)
    for scene_id in sorted(truths):
        row, instance_rows, diagnostics = evaluate_scene(
            by_scene[scene_id], truths[scene_id], scenes[scene_id], model, thr
        )
        report.scenes.append(row)
        report.instances.extend(instance_rows)
        report.diagnostics.extend(diagnostics)
    report.summary = summarize(report.scenes)
    return report


CSV_COLUMNS = ['scene_id', 'n_gt', 'n_pred', 'registered', 'correct', 'MR', 'MP', 'MF', 'PIR',
               'center_MR', 'center_MP', 'center_RMSE', 'occlusion', 'skipped']


def _csv_value(value) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_json(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + '\n')


def load_report_json(path) -> EvalReport:
    return EvalReport.model_validate_json(Path(path).read_text())


def write_report_csv(report: EvalReport, path) -> None:
    """Une ligne par scène puis une ligne de synthèse (scene_id = 'mean')."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in report.scenes:
            data = row.model_dump()
            writer.writerow([_csv_value(data[c]) for c in CSV_COLUMNS])
        live = [r for r in report.scenes if not r.skipped]
        summary = [
            'mean',
            sum(r.n_gt for r in live), sum(r.n_pred for r in live),
            sum(r.registered for r in live), sum(r.correct for r in live),
            *[report.summary.get(c) for c in CSV_COLUMNS[5:12]],
            _mean([r.occlusion for r in live]), False,
        ]
        writer.writerow([_csv_value(v) for v in summary])


def read_report_csv(path) -> List[Dict[str, str]]:
    with open(path, newline='') as f:
        return list(csv.DictReader(f))
