"""
Persister les recalages sur disque: un enregistrement JSON par ligne (JSONL)
et un fichier de métadonnées du run à côté.
"""
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from geom_core import InvariantError, RigidTransform

RUNS_FILE = "registrations.jsonl"
META_SUFFIX = ".meta.json"


class RunFileError(ValueError):
    """Fichier de recalages illisible (numéro de ligne indiqué)."""


@dataclass
class RegistrationRecord:
    """Résultat d'une proposition, indices de correspondances exprimés dans la scène."""

    scene_id: str
    proposal_id: int
    pose: RigidTransform
    failed: bool = False
    diagnostic: str = ''
    center: Optional[np.ndarray] = None
    inlier_count: int = 0
    scene_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    model_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_dict(self) -> dict:
        return {
            'scene_id': self.scene_id,
            'proposal_id': self.proposal_id,
            'failed': self.failed,
            'diagnostic': self.diagnostic,
            'R': self.pose.R.reshape(-1).tolist(),
            't': self.pose.t.tolist(),
            'center': None if self.center is None else np.asarray(self.center).tolist(),
            'inlier_count': self.inlier_count,
            'n_correspondences': int(len(self.scene_idx)),
            'correspondences': np.stack([self.scene_idx, self.model_idx], axis=1).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'RegistrationRecord':
        pairs = np.asarray(data.get('correspondences', []), dtype=np.int64).reshape(-1, 2)
        if int(data.get('n_correspondences', len(pairs))) != len(pairs):
            raise ValueError(f"n_correspondences={data['n_correspondences']} pour {len(pairs)} paires")
        center = data.get('center')
        return cls(
            scene_id=str(data['scene_id']),
            proposal_id=int(data['proposal_id']),
            pose=RigidTransform(np.array(data['R'], dtype=np.float64).reshape(3, 3),
                                np.array(data['t'], dtype=np.float64)),
            failed=bool(data.get('failed', False)),
            diagnostic=str(data.get('diagnostic', '')),
            center=None if center is None else np.array(center, dtype=np.float64),
            inlier_count=int(data.get('inlier_count', 0)),
            scene_idx=pairs[:, 0].copy(),
            model_idx=pairs[:, 1].copy(),
        )


def record_from_registration(scene_id: str, proposal, registration) -> RegistrationRecord:
    """Convertit un InstanceRegistration (indices de proposition) en enregistrement (indices de scène)."""
    corr = registration.correspondences
    return RegistrationRecord(
        scene_id=scene_id,
        proposal_id=registration.proposal_id,
        pose=registration.pose,
        failed=registration.failed,
        diagnostic=registration.diagnostic,
        center=proposal.center,
        inlier_count=registration.inlier_count,
        scene_idx=np.asarray(proposal.indices, dtype=np.int64)[corr.proposal_idx],
        model_idx=np.asarray(corr.model_idx, dtype=np.int64),
    )


def save_records(path, records: Iterable[RegistrationRecord], append: bool = False):
    """Sauvegarde les recalages, une ligne compacte par proposition"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a' if append else 'w') as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), separators=(',', ':')) + '\n')


def load_records(path) -> List[RegistrationRecord]:
    """Charge les recalages depuis le disque"""
    path = Path(path)
    if not path.exists():
        raise RunFileError(f"{path}: fichier introuvable")

    records = []
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(RegistrationRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise RunFileError(f"{path}:{lineno}: JSON invalide ({e.msg})")
            except (KeyError, TypeError, ValueError, InvariantError) as e:
                raise RunFileError(f"{path}:{lineno}: enregistrement invalide ({e})")
    return records


def meta_path(records_path) -> Path:
    path = Path(records_path)
    return path.with_name(path.stem + META_SUFFIX)


def save_run_meta(path, meta: dict):
    """Sauvegarde les métadonnées du run (seuls champs non déterministes: dates et durée)"""
    meta_copy = meta.copy()
    for key in ('started_at', 'finished_at'):
        if key in meta_copy and isinstance(meta_copy[key], datetime):
            meta_copy[key] = meta_copy[key].isoformat()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(meta_copy, f, indent=2)


def load_run_meta(path) -> dict:
    """Charge les métadonnées du run"""
    path = Path(path)
    if not path.exists():
        return {}

    with open(path, 'r') as f:
        meta = json.load(f)

    # Reconvertir les dates
    for key in ('started_at', 'finished_at'):
        if key in meta and isinstance(meta[key], str):
            meta[key] = datetime.fromisoformat(meta[key])

    return meta
