#!/usr/bin/env python3
"""
FocusReg - Configuration des runs
Profils de jeux de données, fichier TOML (ou écho JSON d'un run précédent),
surcharges en ligne de commande. Priorité: défauts < profil < fichier < options < --set.
"""

import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from descriptors import DescriptorProviderConfig
from eval_harness import MetricThresholds
from focusing import FocusParams
from matching import MatchParams
from scene_sim import SceneSpec

PROFILE_DIR_ENV = 'FOCUSREG_PROFILE_DIR'
DEFAULT_PROFILE = 'scan2cad-like'

PROFILES: Dict[str, Dict[str, Any]] = {
    # échelle pièce: chaises posées au sol, rotation en lacet seulement
    'scan2cad-like': {
        'voxel': 0.025,
        'scene': {
            'model': 'chair',
            'instances': [4, 16],
            'bounds': {'box_min': [0.0, 0.0, 0.0], 'box_max': [8.0, 8.0, 0.0],
                       'rotation': 'yaw', 'rest_on_floor': True},
            'clutter_fraction': 0.2,
            'clutter_kind': 'floor',
        },
    },
    # échelle bac: petites pièces en vrac, rotation quelconque
    'robi-like': {
        'voxel': 0.0015,
        'scene': {
            'model': 'bracket',
            'instances': [4, 16],
            'bounds': {'box_min': [0.0, 0.0, 0.0], 'box_max': [0.25, 0.25, 0.05], 'rotation': 'so3'},
            'clutter_fraction': 0.2,
            'clutter_kind': 'bin',
        },
    },
    'shapenet-like': {
        'voxel': 0.025,
        'scene': {
            'model': 'chair',
            'instances': [4, 16],
            'bounds': {'box_min': [0.0, 0.0, 0.0], 'box_max': [4.0, 4.0, 4.0], 'rotation': 'so3'},
            'clutter_fraction': 0.2,
            'clutter_kind': 'uniform',
        },
    },
}


class ThresholdSettings(BaseModel):
    """Seuils d'évaluation exprimés relativement au voxel."""
    rte_factor: float = Field(default=4.0, gt=0.0)
    rre_max: float = Field(default=15.0, gt=0.0, le=180.0)
    center_tol_factor: float = Field(default=0.1, gt=0.0)
    pir_factor: float = Field(default=2.0, gt=0.0)


class PathSettings(BaseModel):
    scene: Optional[str] = None
    model: Optional[str] = None
    manifest: Optional[str] = None
    out: Optional[str] = None


def _default_threads() -> int:
    return os.cpu_count() or 1


class RunConfig(BaseModel):
    """Configuration effective d'un run, recopiée telle quelle dans les métadonnées."""
    profile: str = DEFAULT_PROFILE
    voxel: float = Field(default=0.025, gt=0.0)
    seed: int = 0
    threads: int = Field(default_factory=_default_threads, ge=1)
    scene: SceneSpec = Field(default_factory=SceneSpec)
    descriptor: DescriptorProviderConfig = Field(default_factory=DescriptorProviderConfig)
    focus: FocusParams = Field(default_factory=FocusParams)
    match: MatchParams = Field(default_factory=MatchParams)
    thresholds: ThresholdSettings = Field(default_factory=ThresholdSettings)
    paths: PathSettings = Field(default_factory=PathSettings)

    def metric_thresholds(self) -> MetricThresholds:
        return MetricThresholds(voxel=self.voxel, **self.thresholds.model_dump())

    def echo(self) -> dict:
        return self.model_dump(mode='json')


def deep_merge(base: dict, override: dict) -> dict:
    """Fusion récursive: les dictionnaires sont fusionnés, le reste remplacé."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def available_profiles() -> List[str]:
    names = set(PROFILES)
    directory = os.environ.get(PROFILE_DIR_ENV)
    if directory and Path(directory).is_dir():
        names.update(p.stem for p in Path(directory).glob('*.toml'))
    return sorted(names)


def load_profile(name: str) -> Dict[str, Any]:
    """Profil intégré, ou <FOCUSREG_PROFILE_DIR>/<nom>.toml."""
    directory = os.environ.get(PROFILE_DIR_ENV)
    if directory:
        candidate = Path(directory) / f'{name}.toml'
        if candidate.exists():
            return load_config_file(candidate)
    if name in PROFILES:
        return copy.deepcopy(PROFILES[name])
    raise ValueError(f"Profil inconnu '{name}' (disponibles: {', '.join(available_profiles())})")


def load_config_file(path) -> Dict[str, Any]:
    """TOML, ou JSON de métadonnées d'un run (clé 'config') pour rejouer un run."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Fichier de configuration introuvable: {path}")
    if path.suffix == '.json':
        data = json.loads(path.read_text())
        return data.get('config', data)
    try:
        with open(path, 'rb') as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ValueError(f"{path}: TOML invalide ({e})")


def parse_override(entry: str) -> Dict[str, Any]:
    """'section.cle=valeur' → {'section': {'cle': valeur}}; la valeur est lue comme un littéral TOML."""
    if '=' not in entry:
        raise ValueError(f"Surcharge mal formée '{entry}' (attendu section.cle=valeur)")
    key, raw = entry.split('=', 1)
    key = key.strip()
    if not key:
        raise ValueError(f"Surcharge sans clé: '{entry}'")
    try:
        value = tomllib.loads(f'v = {raw.strip()}')['v']
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    nested: Dict[str, Any] = value
    for part in reversed(key.split('.')):
        nested = {part: nested}
    return nested


def build_config(profile: Optional[str] = None, config_file: Optional[str] = None,
                 flags: Optional[Dict[str, Any]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Assemble la configuration effective selon l'ordre de priorité."""
    data = RunConfig(threads=1).model_dump(mode='json')
    data.pop('threads')
    file_data = load_config_file(config_file) if config_file else {}
    profile = profile or file_data.get('profile') or DEFAULT_PROFILE
    data = deep_merge(data, load_profile(profile))
    data['profile'] = profile
    data = deep_merge(data, file_data)
    data['profile'] = profile
    if flags:
        data = deep_merge(data, flags)
    for entry in overrides:
        data = deep_merge(data, parse_override(entry))
    return RunConfig.model_validate(data)
