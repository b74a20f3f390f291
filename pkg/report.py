#!/usr/bin/env python3
"""
Agrégation des rapports d'évaluation en courbes MR / MP / MF en fonction de
l'occlusion, au format de données gnuplot.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from eval_harness import read_report_csv

METRICS = ('MR', 'MP', 'MF', 'PIR')


def _value(text: str) -> Optional[float]:
    return float(text) if text not in ('', None) else None


def load_scene_rows(paths: Sequence) -> List[Dict[str, Any]]:
    """Lignes par scène des CSV d'évaluation (lignes de synthèse et scènes ignorées exclues)"""
    rows = []
    for path in paths:
        if not Path(path).exists():
            raise ValueError(f"Rapport introuvable: {path}")
        for row in read_report_csv(path):
            if row.get('scene_id') == 'mean' or row.get('skipped') == 'True':
                continue
            rows.append({
                'source': str(path),
                'scene_id': row['scene_id'],
                'occlusion': float(row.get('occlusion') or 0.0),
                **{m: _value(row.get(m, '')) for m in METRICS},
            })
    return rows


def occlusion_curve(rows: Sequence[Dict[str, Any]], bin_width: float = 0.05) -> List[Dict[str, Any]]:
    """Moyenne par scène de chaque métrique, par classe d'occlusion."""
    if bin_width <= 0:
        raise ValueError(f"Largeur de classe invalide: {bin_width}")
    bins: Dict[float, List[Dict[str, Any]]] = {}
    for row in rows:
        key = round(round(row['occlusion'] / bin_width) * bin_width, 6)
        bins.setdefault(key, []).append(row)

    curve = []
    for occlusion in sorted(bins):
        members = bins[occlusion]
        point = {'occlusion': occlusion, 'scenes': len(members)}
        for m in METRICS:
            values = [r[m] for r in members if r[m] is not None]
            point[m] = float(np.mean(values)) if values else None
        curve.append(point)
    return curve


def save_curve(curve: Sequence[Dict[str, Any]], path, title: str = 'FocusReg'):
    """Fichier .dat gnuplot: une ligne par classe, '?' pour une valeur manquante"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        f.write(f"# {title}: métriques (moyenne par scène) en fonction de l'occlusion\n")
        f.write("# occlusion " + ' '.join(METRICS) + " scenes\n")
        for point in curve:
            values = ['?' if point[m] is None else f"{point[m]:.6f}" for m in METRICS]
            f.write(f"{point['occlusion']:.4f} " + ' '.join(values) + f" {point['scenes']}\n")


def get_curve_summary(curve: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Résumé de la courbe"""
    total_scenes = sum(point['scenes'] for point in curve)
    weighted = {}
    for m in METRICS:
        pairs = [(point[m], point['scenes']) for point in curve if point[m] is not None]
        weight = sum(n for _, n in pairs)
        weighted[m] = round(sum(v * n for v, n in pairs) / weight, 4) if weight else None
    return {
        'points': len(curve),
        'scenes': total_scenes,
        'occlusion_range': (curve[0]['occlusion'], curve[-1]['occlusion']) if curve else None,
        'means': weighted,
    }
