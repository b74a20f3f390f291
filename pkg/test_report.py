#!/usr/bin/env python3
"""
Tests des courbes MR / MP / MF en fonction de l'occlusion
"""

import pytest

from eval_harness import CSV_COLUMNS
from report import get_curve_summary, load_scene_rows, occlusion_curve, save_curve


def _write_csv(path, rows):
    lines = [','.join(CSV_COLUMNS)]
    for scene_id, mr, mp, occlusion, skipped in rows:
        values = {c: '' for c in CSV_COLUMNS}
        values.update(scene_id=scene_id, MR=mr, MP=mp, MF='', PIR='', occlusion=occlusion, skipped=skipped)
        lines.append(','.join(str(values[c]) for c in CSV_COLUMNS))
    path.write_text('\n'.join(lines) + '\n')


@pytest.fixture
def reports(tmp_path):
    a = tmp_path / 'a.csv'
    b = tmp_path / 'b.csv'
    _write_csv(a, [('scene_0000', 1.0, 1.0, 0.0, False), ('scene_0001', 0.5, '', 0.02, False),
                   ('mean', 0.75, 1.0, 0.01, False)])
    _write_csv(b, [('scene_0000', 0.0, 0.0, 0.5, False), ('scene_0001', '', '', 0.0, True)])
    return [a, b]


def test_load_scene_rows_skips_summary_and_skipped(reports):
    rows = load_scene_rows(reports)
    assert [r['scene_id'] for r in rows] == ['scene_0000', 'scene_0001', 'scene_0000']
    assert rows[1]['MP'] is None
    with pytest.raises(ValueError):
        load_scene_rows([reports[0].with_name('absent.csv')])


def test_occlusion_curve_bins(reports):
    curve = occlusion_curve(load_scene_rows(reports))
    assert [p['occlusion'] for p in curve] == [0.0, 0.5]
    assert curve[0]['scenes'] == 2
    assert curve[0]['MR'] == 0.75
    assert curve[0]['MP'] == 1.0
    assert curve[0]['MF'] is None
    with pytest.raises(ValueError):
        occlusion_curve([], bin_width=0.0)


def test_save_curve_and_summary(tmp_path, reports):
    curve = occlusion_curve(load_scene_rows(reports))
    path = tmp_path / 'curve.dat'
    save_curve(curve, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith('#') and lines[1] == '# occlusion MR MP MF PIR scenes'
    assert lines[2] == '0.0000 0.750000 1.000000 ? ? 2'
    summary = get_curve_summary(curve)
    assert summary['scenes'] == 3
    assert summary['occlusion_range'] == (0.0, 0.5)
    assert summary['means']['MR'] == 0.5
    assert get_curve_summary([])['occlusion_range'] is None
