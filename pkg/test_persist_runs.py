#!/usr/bin/env python3
"""
Tests de la persistance JSONL des recalages et des métadonnées de run
"""

import json
from datetime import datetime

import numpy as np
import pytest

from conftest import random_transform
from geom_core import RigidTransform
from persist_runs import (
    RegistrationRecord,
    RunFileError,
    load_records,
    load_run_meta,
    meta_path,
    save_records,
    save_run_meta,
)


def _records(rng):
    return [
        RegistrationRecord('scene_0000', 0, random_transform(rng), center=np.array([0.1, 0.2, 0.3]),
                           inlier_count=3, scene_idx=np.array([4, 5, 6]), model_idx=np.array([1, 2, 3])),
        RegistrationRecord('scene_0000', 1, RigidTransform.identity(), failed=True,
                           diagnostic='aucune correspondance'),
    ]


def test_records_round_trip_exactly(tmp_path, rng):
    path = tmp_path / 'registrations.jsonl'
    records = _records(rng)
    save_records(path, records)
    loaded = load_records(path)
    assert len(loaded) == 2
    assert np.array_equal(loaded[0].pose.R, records[0].pose.R)
    assert np.array_equal(loaded[0].pose.t, records[0].pose.t)
    assert np.array_equal(loaded[0].scene_idx, [4, 5, 6])
    assert loaded[1].failed and loaded[1].center is None
    assert loaded[1].scene_idx.shape == (0,)
    assert len(path.read_text().splitlines()) == 2


def test_append_and_blank_lines(tmp_path, rng):
    path = tmp_path / 'r.jsonl'
    save_records(path, _records(rng)[:1])
    with open(path, 'a') as f:
        f.write('\n')
    save_records(path, _records(rng)[1:], append=True)
    assert [r.proposal_id for r in load_records(path)] == [0, 1]


def test_load_errors_carry_line_number(tmp_path, rng):
    path = tmp_path / 'r.jsonl'
    with pytest.raises(RunFileError, match='introuvable'):
        load_records(path)

    save_records(path, _records(rng))
    lines = path.read_text().splitlines()
    path.write_text(lines[0] + '\n{pas du json\n')
    with pytest.raises(RunFileError, match=':2:'):
        load_records(path)

    path.write_text(lines[0] + '\n' + lines[1].replace('"scene_id"', '"scene"') + '\n')
    with pytest.raises(RunFileError, match=':2: enregistrement invalide'):
        load_records(path)

    mirrored = lines[0].replace('"R":[', '"R":[-', 1)
    path.write_text(mirrored + '\n')
    with pytest.raises(RunFileError, match=':1:'):
        load_records(path)


def test_meta_round_trip(tmp_path):
    path = meta_path(tmp_path / 'registrations.jsonl')
    assert path.name == 'registrations.meta.json'
    started = datetime(2024, 5, 1, 12, 30, 0)
    save_run_meta(path, {'seed': 3, 'started_at': started, 'records': 7})
    meta = load_run_meta(path)
    assert meta['started_at'] == started
    assert meta['seed'] == 3
    assert load_run_meta(tmp_path / 'absent.meta.json') == {}


def test_record_line_layout(tmp_path, rng):
    path = tmp_path / 'r.jsonl'
    records = _records(rng)
    save_records(path, records)
    first, second = (json.loads(line) for line in path.read_text().splitlines())
    assert len(first['R']) == 9
    assert first['R'] == records[0].pose.R.reshape(-1).tolist()
    assert first['n_correspondences'] == 3
    assert second['n_correspondences'] == 0 and second['failed'] is True

    first['n_correspondences'] = 4
    path.write_text(json.dumps(first) + '\n')
    with pytest.raises(RunFileError, match=':1: enregistrement invalide'):
        load_records(path)
