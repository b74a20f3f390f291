#!/usr/bin/env python3
"""
Tests de bout en bout de la ligne de commande focus_reg
"""

import hashlib
import json

import pytest

from eval_harness import load_report_json, read_report_csv
from focus_reg import EXIT_FAILED, EXIT_INPUT, EXIT_OK, main, parse_instances
from persist_runs import load_run_meta
from ply_io import read_ply
from scene_sim import load_manifest


def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.iterdir()) if p.name.startswith(('scene_', 'model'))}


@pytest.fixture(scope='module')
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp('data')
    code = main(['gen', '--out', str(out), '--instances', '3', '--scenes', '2', '--seed', '7',
                 '--set', 'scene.model_points=1024', '--threads', '1'])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope='module')
def registered(dataset):
    code = main(['register', str(dataset), '--descriptor', 'oracle', '--threads', '2'])
    assert code == EXIT_OK
    return dataset / 'registrations.jsonl'


def test_parse_instances():
    assert parse_instances('12') == 12
    assert parse_instances('4-16') == [4, 16]


def test_gen_outputs(dataset):
    names = sorted(p.name for p in dataset.iterdir() if not p.name.startswith(('registrations', 'report')))
    assert names == ['gen.config.json', 'model.ply', 'scene_0000.json', 'scene_0000.ply',
                     'scene_0001.json', 'scene_0001.ply']
    truth = load_manifest(dataset / 'scene_0001.json')
    assert len(truth) == 3 and truth.seed == 8
    cloud = read_ply(dataset / 'scene_0001.ply')
    assert len(cloud) == truth.num_points
    config = json.loads((dataset / 'gen.config.json').read_text())['config']
    assert config['seed'] == 7 and config['scene']['model_points'] == 1024


def test_gen_is_reproducible(tmp_path, dataset):
    code = main(['gen', '--out', str(tmp_path), '--instances', '3', '--scenes', '2', '--seed', '7',
                 '--set', 'scene.model_points=1024', '--threads', '2'])
    assert code == EXIT_OK
    assert _digest(tmp_path) == _digest(dataset)


def test_gen_without_instances(tmp_path):
    assert main(['gen', '--out', str(tmp_path), '--instances', '0', '--clutter', '0',
                 '--set', 'scene.clutter_points=100']) == EXIT_OK
    assert len(load_manifest(tmp_path / 'scene_0000.json')) == 0


def test_gen_rejects_bad_occlusion(tmp_path, capsys):
    assert main(['gen', '--out', str(tmp_path), '--occlusion', '1.0']) == EXIT_INPUT
    assert '❌' in capsys.readouterr().err


def test_oracle_register_and_eval(registered, capsys):
    meta = load_run_meta(registered.with_name('registrations.meta.json'))
    assert meta['records'] == 6
    assert [s['scene_id'] for s in meta['scenes']] == ['scene_0000', 'scene_0001']

    assert main(['eval', str(registered.parent), '--fail-under', '0.99']) == EXIT_OK
    report = load_report_json(registered.with_name('report.json'))
    assert report.summary['MR'] == 1.0
    assert report.summary['MP'] == 1.0
    assert report.summary['MF'] == 1.0
    assert report.summary['PIR'] == 1.0
    assert read_report_csv(registered.with_name('report.csv'))[-1]['scene_id'] == 'mean'
    assert 'MR:           1.0000' in capsys.readouterr().out


def test_register_is_reproducible(tmp_path, dataset, registered):
    again = tmp_path / 'again.jsonl'
    assert main(['register', str(dataset), '--out', str(again), '--threads', '1']) == EXIT_OK
    assert again.read_bytes() == registered.read_bytes()


def test_eval_fail_under(registered, tmp_path):
    assert main(['eval', str(registered), '--out', str(tmp_path / 'strict'), '--fail-under', '1.5']) == EXIT_FAILED
    assert (tmp_path / 'strict.csv').exists()


def test_register_single_scene_needs_model(dataset, tmp_path, capsys):
    code = main(['register', str(dataset / 'scene_0000.ply'), '--out', str(tmp_path / 'r.jsonl')])
    assert code == EXIT_INPUT
    assert '--model' in capsys.readouterr().err

    code = main(['register', str(dataset / 'scene_0000.ply'), '--model', str(dataset / 'model.ply'),
                 '--out', str(tmp_path / 'r.jsonl')])
    assert code == EXIT_OK
    assert len((tmp_path / 'r.jsonl').read_text().splitlines()) == 3


def test_register_corrupt_ply(dataset, tmp_path, capsys):
    broken = tmp_path / 'scene_0000.ply'
    broken.write_bytes((dataset / 'scene_0000.ply').read_bytes()[:-100])
    code = main(['register', str(broken), '--model', str(dataset / 'model.ply'),
                 '--manifest', str(dataset / 'scene_0000.json')])
    assert code == EXIT_INPUT
    assert 'tronquées' in capsys.readouterr().err


def test_register_missing_input(tmp_path):
    assert main(['register', str(tmp_path / 'absent.ply'), '--model', 'x.ply']) == EXIT_INPUT
    assert main(['register', str(tmp_path)]) == EXIT_INPUT


def test_eval_without_meta(tmp_path):
    (tmp_path / 'registrations.jsonl').write_text('')
    assert main(['eval', str(tmp_path)]) == EXIT_INPUT


def test_check_losses(capsys):
    assert main(['check-losses']) == EXIT_OK
    assert 'vérifications réussies' in capsys.readouterr().out

    assert main(['check-losses', '--json', '--clamp-weights']) == EXIT_OK
    data = json.loads(capsys.readouterr().out)
    assert data['passed'] is True
    assert data['params']['clamp_weights'] is True
    assert all(row['passed'] for row in data['rows'])


def test_check_losses_rejects_zero_gamma(capsys):
    assert main(['check-losses', '--gamma', '0']) == EXIT_INPUT
    assert 'Configuration invalide' in capsys.readouterr().err


def test_report_curve(registered, tmp_path):
    assert main(['eval', str(registered), '--out', str(tmp_path / 'occ0')]) == EXIT_OK
    out = tmp_path / 'curve.dat'
    assert main(['report', str(tmp_path / 'occ0.csv'), '--out', str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[2].startswith('0.0000 1.000000 1.000000 1.000000 1.000000 2')


def test_register_dumps_proposals(dataset, tmp_path):
    dump = tmp_path / 'proposals'
    assert main(['register', str(dataset / 'scene_0000.ply'), '--model', str(dataset / 'model.ply'),
                 '--out', str(tmp_path / 'r.jsonl'), '--dump-proposals', str(dump)]) == EXIT_OK
    index = json.loads((dump / 'scene_0000.proposals.json').read_text())
    assert len(index['proposals']) == 3
    assert all((dump / e['ply']).exists() for e in index['proposals'])
