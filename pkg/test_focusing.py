#!/usr/bin/env python3
"""
Tests de la focalisation multi-objets: DBSCAN, centres, propositions, pipeline
"""

import json
import logging
from collections import deque

import numpy as np
import pytest

from conftest import VOXEL
from descriptors import (
    DescriptorProviderConfig,
    FeatureMap,
    cross_attention_stack,
    geodesic_embedding,
    make_provider,
    random_attention_weights,
)
from eval_harness import center_metrics
from focusing import (
    FOCUS_ATTENTION_LAYERS,
    CenterSet,
    FocusHeads,
    FocusParams,
    MaskScores,
    MultiObjectFocuser,
    OffsetField,
    Perceptron,
    compute_centers,
    dbscan,
    focus_pipeline,
    generate_proposals,
    load_focus_heads,
    oracle_focus,
    predict_offsets,
    predict_point_mask,
    random_focus_heads,
    save_focus_heads,
    save_proposals,
    shift_and_filter,
)
from geom_core import PointCloud, derive_seed, voxel_downsample
from ply_io import read_ply


def quadratic_dbscan(points, eps, min_pts):
    """Référence O(n²) sur matrice de distances dense."""
    n = len(points)
    dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    adjacency = dist <= eps
    core = adjacency.sum(axis=1) >= min_pts
    labels = np.full(n, -1)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for nb in np.flatnonzero(adjacency[j]):
                if labels[nb] == -1:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(nb)
        cluster += 1
    return labels


def partition(labels):
    return {frozenset(np.flatnonzero(labels == c)) for c in np.unique(labels)}


def test_dbscan_matches_quadratic_reference(rng):
    for _ in range(40):
        n = int(rng.integers(1, 500))
        blobs = rng.uniform(-3, 3, size=(4, 3))
        pts = blobs[rng.integers(0, 4, n)] + rng.normal(0.0, 0.3, size=(n, 3))
        eps = float(rng.uniform(0.1, 0.5))
        min_pts = int(rng.integers(1, 8))
        assert partition(dbscan(pts, eps, min_pts)) == partition(quadratic_dbscan(pts, eps, min_pts))


def test_dbscan_edge_cases():
    assert len(dbscan(np.zeros((0, 3)), 0.1, 3)) == 0
    # min_pts = 1: chaque point isolé forme son propre cluster
    pts = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    assert list(dbscan(pts, 0.5, 1)) == [0, 1]
    assert list(dbscan(pts, 0.5, 2)) == [-1, -1]
    with pytest.raises(ValueError):
        dbscan(pts, 0.0, 2)
    with pytest.raises(ValueError):
        dbscan(pts, 0.1, 0)


def test_compute_centers_means():
    shifted = np.array([[0.0, 0, 0], [2.0, 0, 0], [5.0, 5, 5], [9.0, 9, 9]])
    centers = compute_centers(shifted, np.array([0, 0, 1, -1]))
    assert len(centers) == 2
    assert np.allclose(centers.centers, [[1.0, 0, 0], [5.0, 5, 5]])
    assert [list(m) for m in centers.members] == [[0, 1], [2]]


def test_shift_and_filter_threshold_is_strict():
    cloud = PointCloud(np.zeros((3, 3)))
    offsets = OffsetField(np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]]))
    shifted, survivors = shift_and_filter(cloud, offsets, MaskScores(np.array([0.5, 0.51, 1.0])), 0.5)
    assert list(survivors) == [1, 2]
    assert np.allclose(shifted[:, 0], [2.0, 3.0])
    with pytest.raises(ValueError):
        shift_and_filter(cloud, offsets, MaskScores(np.ones(2)))


def test_mask_scores_range():
    with pytest.raises(ValueError):
        MaskScores(np.array([1.5]))


def test_generate_proposals_sorted_and_capped(rng):
    pts = rng.uniform(0, 10, size=(10000, 3))
    scene = PointCloud(pts)
    centers = CenterSet(np.array([[8.0, 5, 5], [2.0, 5, 5], [5.0, 5, 5]]))
    proposals = generate_proposals(scene, centers, model_radius=1.0, scale=1.5, max_points=50, seed=4)
    assert [p.id for p in proposals] == [0, 1, 2]
    assert [p.center[0] for p in proposals] == [2.0, 5.0, 8.0]
    for p in proposals:
        assert len(p) == 50
        assert np.all(np.linalg.norm(pts[p.indices] - p.center, axis=1) <= 1.5)
        assert np.array_equal(p.cloud.points, pts[p.indices])
    again = generate_proposals(scene, centers, 1.0, 1.5, 50, seed=4)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(proposals, again))


def test_generate_proposals_skips_empty(caplog):
    scene = PointCloud(np.zeros((10, 3)))
    centers = CenterSet(np.array([[0.0, 0, 0], [100.0, 0, 0]]))
    with caplog.at_level(logging.WARNING, logger='focusing'):
        proposals = generate_proposals(scene, centers, 1.0)
    assert len(proposals) == 1
    assert 'vide' in caplog.text


def test_perceptron_width_checks(rng):
    heads = random_focus_heads(8, 4, seed=0)
    with pytest.raises(ValueError):
        heads.offset.forward(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        Perceptron(((np.zeros((3, 4)), np.zeros(2)),))

    fm = FeatureMap(rng.normal(size=(6, 8)))
    geo = geodesic_embedding(rng.uniform(size=6), 4, 1.0)
    assert predict_offsets(fm, heads).vectors.shape == (6, 3)
    scores = predict_point_mask(fm, geo, heads).scores
    assert np.all((scores >= 0) & (scores <= 1))


def test_focus_heads_file(tmp_path, rng):
    heads = random_focus_heads(8, 4, seed=2)
    path = tmp_path / 'heads.npz'
    save_focus_heads(path, heads)
    loaded = load_focus_heads(path)
    x = rng.normal(size=(3, 8))
    assert np.array_equal(loaded.offset.forward(x), heads.offset.forward(x))
    assert loaded.attention.n_layers == heads.attention.n_layers


def test_oracle_focus_points_at_visible_centroids(room_scene):
    scene, truth = room_scene
    sampled, _ = voxel_downsample(scene, 2 * VOXEL)
    offsets, mask = oracle_focus(sampled, truth.centroids)
    fg = sampled.labels >= 0
    assert np.all(mask.scores[fg] == 1.0) and np.all(mask.scores[~fg] == 0.0)
    assert np.allclose((sampled.points + offsets.vectors)[fg], truth.centroids[sampled.labels[fg]])


def test_oracle_pipeline_detects_every_center(chair, room_scene):
    """Centres détectés = centroïdes visibles (MR = MP = 1, RMSE ≤ 1e-6 m)."""
    scene, truth = room_scene
    result = MultiObjectFocuser(chair, VOXEL, FocusParams(mode='oracle')).process(scene, truth.centroids)
    assert len(result.proposals) == len(truth)
    cm = center_metrics(np.array([p.center for p in result.proposals]), truth, 0.1)
    assert cm.mr == 1.0 and cm.mp == 1.0
    assert cm.rmse <= 1e-6
    assert not result.diagnostics


def test_gt_centers_mode(chair, room_scene):
    scene, truth = room_scene
    proposals = focus_pipeline(scene, chair, None, VOXEL, FocusParams(mode='gt-centers'),
                               instance_centroids=truth.centroids)
    assert len(proposals) == len(truth)
    for p in proposals:
        assert np.min(np.linalg.norm(truth.centroids - p.center, axis=1)) == 0.0


def test_oracle_mode_requires_manifest(chair, room_scene):
    scene, _ = room_scene
    with pytest.raises(ValueError):
        MultiObjectFocuser(chair, VOXEL, FocusParams(mode='oracle')).process(scene)


def test_heads_mode_is_deterministic(chair, room_scene):
    scene, truth = room_scene
    config = DescriptorProviderConfig(kind='covariance', D=8)
    params = FocusParams(mode='heads')
    first = focus_pipeline(scene, chair, config, VOXEL, params, gt_poses=truth.poses, seed=11)
    second = focus_pipeline(scene, chair, config, VOXEL, params, gt_poses=truth.poses, seed=11)
    assert [p.center.tolist() for p in first] == [p.center.tolist() for p in second]
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(first, second))


def test_heads_mode_needs_provider(chair, room_scene):
    scene, _ = room_scene
    focuser = MultiObjectFocuser(chair, VOXEL, FocusParams(mode='heads'))
    with pytest.raises(ValueError):
        focuser.process(scene)


def test_empty_scene_yields_no_proposal(chair):
    provider = make_provider(DescriptorProviderConfig(kind='covariance'), default_radius=0.1)
    focuser = MultiObjectFocuser(chair, VOXEL, FocusParams(mode='heads'), provider, random_focus_heads(32, 16))
    result = focuser.process(PointCloud(np.zeros((0, 3))))
    assert result.proposals == []
    assert result.diagnostics


def test_save_proposals(tmp_path, chair, room_scene):
    scene, truth = room_scene
    proposals = MultiObjectFocuser(chair, VOXEL, FocusParams(mode='oracle')).process(scene, truth.centroids).proposals
    index_path = save_proposals(tmp_path, 'scene_0000', proposals)
    index = json.loads(index_path.read_text())
    assert [e['id'] for e in index['proposals']] == [p.id for p in proposals]
    first = index['proposals'][0]
    assert first['count'] == len(proposals[0])
    assert np.array_equal(read_ply(tmp_path / first['ply']).points, proposals[0].cloud.points)


def test_heads_see_cross_attended_features(chair, room_scene):
    scene, _ = room_scene
    sampled, _ = voxel_downsample(scene, 2 * VOXEL)
    provider = make_provider(DescriptorProviderConfig(kind='covariance', D=8), default_radius=4 * VOXEL)
    full = random_focus_heads(8, 16, seed=5)
    bare = FocusHeads(full.offset, full.mask, None)
    focuser = MultiObjectFocuser(chair, VOXEL, FocusParams(mode='heads'), provider, bare, seed=9)

    offsets, _ = focuser.predict(sampled)
    scene_fm, model_fm = provider.features(sampled, chair)
    weights = random_attention_weights(8, FOCUS_ATTENTION_LAYERS, derive_seed(9, 'focus-attention'))
    attended = cross_attention_stack(scene_fm, model_fm, weights)
    assert np.allclose(offsets.vectors, predict_offsets(attended, bare).vectors)
    assert not np.allclose(offsets.vectors, predict_offsets(scene_fm, bare).vectors)
    assert focuser.attention(8).n_layers == 3

    loaded = MultiObjectFocuser(chair, VOXEL, FocusParams(mode='heads'), provider, full)
    assert loaded.attention(8) is full.attention


def test_dbscan_invariant_under_permutation(rng):
    """Points cœurs et bruit ne dépendent pas de l'ordre; seuls les points frontières partagés peuvent changer."""
    blobs = rng.uniform(-3, 3, size=(4, 3))
    pts = blobs[rng.integers(0, 4, 400)] + rng.normal(0.0, 0.3, size=(400, 3))
    eps, min_pts = 0.35, 5
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    core = (dist <= eps).sum(axis=1) >= min_pts

    labels = dbscan(pts, eps, min_pts)
    for _ in range(5):
        perm = rng.permutation(len(pts))
        relabelled = np.empty_like(labels)
        relabelled[perm] = dbscan(pts[perm], eps, min_pts)
        assert np.array_equal(relabelled < 0, labels < 0)
        assert partition(relabelled[core]) == partition(labels[core])
