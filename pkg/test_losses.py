#!/usr/bin/env python3
"""
Tests des fonctions de perte et de la suite check-losses
"""

import itertools
import logging

import numpy as np
import pytest
from pydantic import ValidationError

from losses import (
    AnchorSets,
    CircleLossInput,
    CircleLossParams,
    LossComponents,
    circle_loss,
    circle_loss_grad,
    direction_loss,
    grad_check,
    mask_loss,
    mask_loss_batch,
    nll_matching_loss,
    nll_matching_loss_batch,
    offset_l1_loss,
    run_loss_checks,
    total_losses,
)


def direct_circle_loss(anchors, p):
    """Forme directe sans logsumexp."""
    total = 0.0
    for a in anchors:
        if len(a.positive) == 0 or len(a.negative) == 0:
            continue
        lam = np.sqrt(a.overlaps)
        s_pos = sum(np.exp(l * p.gamma * (d - p.delta_p) ** 2) for l, d in zip(lam, a.positive))
        s_neg = sum(np.exp(p.gamma * (p.delta_n - d) ** 2) for d in a.negative)
        total += np.log(1.0 + s_pos * s_neg)
    return total / len(anchors)


def test_circle_loss_matches_direct_form(rng):
    params = CircleLossParams()
    anchors = [AnchorSets(rng.uniform(0, 1, 3), rng.uniform(0, 1, 3), rng.uniform(0, 2, 4)) for _ in range(5)]
    assert circle_loss(CircleLossInput(anchors), params) == pytest.approx(direct_circle_loss(anchors, params), rel=1e-12)


def test_circle_loss_constructed_cases():
    params = CircleLossParams()
    assert circle_loss(CircleLossInput([AnchorSets([0.4], [1.0], [])]), params) == 0.0
    exact = CircleLossInput([AnchorSets([0.1], [1.0], [1.4])])
    assert circle_loss(exact, params) == pytest.approx(np.log(2.0), rel=1e-12)
    # un λ nul neutralise la distance positive
    zero_overlap = CircleLossInput([AnchorSets([5.0], [0.0], [1.4])])
    assert circle_loss(zero_overlap, params) == pytest.approx(np.log(2.0), rel=1e-12)


def test_circle_loss_validation():
    with pytest.raises(ValueError):
        circle_loss(CircleLossInput([]))
    with pytest.raises(ValueError):
        AnchorSets([0.1, 0.2], [1.0], [0.5])
    with pytest.raises(ValueError):
        AnchorSets([0.1], [1.5], [0.5])
    with pytest.raises(ValidationError):
        CircleLossParams(gamma=0.0)
    with pytest.raises(ValidationError):
        CircleLossParams(delta_p=1.5, delta_n=1.4)


def test_circle_loss_gradient(rng):
    params = CircleLossParams()
    anchor = AnchorSets(rng.uniform(0.2, 0.8, 3), rng.uniform(0.1, 1.0, 3), rng.uniform(0.5, 1.2, 4))

    def fn(x):
        return circle_loss(CircleLossInput([AnchorSets(x[:3], anchor.overlaps, x[3:])]), params)

    def grad(x):
        g_pos, g_neg = circle_loss_grad(CircleLossInput([AnchorSets(x[:3], anchor.overlaps, x[3:])]), params)[0]
        return np.concatenate([g_pos, g_neg])

    report = grad_check(fn, np.concatenate([anchor.positive, anchor.negative]), analytic=grad)
    assert report.passed and not report.non_smooth
    assert report.max_rel_err < 1e-4


def test_clamped_circle_weights_differ_below_margin():
    anchor = CircleLossInput([AnchorSets([0.05], [1.0], [1.0])])
    free = circle_loss(anchor, CircleLossParams())
    clamped = circle_loss(anchor, CircleLossParams(clamp_weights=True))
    assert clamped < free


def test_offset_losses():
    assert offset_l1_loss([[3.0, 4.0, 0.0]], [[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], [True]) == 5.0
    # l'arrière-plan est ignoré
    assert offset_l1_loss([[3.0, 4.0, 0.0], [1.0, 0, 0]], np.zeros((2, 3)), [[3.0, 4.0, 0.0], [0, 0, 0]],
                          [True, False]) == 0.0
    with pytest.raises(ValueError):
        offset_l1_loss([[1.0, 0, 0]], [[0.0, 0, 0]], [[0.0, 0, 0]], [False])


def test_direction_loss_zero_norm_counts(caplog):
    offsets = [[1.0, 0, 0], [0.0, 0, 0]]
    with caplog.at_level(logging.WARNING, logger='losses'):
        value = direction_loss(offsets, np.zeros((2, 3)), [[2.0, 0, 0], [1.0, 0, 0]], [True, True])
    assert value == -0.5
    assert 'norme nulle' in caplog.text
    assert direction_loss(offsets, np.zeros((2, 3)), np.ones((2, 3)), [False, False]) == 0.0


def test_nll_matching_loss(caplog):
    plan = np.array([[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [0.4, 0.1, 0.0]])
    expected = -(np.log(0.5) + np.log(0.1) + np.log(0.1))
    assert nll_matching_loss(plan, [(0, 0)], unmatched_rows=[1], unmatched_cols=[1]) == pytest.approx(expected)
    with caplog.at_level(logging.WARNING, logger='losses'):
        assert nll_matching_loss(plan, [(0, 0)], unmatched_rows=[], unmatched_cols=[]) == pytest.approx(-np.log(0.5))
        assert nll_matching_loss(np.array([[0.0, 1.0], [1.0, 0.0]]), [(0, 0)]) == np.inf
    assert 'masse nulle' in caplog.text
    with pytest.raises(ValueError):
        nll_matching_loss(plan, [(2, 0)])
    with pytest.raises(ValueError):
        nll_matching_loss(plan * 3, [(0, 0)])
    assert nll_matching_loss_batch([(plan, [(0, 0)], [], []), (plan, [(1, 1)], [], [])]) == pytest.approx(
        (-np.log(0.5) - np.log(0.8)) / 2)


def test_mask_loss_verbatim_values():
    assert mask_loss(np.zeros(4), np.zeros(4)) == -1.0
    assert mask_loss(np.ones(3), np.ones(3)) == pytest.approx(-1.0 / 7.0, rel=1e-12)
    assert mask_loss(np.ones(3), np.ones(3), standard_dice=True) == 0.0
    assert mask_loss_batch([(np.zeros(2), np.zeros(2)), (np.ones(3), np.ones(3))]) == pytest.approx(
        (-1.0 - 1.0 / 7.0) / 2)


def test_mask_loss_worst_case_is_finite():
    value = mask_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert np.isfinite(value)
    assert value == pytest.approx(-np.log(1e-12) + 1.0 - 2.0 / 3.0)
    with pytest.raises(ValueError):
        mask_loss(np.array([0.5]), np.array([0.5]))


def test_total_losses():
    assert total_losses(LossComponents(1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0)) == (6.0, 10.0)
    with pytest.raises(ValueError, match='nll'):
        total_losses(LossComponents(nll=np.inf))


def test_grad_check_flags_non_smooth_point():
    report = grad_check(lambda x: float(np.abs(x).sum()), np.array([0.0, 1.0]))
    assert report.non_smooth
    assert report.passed


def test_grad_check_detects_wrong_gradient():
    report = grad_check(lambda x: float((x ** 2).sum()), np.array([1.0, 2.0]), analytic=lambda x: x)
    assert not report.passed


def test_run_loss_checks_all_pass():
    rows = run_loss_checks()
    failed = [r.name for r in rows if not r.passed]
    assert not failed
    names = {r.name for r in rows}
    assert 'masque: s=3 parfait' in names
    assert 'direction: offset quasi nul' in names
    assert all(set(r.as_dict()) == {'name', 'value', 'expected', 'grad_err', 'passed', 'note'} for r in rows)


def test_run_loss_checks_other_margins():
    rows = run_loss_checks(CircleLossParams(delta_p=0.2, delta_n=1.0, gamma=5.0, clamp_weights=True), seed=4)
    assert all(r.passed for r in rows)


def test_circle_loss_grows_with_positive_distance():
    distances = np.linspace(0.1, 2.0, 20)

    def loss_at(d, clamp):
        anchor = AnchorSets(positive=[d], overlaps=[1.0], negative=[1.0])
        return circle_loss(CircleLossInput([anchor]), CircleLossParams(clamp_weights=clamp))

    verbatim = [loss_at(d, False) for d in distances]
    assert all(b > a for a, b in zip(verbatim, verbatim[1:]))
    clamped = [loss_at(d, True) for d in np.linspace(0.0, 2.0, 30)]
    assert all(b >= a for a, b in zip(clamped, clamped[1:]))


def test_nll_decreases_as_mass_moves_to_true_cells():
    """Plan 2×2 (+ dustbins), paires vraies sur la diagonale, lignes renormalisées."""
    def plan(t):
        rest = (1.0 - t) / 2.0
        return np.array([[t, rest, rest], [rest, t, rest], [rest, rest, 0.0]])

    values = [nll_matching_loss(plan(t), [(0, 0), (1, 1)]) for t in np.linspace(0.05, 1.0, 20)]
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] == 0.0


@pytest.mark.parametrize('standard_dice', [False, True])
def test_mask_loss_minimum_at_ground_truth(standard_dice):
    gt = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    grid = itertools.product(np.linspace(0.0, 1.0, 5), repeat=len(gt))
    best = min(grid, key=lambda m: mask_loss(np.array(m), gt, standard_dice))
    assert np.array_equal(best, gt)
