#!/usr/bin/env python3
"""
FocusReg - Fonctions de perte (évaluation et vérification uniquement)
Circle loss, L1 d'offset, perte de direction, NLL sur la matrice d'affectation,
BCE + dice, sommes par étape; gradients analytiques et vérification par
différences finies.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


class CircleLossParams(BaseModel):
    """Marges Δ_p < Δ_n et échelle γ."""
    delta_p: float = Field(default=0.1, gt=0.0)
    delta_n: float = Field(default=1.4, gt=0.0)
    gamma: float = Field(default=10.0, gt=0.0)
    clamp_weights: bool = False

    @model_validator(mode='after')
    def _margins_ordered(self):
        if not self.delta_p < self.delta_n:
            raise ValueError(f"Δ_p ({self.delta_p}) doit être < Δ_n ({self.delta_n})")
        return self


@dataclass
class AnchorSets:
    """Ensembles d'une ancre: distances positives + recouvrements, distances négatives."""

    positive: np.ndarray
    overlaps: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=np.float64).reshape(-1)
        self.overlaps = np.asarray(self.overlaps, dtype=np.float64).reshape(-1)
        self.negative = np.asarray(self.negative, dtype=np.float64).reshape(-1)
        if len(self.positive) != len(self.overlaps):
            raise ValueError("Un recouvrement par distance positive est requis")
        if np.any(self.positive < 0) or np.any(self.negative < 0):
            raise ValueError("Distances négatives")
        if np.any(self.overlaps < 0) or np.any(self.overlaps > 1):
            raise ValueError("Recouvrements hors de [0, 1]")


@dataclass
class CircleLossInput:
    anchors: List[AnchorSets]


def _circle_exponents(anchor: AnchorSets, params: CircleLossParams) -> Tuple[np.ndarray, np.ndarray]:
    lam = np.sqrt(anchor.overlaps)
    pos_gap = anchor.positive - params.delta_p
    neg_gap = params.delta_n - anchor.negative
    if params.clamp_weights:
        beta_p = params.gamma * np.maximum(pos_gap, 0.0)
        beta_n = params.gamma * np.maximum(neg_gap, 0.0)
    else:
        beta_p = params.gamma * pos_gap
        beta_n = params.gamma * neg_gap
    return lam * beta_p * pos_gap, beta_n * neg_gap


def circle_loss(data: CircleLossInput, params: Optional[CircleLossParams] = None) -> float:
    """(1/|A|) Σ_i log(1 + Σ_j exp(λ β_p (d − Δ_p)) · Σ_k exp(β_n (Δ_n − d))), en domaine log."""
    params = params or CircleLossParams()
    if not data.anchors:
        raise ValueError("circle_loss: ensemble d'ancres vide")
    total = 0.0
    for anchor in data.anchors:
        if len(anchor.positive) == 0 or len(anchor.negative) == 0:
            continue
        pos, neg = _circle_exponents(anchor, params)
        total += np.logaddexp(0.0, logsumexp(pos) + logsumexp(neg))
    return float(total / len(data.anchors))


def circle_loss_grad(data: CircleLossInput, params: Optional[CircleLossParams] = None
                     ) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Gradient par rapport aux distances (positives, négatives) de chaque ancre."""
    params = params or CircleLossParams()
    if not data.anchors:
        raise ValueError("circle_loss: ensemble d'ancres vide")
    scale = 1.0 / len(data.anchors)
    grads = []
    for anchor in data.anchors:
        g_pos = np.zeros(len(anchor.positive))
        g_neg = np.zeros(len(anchor.negative))
        if len(anchor.positive) and len(anchor.negative):
            pos, neg = _circle_exponents(anchor, params)
            lse_pos, lse_neg = logsumexp(pos), logsumexp(neg)
            outer = scale / (1.0 + np.exp(-(lse_pos + lse_neg)))
            lam = np.sqrt(anchor.overlaps)
            pos_gap = anchor.positive - params.delta_p
            neg_gap = params.delta_n - anchor.negative
            if params.clamp_weights:
                d_pos = 2.0 * lam * params.gamma * np.maximum(pos_gap, 0.0)
                d_neg = -2.0 * params.gamma * np.maximum(neg_gap, 0.0)
            else:
                d_pos = 2.0 * lam * params.gamma * pos_gap
                d_neg = -2.0 * params.gamma * neg_gap
            g_pos = outer * np.exp(pos - lse_pos) * d_pos
            g_neg = outer * np.exp(neg - lse_neg) * d_neg
        grads.append((g_pos, g_neg))
    return grads


def _foreground_residuals(offsets, points, centroids, foreground):
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    foreground = np.asarray(foreground, dtype=bool).reshape(-1)
    if not (len(offsets) == len(points) == len(centroids) == len(foreground)):
        raise ValueError("offsets, points, centroïdes et masque de tailles différentes")
    return offsets, centroids - points, foreground


def offset_l1_loss(offsets, points, centroids, foreground) -> float:
    """Moyenne sur l'avant-plan de ‖o_i − (ĉ_i − p_i)‖."""
    offsets, targets, foreground = _foreground_residuals(offsets, points, centroids, foreground)
    n_fg = int(foreground.sum())
    if n_fg == 0:
        raise ValueError("offset_l1_loss: aucun point d'avant-plan")
    residual = offsets[foreground] - targets[foreground]
    return float(np.linalg.norm(residual, axis=1).sum() / n_fg)


def offset_l1_grad(offsets, points, centroids, foreground) -> np.ndarray:
    offsets, targets, foreground = _foreground_residuals(offsets, points, centroids, foreground)
    n_fg = int(foreground.sum())
    if n_fg == 0:
        raise ValueError("offset_l1_loss: aucun point d'avant-plan")
    grad = np.zeros_like(offsets)
    residual = offsets[foreground] - targets[foreground]
    norms = np.linalg.norm(residual, axis=1, keepdims=True)
    grad[foreground] = np.where(norms > 0, residual / np.where(norms > 0, norms, 1.0), 0.0) / n_fg
    return grad


def direction_loss(offsets, points, centroids, foreground) -> float:
    """−(1/n_fg) Σ cos(o_i, ĉ_i − p_i); un vecteur nul contribue 0 mais reste compté."""
    offsets, targets, foreground = _foreground_residuals(offsets, points, centroids, foreground)
    n_fg = int(foreground.sum())
    if n_fg == 0:
        return 0.0
    o = offsets[foreground]
    t = targets[foreground]
    o_norm = np.linalg.norm(o, axis=1)
    t_norm = np.linalg.norm(t, axis=1)
    live = (o_norm > 0) & (t_norm > 0)
    if not np.all(live):
        logger.warning("direction_loss: %d vecteur(s) de norme nulle comptés pour 0", int((~live).sum()))
    cos = np.zeros(len(o))
    cos[live] = np.sum(o[live] * t[live], axis=1) / (o_norm[live] * t_norm[live])
    return float(-cos.sum() / n_fg)


def direction_grad(offsets, points, centroids, foreground) -> np.ndarray:
    offsets, targets, foreground = _foreground_residuals(offsets, points, centroids, foreground)
    grad = np.zeros_like(offsets)
    n_fg = int(foreground.sum())
    if n_fg == 0:
        return grad
    idx = np.flatnonzero(foreground)
    o = offsets[idx]
    t = targets[idx]
    o_norm = np.linalg.norm(o, axis=1)
    t_norm = np.linalg.norm(t, axis=1)
    live = (o_norm > 0) & (t_norm > 0)
    o_hat = o[live] / o_norm[live, None]
    t_hat = t[live] / t_norm[live, None]
    cos = np.sum(o_hat * t_hat, axis=1, keepdims=True)
    grad[idx[live]] = -(t_hat - cos * o_hat) / o_norm[live, None] / n_fg
    return grad


def _plan_array(plan) -> np.ndarray:
    return np.asarray(getattr(plan, 'plan', plan), dtype=np.float64)


def _required_cells(plan: np.ndarray, gt_pairs, unmatched_rows, unmatched_cols) -> Tuple[np.ndarray, np.ndarray]:
    n, m = plan.shape[0] - 1, plan.shape[1] - 1
    pairs = np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2)
    rows = np.asarray(unmatched_rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(unmatched_cols, dtype=np.int64).reshape(-1)
    if (np.any(pairs < 0) or np.any(pairs[:, 0] >= n) or np.any(pairs[:, 1] >= m)
            or np.any(rows < 0) or np.any(rows >= n) or np.any(cols < 0) or np.any(cols >= m)):
        raise ValueError(f"Indices de vérité terrain incompatibles avec un plan {plan.shape}")
    cell_rows = np.concatenate([pairs[:, 0], rows, np.full(len(cols), n)])
    cell_cols = np.concatenate([pairs[:, 1], np.full(len(rows), m), cols])
    return cell_rows, cell_cols


def nll_matching_loss(plan, gt_pairs, unmatched_rows=(), unmatched_cols=()) -> float:
    """Une paire de patches: −Σ log z̄ sur les paires vraies, les lignes non appariées (dustbin)
    et les colonnes non appariées. Somme, non normalisée; voir nll_matching_loss_batch."""
    plan = _plan_array(plan)
    if np.any(plan < 0) or np.any(plan > 1 + 1e-9):
        raise ValueError("Le plan doit avoir ses entrées dans [0, 1]")
    cell_rows, cell_cols = _required_cells(plan, gt_pairs, unmatched_rows, unmatched_cols)
    values = plan[cell_rows, cell_cols]
    if np.any(values == 0):
        logger.warning("nll_matching_loss: masse nulle sur %d cellule(s) requise(s)", int((values == 0).sum()))
        return float('inf')
    return float(-np.log(values).sum())


def nll_matching_grad(plan, gt_pairs, unmatched_rows=(), unmatched_cols=()) -> np.ndarray:
    plan = _plan_array(plan)
    cell_rows, cell_cols = _required_cells(plan, gt_pairs, unmatched_rows, unmatched_cols)
    grad = np.zeros_like(plan)
    np.add.at(grad, (cell_rows, cell_cols), -1.0 / plan[cell_rows, cell_cols])
    return grad


def nll_matching_loss_batch(items: Sequence[Tuple]) -> float:
    """Moyenne sur les correspondances de patches vraies: items = (plan, paires, lignes, colonnes)."""
    if not items:
        raise ValueError("nll_matching_loss_batch: lot vide")
    return float(np.mean([nll_matching_loss(*item) for item in items]))


def mask_loss(pred, gt, standard_dice: bool = False) -> float:
    """BCE(m, m_gt) + 1 − 2(m·m_gt + 1)/(|m| + |m_gt| + 1).

    standard_dice=True utilise 1 − (2 m·m_gt + 1)/(|m| + |m_gt| + 1), nul à la perfection.
    """
    m = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if len(m) != len(g):
        raise ValueError("Masque prédit et vérité de tailles différentes")
    if np.any((g != 0) & (g != 1)):
        raise ValueError("La vérité terrain du masque doit être binaire")
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("Scores de masque hors de [0, 1]")
    if len(m):
        bce = -np.mean(g * np.log(np.maximum(m, LOG_CLAMP)) + (1 - g) * np.log(np.maximum(1 - m, LOG_CLAMP)))
    else:
        bce = 0.0
    intersection = float(np.dot(m, g))
    denominator = m.sum() + g.sum() + 1.0
    if standard_dice:
        dice = 1.0 - (2.0 * intersection + 1.0) / denominator
    else:
        dice = 1.0 - 2.0 * (intersection + 1.0) / denominator
    return float(bce + dice)


def mask_loss_batch(pairs: Sequence[Tuple], standard_dice: bool = False) -> float:
    if not pairs:
        raise ValueError("mask_loss_batch: lot vide")
    return float(np.mean([mask_loss(m, g, standard_dice) for m, g in pairs]))


@dataclass
class LossComponents:
    circle_focusing: float = 0.0
    offset_l1: float = 0.0
    direction: float = 0.0
    circle_matching: float = 0.0
    nll: float = 0.0
    overlap_mask: float = 0.0
    instance_mask: float = 0.0


def total_losses(components: LossComponents) -> Tuple[float, float]:
    """(L_focusing, L_matching), sommes non pondérées."""
    values = vars(components)
    bad = [name for name, value in values.items() if not np.isfinite(value)]
    if bad:
        raise ValueError(f"Composantes non finies: {', '.join(bad)}")
    focusing = components.circle_focusing + components.offset_l1 + components.direction
    matching = components.circle_matching + components.nll + components.overlap_mask + components.instance_mask
    return float(focusing), float(matching)


# ---------------------------------------------------------------------------
# Vérification des gradients
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    non_smooth: bool
    method: str
    details: List[str] = field(default_factory=list)


def _central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        step = np.zeros(x.size)
        step[i] = h
        step = step.reshape(x.shape)
        flat[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad


def _relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def grad_check(fn: Callable[[np.ndarray], float], x, h: float = 1e-5, tolerance: float = 1e-4,
               analytic: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> GradCheckReport:
    """Différences centrées contre le gradient analytique, sinon cohérence entre les pas h et h/2.

    Un point non lisse (désaccord entre h et h/2 bien au-delà de l'erreur de troncature) est
    signalé, pas compté comme échec.
    """
    x = np.asarray(x, dtype=np.float64)
    g_h = _central_difference(fn, x, h)
    g_half = _central_difference(fn, x, h / 2.0)
    richardson = _relative_error(g_h, g_half)
    non_smooth = not np.all(np.isfinite(g_h)) or richardson > max(tolerance, 1e-2)

    if analytic is not None:
        reference = np.asarray(analytic(x), dtype=np.float64).reshape(x.shape)
        estimate = (4.0 * g_half - g_h) / 3.0
        err = _relative_error(estimate, reference)
        method = 'analytique'
    else:
        err = richardson
        method = 'richardson'
    details = []
    if non_smooth:
        details.append(f"point non lisse: écart h/(h/2) = {richardson:.3g}")
    return GradCheckReport(err, non_smooth or err < tolerance, non_smooth, method, details)


# ---------------------------------------------------------------------------
# Suite de cas construits (sous-commande check-losses)
# ---------------------------------------------------------------------------

@dataclass
class LossCheckRow:
    name: str
    value: float
    expected: float
    grad_err: Optional[float]
    passed: bool
    note: str = ''

    def as_dict(self) -> dict:
        return {
            'name': self.name,
            'value': self.value,
            'expected': self.expected,
            'grad_err': self.grad_err,
            'passed': self.passed,
            'note': self.note,
        }


def _close(value: float, expected: float, rel: float = 1e-9) -> bool:
    if np.isinf(expected):
        return value == expected
    return abs(value - expected) <= rel * max(1.0, abs(expected))


def run_loss_checks(params: Optional[CircleLossParams] = None, seed: int = 0) -> List[LossCheckRow]:
    """Valeurs analytiques des cas construits et vérifications de gradient."""
    params = params or CircleLossParams()
    rng = np.random.default_rng(seed)
    rows: List[LossCheckRow] = []

    def add(name, value, expected, grad_err=None, note='', grad_ok=True):
        rows.append(LossCheckRow(name, float(value), float(expected), grad_err,
                                 _close(value, expected) and grad_ok, note))

    # circle loss
    empty_neg = CircleLossInput([AnchorSets([0.3, 0.5], [1.0, 0.5], [])])
    add('circle: négatifs vides', circle_loss(empty_neg, params), 0.0)
    hand = CircleLossInput([AnchorSets([params.delta_p], [1.0], [params.delta_n])])
    add('circle: Δ_p / Δ_n exacts', circle_loss(hand, params), np.log(2.0))

    generic = CircleLossInput([
        AnchorSets(rng.uniform(0.2, 0.8, 4), rng.uniform(0.1, 1.0, 4), rng.uniform(0.5, 1.2, 5))
        for _ in range(3)
    ])
    sizes = [(len(a.positive), len(a.negative)) for a in generic.anchors]

    def unpack(x):
        anchors, offset = [], 0
        for original, (n_pos, n_neg) in zip(generic.anchors, sizes):
            pos = x[offset:offset + n_pos]
            neg = x[offset + n_pos:offset + n_pos + n_neg]
            anchors.append(AnchorSets(pos, original.overlaps, neg))
            offset += n_pos + n_neg
        return CircleLossInput(anchors)

    x0 = np.concatenate([np.concatenate([a.positive, a.negative]) for a in generic.anchors])
    report = grad_check(
        lambda x: circle_loss(unpack(x), params), x0,
        analytic=lambda x: np.concatenate([np.concatenate(g) for g in circle_loss_grad(unpack(x), params)]),
    )
    rows.append(LossCheckRow('circle: gradient', circle_loss(generic, params), circle_loss(generic, params),
                             report.max_rel_err, report.passed and not report.non_smooth))

    # L1 d'offset et direction
    points = rng.normal(size=(6, 3))
    centroids = points + rng.normal(size=(6, 3))
    foreground = np.array([True, True, False, True, True, True])
    add('offset L1: offsets exacts', offset_l1_loss(centroids - points, points, centroids, foreground), 0.0)
    add('offset L1: erreur (3,4,0)', offset_l1_loss([[3.0, 4.0, 0.0]], [[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], [True]), 5.0)
    offsets = centroids - points + rng.normal(scale=0.3, size=(6, 3))
    report = grad_check(lambda o: offset_l1_loss(o.reshape(-1, 3), points, centroids, foreground), offsets,
                        analytic=lambda o: offset_l1_grad(o.reshape(-1, 3), points, centroids, foreground))
    rows.append(LossCheckRow('offset L1: gradient', offset_l1_loss(offsets, points, centroids, foreground),
                             offset_l1_loss(offsets, points, centroids, foreground), report.max_rel_err,
                             report.passed and not report.non_smooth))

    add('direction: parallèles', direction_loss(2.0 * (centroids - points), points, centroids, foreground), -1.0)
    add('direction: opposés', direction_loss(-(centroids - points), points, centroids, foreground), 1.0)
    report = grad_check(lambda o: direction_loss(o.reshape(-1, 3), points, centroids, foreground), offsets,
                        analytic=lambda o: direction_grad(o.reshape(-1, 3), points, centroids, foreground))
    rows.append(LossCheckRow('direction: gradient', direction_loss(offsets, points, centroids, foreground),
                             direction_loss(offsets, points, centroids, foreground), report.max_rel_err,
                             report.passed and not report.non_smooth))
    near_zero = np.zeros((1, 3)) + 1e-7
    report = grad_check(lambda o: direction_loss(o.reshape(-1, 3), [[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], [True]),
                        near_zero)
    rows.append(LossCheckRow('direction: offset quasi nul', 0.0, 0.0, report.max_rel_err,
                             report.non_smooth, 'signalé non lisse' if report.non_smooth else 'non signalé'))

    # NLL
    add('nll: masse 1 partout', nll_matching_loss(np.array([[1.0, 0.0], [0.0, 1.0]]), [(0, 0)], [], []), 0.0)
    add('nll: z = 0.5', nll_matching_loss(np.array([[0.5, 0.5], [0.5, 0.5]]), [(0, 0)]), np.log(2.0))
    plan = rng.uniform(0.05, 0.95, size=(4, 5))
    pairs, unmatched_rows, unmatched_cols = [(0, 1), (1, 0), (2, 3)], [], [2]
    report = grad_check(lambda z: nll_matching_loss(z.reshape(4, 5), pairs, unmatched_rows, unmatched_cols), plan,
                        h=1e-7,
                        analytic=lambda z: nll_matching_grad(z.reshape(4, 5), pairs, unmatched_rows, unmatched_cols))
    value = nll_matching_loss(plan, pairs, unmatched_rows, unmatched_cols)
    rows.append(LossCheckRow('nll: gradient', value, value, report.max_rel_err, report.passed and not report.non_smooth))

    # masque (BCE + dice tel qu'écrit)
    add('masque: s=0 parfait', mask_loss(np.zeros(4), np.zeros(4)), -1.0)
    add('masque: s=3 parfait', mask_loss(np.ones(3), np.ones(3)), -1.0 / 7.0)
    add('masque: dice standard parfait', mask_loss(np.ones(3), np.ones(3), standard_dice=True), 0.0)

    # sommes
    focusing, matching = total_losses(LossComponents(1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0))
    add('total: L_focusing', focusing, 6.0)
    add('total: L_matching', matching, 10.0)
    return rows
