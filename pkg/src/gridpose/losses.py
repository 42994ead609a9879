"""Multi-task grid losses and their analytic gradients.

The per-image loss is a sum over the S*S cells,

    sum_i  l1 * (p_i - p^_i)^2
         + [ l2 * (v_i - v^_i)^2 + l3 * (L_pos + l4 * L_ori) ] * p_i

with l3 = 8 * v_i^3 a function of the ground-truth visibility, so poorly
visible objects contribute little pose error. The probability channel is
supervised everywhere; everything else only at occupied cells (p_i = 1).

Two orientation losses are available: ``ori1`` is the squared distance of the
normalized bounded angles (l4 defaults to 1), ``ori2`` is the unsquared
Euclidean distance between the predicted orientation representative and the
closest ground-truth one (l4 defaults to 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    ObjectModel,
    Pose,
    Symmetry,
    angle_ranges,
    euler_to_matrix,
    orientation_representatives,
    rotation_with_derivatives,
)
from .gridcodec import CH_A1, CH_P, CH_V, CH_X, GridTensor, channel_count

DEFAULT_LAMBDA4 = {"ori1": 1.0, "ori2": 0.5}
_ZERO_NORM_EPS = 1e-12


def visibility_weight(v: float) -> float:
    """Pose-term weight l3 = 8 * v^3."""
    return 8.0 * v**3


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.25
    lambda4: float | None = None  # per-variant default when None

    def resolved_lambda4(self, variant: str) -> float:
        if self.lambda4 is not None:
            return self.lambda4
        if variant not in DEFAULT_LAMBDA4:
            raise ValueError(f"unknown orientation variant {variant!r}")
        return DEFAULT_LAMBDA4[variant]


@dataclass(frozen=True)
class CellTarget:
    """Ground-truth cell vector; a3 is None for revolution objects."""

    p: float
    v: float
    x: float
    y: float
    z: float
    a1: float
    a2: float
    a3: float | None = None


@dataclass(frozen=True)
class CellPrediction:
    """Network cell outputs, all in the open sigmoid range (0, 1)."""

    p: float
    v: float
    x: float
    y: float
    z: float
    a1: float
    a2: float
    a3: float | None = None


def _angle_vector(cell, symmetry: Symmetry) -> np.ndarray:
    if symmetry.is_revolution:
        return np.array([cell.a1, cell.a2])
    if cell.a3 is None:
        raise ValueError("a3 required unless the object has revolution symmetry")
    return np.array([cell.a1, cell.a2, cell.a3])


def loss_pos(target: CellTarget, pred: CellPrediction) -> float:
    """Squared Euclidean distance of the normalized positions."""
    if target.p != 1.0:
        raise ValueError("position loss is only defined at occupied cells")
    d = np.array([target.x - pred.x, target.y - pred.y, target.z - pred.z])
    return float(d @ d)


def loss_ori1(target: CellTarget, pred: CellPrediction, symmetry: Symmetry) -> float:
    """Squared Euclidean distance of the normalized bounded angles."""
    d = _angle_vector(target, symmetry) - _angle_vector(pred, symmetry)
    return float(d @ d)


def _pred_orientation(angles_norm: np.ndarray, obj: ObjectModel):
    """Predicted orientation representative and its derivative rows."""
    ranges = angle_ranges(obj.symmetry)
    phis = angles_norm * ranges
    if obj.symmetry.is_revolution:
        phis = np.append(phis, 0.0)
    rot, derivs = rotation_with_derivatives(phis)
    lam = obj.rep_scale
    if obj.symmetry.is_revolution:
        part = lam * rot[:, 2]
        dpart = [lam * derivs[m][:, 2] * ranges[m] for m in range(2)]
    else:
        part = lam * rot.T.ravel()
        dpart = [lam * derivs[m].T.ravel() * ranges[m] for m in range(3)]
    return part, dpart


def _ori2_from_angles(gt_parts: np.ndarray, angles_norm: np.ndarray, obj: ObjectModel):
    """min_j || g(angles) - gt_j || with its gradient w.r.t. the angles."""
    part, dpart = _pred_orientation(angles_norm, obj)
    diffs = part[None, :] - gt_parts
    norms = np.linalg.norm(diffs, axis=1)
    j = int(np.argmin(norms))  # first minimum: lowest symmetry index on ties
    value = float(norms[j])
    grad = np.zeros(len(angles_norm))
    if value > _ZERO_NORM_EPS:
        unit = diffs[j] / value
        for m in range(len(angles_norm)):
            grad[m] = unit @ dpart[m]
    return value, grad


def loss_ori2(target_pose: Pose, pred: CellPrediction, obj: ObjectModel) -> float:
    """Distance of the predicted orientation to the closest ground-truth
    representative (translation excluded, unsquared)."""
    gt_parts = orientation_representatives(target_pose.rotation, obj)
    value, _ = _ori2_from_angles(gt_parts, _angle_vector(pred, obj.symmetry), obj)
    return value


def _validate_tensors(targets: GridTensor, preds: GridTensor, obj: ObjectModel) -> None:
    if targets.values.shape != preds.values.shape:
        raise ValueError(
            f"target shape {targets.values.shape} != prediction shape {preds.values.shape}"
        )
    if targets.channels != channel_count(obj.symmetry):
        raise ValueError(
            f"tensors have {targets.channels} channels, object {obj.object_id!r} "
            f"needs {channel_count(obj.symmetry)}"
        )


def total_loss_with_grad(
    targets: GridTensor,
    preds: GridTensor,
    weights: LossWeights,
    variant: str,
    obj: ObjectModel,
) -> tuple[float, GridTensor]:
    """Loss value plus analytic gradient w.r.t. every prediction channel.

    Gradients of the non-probability channels are zero at empty cells
    (selective backpropagation); at an ori2 minimum tie the subgradient of
    the lowest-index minimizer is used.
    """
    _validate_tensors(targets, preds, obj)
    lam4 = weights.resolved_lambda4(variant)
    tv, pv = targets.values, preds.values
    p, v = tv[..., CH_P], tv[..., CH_V]

    grad = np.zeros_like(pv)
    loss = weights.lambda1 * float(((p - pv[..., CH_P]) ** 2).sum())
    grad[..., CH_P] = 2.0 * weights.lambda1 * (pv[..., CH_P] - p)

    lam3 = 8.0 * v**3
    dv = pv[..., CH_V] - v
    loss += float((p * weights.lambda2 * dv**2).sum())
    grad[..., CH_V] = p * 2.0 * weights.lambda2 * dv

    dpos = pv[..., CH_X : CH_X + 3] - tv[..., CH_X : CH_X + 3]
    loss += float((p * lam3 * (dpos**2).sum(axis=-1)).sum())
    grad[..., CH_X : CH_X + 3] = (p * lam3)[..., None] * 2.0 * dpos

    if variant == "ori1":
        dang = pv[..., CH_A1 :] - tv[..., CH_A1 :]
        loss += float((p * lam3 * lam4 * (dang**2).sum(axis=-1)).sum())
        grad[..., CH_A1 :] = (p * lam3 * lam4)[..., None] * 2.0 * dang
    elif variant == "ori2":
        ranges = angle_ranges(obj.symmetry)
        for i, j in zip(*np.nonzero(p)):
            phis = tv[i, j, CH_A1 :] * ranges
            if obj.symmetry.is_revolution:
                phis = np.append(phis, 0.0)
            # the rotation rebuilt from bounded angles differs from the
            # original only by a symmetry element, so the set is identical
            gt_parts = orientation_representatives(euler_to_matrix(phis), obj)
            value, g = _ori2_from_angles(gt_parts, pv[i, j, CH_A1 :], obj)
            w = p[i, j] * lam3[i, j] * lam4
            loss += float(w * value)
            grad[i, j, CH_A1 :] = w * g
    else:
        raise ValueError(f"unknown orientation variant {variant!r}")

    return loss, GridTensor(grad)


def total_loss(
    targets: GridTensor,
    preds: GridTensor,
    weights: LossWeights,
    variant: str,
    obj: ObjectModel,
) -> float:
    return total_loss_with_grad(targets, preds, weights, variant, obj)[0]


def total_loss_grad(
    targets: GridTensor,
    preds: GridTensor,
    weights: LossWeights,
    variant: str,
    obj: ObjectModel,
) -> GridTensor:
    return total_loss_with_grad(targets, preds, weights, variant, obj)[1]


@dataclass(frozen=True)
class LossSpec:
    """Bundle of everything the trainer needs to score a prediction."""

    object_model: ObjectModel
    variant: str = "ori1"
    weights: LossWeights = field(default_factory=LossWeights)

    def loss_and_grad(self, target: GridTensor, pred: GridTensor) -> tuple[float, GridTensor]:
        return total_loss_with_grad(target, pred, self.weights, self.variant, self.object_model)
