"""Loss terms, uncertainty estimation and the training schedules.

All losses are pure functions.  Each differentiable loss takes ``grad=True``
to also return analytic gradients with respect to its direct inputs; the
trainer chains those through softmax/tanh into the network backward pass.
Loss values are accumulated in float64 regardless of the network dtype.
"""

import math
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

import numpy as np

from mcseg.errors import InvalidInputError, NumericalError
from mcseg.geometry import inverse_sdf

DICE_EPS = 1e-5


def dice_loss(probs, target, grad: bool = False):
    """Soft Dice loss on softmax probabilities.

    probs: (B, C, *S) softmax maps; target: (B, *S) integer labels.
    Computed on the foreground category for C == 2 and macro-averaged over
    the nonbackground categories otherwise.
    """
    probs = np.asarray(probs)
    target = np.asarray(target)
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise InvalidInputError(f"probs {probs.shape} and target {target.shape} misaligned")
    num_cat = probs.shape[1]
    loss = 0.0
    dprobs = np.zeros_like(probs) if grad else None
    n_fg = num_cat - 1
    for c in range(1, num_cat):
        p = probs[:, c].astype(np.float64, copy=False)
        q = (target == c).astype(np.float64)
        inter = float((p * q).sum())
        num = 2.0 * inter + DICE_EPS
        den = float(p.sum()) + float(q.sum()) + DICE_EPS
        loss += (1.0 - num / den) / n_fg
        if grad:
            # d/dp [1 - (2*sum(pq)+eps)/(sum(p)+sum(q)+eps)]
            dp = -(2.0 * q * den - num) / (den * den) / n_fg
            dprobs[:, c] = dp.astype(probs.dtype)
    return (loss, dprobs) if grad else loss


def ce_loss(scores, target, grad: bool = False):
    """Mean per-voxel cross entropy on pre-softmax scores (log-sum-exp stable)."""
    scores = np.asarray(scores)
    target = np.asarray(target)
    if scores.shape[0] != target.shape[0] or scores.shape[2:] != target.shape[1:]:
        raise InvalidInputError(f"scores {scores.shape} and target {target.shape} misaligned")
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    onehot = _onehot(target, scores.shape[1], scores.dtype)
    n_vox = float(target.size)
    loss = -float((onehot * log_probs).sum(dtype=np.float64)) / n_vox
    if not grad:
        return loss
    probs = np.exp(log_probs)
    dscores = (probs - onehot) / scores.dtype.type(n_vox)
    return loss, dscores


def _onehot(target, num_cat, dtype):
    out = np.zeros((target.shape[0], num_cat) + target.shape[1:], dtype=dtype)
    for c in range(num_cat):
        out[:, c] = target == c
    return out


def dist_loss(dist_pred, gt_sdf, grad: bool = False):
    """Mean squared error between the regression head and the normalized SDF."""
    dist_pred = np.asarray(dist_pred)
    gt_sdf = np.asarray(gt_sdf)
    if dist_pred.shape != gt_sdf.shape:
        raise InvalidInputError(f"dist {dist_pred.shape} and target {gt_sdf.shape} misaligned")
    diff = dist_pred - gt_sdf.astype(dist_pred.dtype, copy=False)
    loss = float((diff * diff).sum(dtype=np.float64)) / diff.size
    if not grad:
        return loss
    return loss, (2.0 / diff.size) * diff


@dataclass
class UncertaintyMap:
    """Per-voxel predictive entropy with its theoretical upper bound."""

    data: np.ndarray
    u_max_bound: float


def predictive_entropy(mean_probs, axis: int = 1) -> UncertaintyMap:
    """Entropy -sum p*ln(p) of averaged softmax probabilities (0*ln 0 := 0)."""
    p = np.asarray(mean_probs, dtype=np.float64)
    num_cat = p.shape[axis]
    safe = np.where(p > 0, p, 1.0)
    u = -(p * np.log(safe)).sum(axis=axis)
    u_max = math.log(num_cat)
    return UncertaintyMap(data=np.clip(u, 0.0, u_max), u_max_bound=u_max)


def certainty_mask(u, u_th: float) -> np.ndarray:
    """Boolean map of voxels whose uncertainty is below the threshold."""
    data = u.data if isinstance(u, UncertaintyMap) else np.asarray(u)
    return data < u_th


def rampup_weight(t: float, t_max: float, w_max: float = 0.1, squared: bool = False) -> float:
    """Gaussian-style consistency ramp-up: w_max * exp(-5 * (1 - t/t_max)).

    ``squared=True`` selects the variant with (1 - t/t_max)^2 in the exponent;
    both share the endpoints and monotonicity.
    """
    if t_max <= 0:
        raise InvalidInputError("t_max must be positive")
    phase = min(max(float(t) / float(t_max), 0.0), 1.0)
    gap = 1.0 - phase
    return w_max * math.exp(-5.0 * (gap * gap if squared else gap))


def threshold_schedule(t: float, t_max: float, num_categories: int) -> float:
    """Uncertainty threshold ramping from (3/4)ln C to ln C over training."""
    ramp = rampup_weight(t, t_max, w_max=1.0)
    return (0.75 + 0.25 * ramp) * math.log(num_categories)


def lr_schedule(t: int, lr0: float = 0.01, decay: float = 0.1, every: int = 2500) -> float:
    """Step-decayed learning rate: lr0 * decay^floor(t / every)."""
    if t < 0:
        raise InvalidInputError("t must be nonnegative")
    return lr0 * decay ** (t // every)


def intra_task_consistency(
    student_seg,
    student_dist,
    teacher_seg,
    teacher_dist,
    mask,
    beta: float,
    grad: bool = False,
):
    """Certainty-masked mean-squared agreement between student and teacher.

    The segmentation and distance terms are weighted beta / (1 - beta); both
    use the same mask (from the teacher's segmentation entropy), each
    normalized by the selected-voxel count.  Teacher arrays are targets only:
    no gradient flows to them.  Returns 0 when the mask selects nothing.
    """
    student_seg = np.asarray(student_seg)
    student_dist = np.asarray(student_dist)
    mask_b = np.asarray(mask, dtype=bool)
    if mask_b.shape != (student_seg.shape[0],) + student_seg.shape[2:]:
        raise InvalidInputError(f"mask shape {mask_b.shape} must be (B, *spatial)")
    m = mask_b[:, None]
    count = float(mask_b.sum())
    if count == 0.0:
        if grad:
            return 0.0, (np.zeros_like(student_seg), np.zeros_like(student_dist))
        return 0.0
    num_cat = student_seg.shape[1]
    seg_diff = student_seg - np.asarray(teacher_seg, dtype=student_seg.dtype)
    dist_diff = student_dist - np.asarray(teacher_dist, dtype=student_dist.dtype)
    seg_term = float(np.where(m, seg_diff * seg_diff, 0).sum(dtype=np.float64)) / (count * num_cat)
    dist_term = float(np.where(m, dist_diff * dist_diff, 0).sum(dtype=np.float64)) / count
    loss = beta * seg_term + (1.0 - beta) * dist_term
    if not grad:
        return loss
    dseg = np.where(m, seg_diff, 0) * (2.0 * beta / (count * num_cat))
    ddist = np.where(m, dist_diff, 0) * (2.0 * (1.0 - beta) / count)
    return loss, (dseg.astype(student_seg.dtype), ddist.astype(student_dist.dtype))


def cross_task_consistency(seg_probs, dist_pred, k: float, grad: bool = False):
    """Mean-squared gap between the foreground probability and the mask
    recovered from the predicted distance field via the smooth inverse."""
    seg_probs = np.asarray(seg_probs)
    dist_pred = np.asarray(dist_pred)
    if dist_pred.shape != (seg_probs.shape[0], 1) + seg_probs.shape[2:]:
        raise InvalidInputError(
            f"dist {dist_pred.shape} must be (B, 1, *spatial) matching probs {seg_probs.shape}"
        )
    fg = 1.0 - seg_probs[:, :1].astype(np.float64, copy=False)
    inv = inverse_sdf(dist_pred, k)
    diff = fg - inv
    n = diff.size
    loss = float((diff * diff).sum(dtype=np.float64)) / n
    if not grad:
        return loss
    dprobs = np.zeros_like(seg_probs)
    dprobs[:, 0] = (-(2.0 / n) * diff[:, 0]).astype(seg_probs.dtype)
    ddist = ((2.0 * k / n) * diff * inv * (1.0 - inv)).astype(dist_pred.dtype)
    return loss, (dprobs, ddist)


@dataclass
class LossBreakdown:
    """All loss terms and the schedule values used on one step."""

    step: int
    sup_dice: float
    sup_ce: float
    sup_dis: float
    itc: float
    ctc: float
    total: float
    lambda_i: float
    lambda_c: float
    u_th: float
    beta: float

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(f.name for f in fields(cls))

    def csv_row(self) -> str:
        vals = [getattr(self, f.name) for f in fields(self)]
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in vals)


def total_loss(
    step: int,
    sup_dice: float,
    sup_ce: float,
    sup_dis: float,
    itc: float,
    ctc: float,
    lambda_i: float,
    lambda_c: float,
    u_th: float,
    beta: float,
) -> LossBreakdown:
    """Assemble the weighted objective; raises naming the first non-finite term."""
    parts = {
        "sup_dice": sup_dice,
        "sup_ce": sup_ce,
        "sup_dis": sup_dis,
        "itc": itc,
        "ctc": ctc,
    }
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericalError(f"loss term {name!r} is non-finite ({value}) at step {step}")
    total = sup_dice + sup_ce + sup_dis + lambda_i * itc + lambda_c * ctc
    return LossBreakdown(
        step=step,
        sup_dice=float(sup_dice),
        sup_ce=float(sup_ce),
        sup_dis=float(sup_dis),
        itc=float(itc),
        ctc=float(ctc),
        total=float(total),
        lambda_i=float(lambda_i),
        lambda_c=float(lambda_c),
        u_th=float(u_th),
        beta=float(beta),
    )
