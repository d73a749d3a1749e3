"""Quantile loss suite and the regularization-weight curriculum.

Every term is built from the differentiable tensor primitives so one tape
covers the whole objective.  Supervised terms (the focal quantile losses)
honor validity masks exactly; the structural regularizers act on the
predictions themselves and are therefore dense.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .tensor import Tensor

CURRICULUM_INITIAL = (0.01, 0.001, 0.001, 0.0)
CURRICULUM_MAXIMA = (0.1, 0.1, 0.05, 0.01)


class EmptySupervisionError(ValueError):
    """Raised when no head in a batch has a single valid pixel."""


@dataclass
class LossWeights:
    lambda_mono: float = CURRICULUM_INITIAL[0]
    lambda_spatial: float = CURRICULUM_INITIAL[1]
    lambda_consistency: float = CURRICULUM_INITIAL[2]
    lambda_adv: float = CURRICULUM_INITIAL[3]
    gamma: float = 2.0
    epsilon: float = 1e-6
    alpha: tuple = (0.1, 0.1, 0.1)
    beta: float = 1.0
    penalty_factor: float = 1.0

    def validate(self):
        lams = (self.lambda_mono, self.lambda_spatial,
                self.lambda_consistency, self.lambda_adv)
        if any(l < 0 for l in lams) or self.beta < 0 or any(a < 0 for a in self.alpha):
            raise ValueError("loss weights must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def lambdas(self) -> tuple:
        return (self.lambda_mono, self.lambda_spatial,
                self.lambda_consistency, self.lambda_adv)


@dataclass
class BatchStats:
    mu_y: float
    sigma_y: float
    n_valid: int

    @property
    def empty(self) -> bool:
        return self.n_valid == 0


@dataclass
class LossBreakdown:
    quantile: float
    mono: float
    spatial: float
    consistency: float
    adversarial: float
    total: float
    weights: dict
    empty_heads: tuple = ()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def pinball(u, q: float):
    """rho_q(u) = max(q u, (q - 1) u)."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    u = Tensor._lift(u)
    return tc.maximum(u * q, u * (q - 1.0))


def focal_quantile_loss(pred, target, mask, quantiles,
                        gamma: float = 2.0, eps: float = 1e-6):
    """Masked focal-weighted pinball loss averaged over quantile levels.

    `pred` is (K, H, W) or (N, K, H, W); target and mask drop the K axis.
    Per pixel the weight is (|y - yhat| + eps)^gamma * (1 + z^2) with z the
    batch z-score of the target over valid pixels.  Returns (loss, stats);
    an empty mask yields a zero loss and stats flagged via n_valid == 0.
    """
    pred = Tensor._lift(pred)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    qaxis = pred.data.ndim - 3
    if pred.data.shape[qaxis] != len(quantiles):
        raise ValueError("prediction quantile axis does not match quantile levels")

    n_valid = int(mask.sum())
    if n_valid == 0:
        return Tensor(0.0), BatchStats(mu_y=0.0, sigma_y=0.0, n_valid=0)
    mu = float(target[mask].mean())
    sigma = float(target[mask].std())
    z = np.abs(target - mu) / (sigma + eps)
    focal_scale = 1.0 + z * z
    maskf = mask.astype(np.float64)

    terms = []
    for k, q in enumerate(quantiles):
        yhat = pred[:, k] if qaxis == 1 else pred[k]
        resid = Tensor(target) - yhat
        w = (tc.absolute(resid) + eps) ** gamma * focal_scale
        terms.append((w * pinball(resid, q) * maskf).sum() * (1.0 / n_valid))
    loss = sum(terms[1:], terms[0]) * (1.0 / len(quantiles))
    return loss, BatchStats(mu_y=mu, sigma_y=sigma, n_valid=n_valid)


def monotonicity_loss(pred):
    """Mean over adjacent quantile pairs of the spatial mean of
    ReLU(lower - upper).  Dense: constrains the prediction everywhere."""
    pred = Tensor._lift(pred)
    qaxis = pred.data.ndim - 3
    if pred.data.shape[qaxis] < 2:
        raise ValueError("monotonicity needs at least two quantile planes")
    if qaxis == 1:
        lower, upper = pred[:, :-1], pred[:, 1:]
    else:
        lower, upper = pred[:-1], pred[1:]
    return tc.relu(lower - upper).mean()


def spatial_consistency_loss(median, eps: float = 1e-6):
    """Charbonnier penalty on vertical and horizontal gradients of the
    median plane; carries a sqrt(eps) floor at zero gradient."""
    x = Tensor._lift(median)
    if x.data.shape[-1] < 2 or x.data.shape[-2] < 2:
        raise ValueError("spatial consistency needs at least a 2x2 plane")
    dv = x[..., 1:, :] - x[..., :-1, :]
    dh = x[..., :, 1:] - x[..., :, :-1]
    return (tc.sqrt(dv * dv + eps).mean() + tc.sqrt(dh * dh + eps).mean()) * 0.5


def quantile_consistency_loss(pred, quantiles, eps: float = 1e-6):
    """SmoothL1 between range-normalized quantile gaps and level gaps.

    R_pred is the spatial max of the top plane minus the spatial min of the
    bottom plane, plus eps, per sample.  Note the term has a positive floor:
    the normalized gaps sum to roughly 1 while the level gaps sum to
    q_K - q_1 < 1, so the targets cannot all be met at once.
    """
    pred = Tensor._lift(pred)
    squeeze = pred.data.ndim == 3
    if squeeze:
        pred = pred.reshape((1,) + pred.data.shape)
    k = pred.data.shape[1]
    if k != len(quantiles) or k < 2:
        raise ValueError("need K >= 2 quantile planes matching the levels")
    top = tc.amax(pred[:, -1].reshape(pred.data.shape[0], -1), axis=1, keepdims=True)
    bottom = tc.amin(pred[:, 0].reshape(pred.data.shape[0], -1), axis=1, keepdims=True)
    r_pred = (top - bottom + eps).reshape(pred.data.shape[0], 1, 1, 1)
    gaps = tc.absolute(pred[:, 1:] - pred[:, :-1]) / r_pred
    dq = np.diff(np.asarray(quantiles)).reshape(1, k - 1, 1, 1)
    return tc.smooth_l1(gaps, np.broadcast_to(dq, gaps.data.shape)).mean()


def adversarial_js_loss(median_pred, target, mask, bins: int = 32,
                        eps: float = 1e-6):
    """Jensen-Shannon divergence between median-prediction histograms of the
    high- and low-target halves of the valid pixels.

    Histograms use a triangular (linear interpolation) kernel over the range
    of all valid median predictions, so the term stays differentiable; bins
    get eps added before normalization.  Fewer than two valid pixels, or a
    split that leaves one side empty, yields (0, True).
    """
    pred = Tensor._lift(median_pred)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if bins < 2:
        raise ValueError("need at least two histogram bins")
    flat_idx = np.flatnonzero(mask.ravel())
    if flat_idx.size < 2:
        return Tensor(0.0), True
    t = target.ravel()[flat_idx]
    thr = np.median(t)
    hi_sel, lo_sel = t > thr, t <= thr
    if not hi_sel.any() or not lo_sel.any():
        return Tensor(0.0), True

    v = pred.reshape(-1)[flat_idx]
    lo = tc.amin(v)
    width = (tc.amax(v) - lo + eps) * (1.0 / bins)
    centers = lo + width * Tensor(np.arange(bins) + 0.5)

    def histogram(values):
        d = tc.absolute(values.reshape(-1, 1) - centers.reshape(1, -1))
        mass = tc.relu(1.0 - d / width).sum(axis=0) + eps
        return mass / mass.sum()

    p_high = histogram(v[np.flatnonzero(hi_sel)])
    p_low = histogram(v[np.flatnonzero(lo_sel)])
    m = (p_high + p_low) * 0.5
    js = ((p_high * (tc.log(p_high) - tc.log(m))).sum()
          + (p_low * (tc.log(p_low) - tc.log(m))).sum()) * 0.5
    return js, False


def total_loss(concept_preds: dict, concept_targets: dict, concept_masks: dict,
               task_pred, task_target, task_mask, weights: LossWeights,
               quantiles) -> tuple:
    """Weighted sum of supervised focal terms and dense regularizers.

    Supervised terms run per head over its own mask; the four regularizers
    are averaged over every head that produced a prediction.  Raises
    EmptySupervisionError when no head has a valid pixel.
    """
    weights.validate()
    names = list(concept_preds)
    if len(weights.alpha) != len(names):
        raise ValueError("one alpha per concept head is required")
    heads = [(concept_preds[n], concept_targets[n], concept_masks[n]) for n in names]
    heads.append((task_pred, task_target, task_mask))
    if all(not np.any(m) for _, _, m in heads):
        raise EmptySupervisionError("every supervision mask in the batch is empty")

    med = len(quantiles) // 2
    empty = []
    sup = Tensor(0.0)
    for (p, t, m), name, a in zip(heads, names + ["task"],
                                  list(weights.alpha) + [weights.beta]):
        term, stats = focal_quantile_loss(p, t, m, quantiles,
                                          gamma=weights.gamma, eps=weights.epsilon)
        if stats.empty:
            empty.append(name)
        sup = sup + term * a

    mono = Tensor(0.0)
    spatial = Tensor(0.0)
    cons = Tensor(0.0)
    adv = Tensor(0.0)
    n_adv = 0
    for p, t, m in heads:
        p = Tensor._lift(p)
        qaxis = p.data.ndim - 3
        mono = mono + monotonicity_loss(p)
        spatial = spatial + spatial_consistency_loss(
            p[:, med] if qaxis == 1 else p[med], eps=weights.epsilon)
        cons = cons + quantile_consistency_loss(p, quantiles, eps=weights.epsilon)
        a, degenerate = adversarial_js_loss(
            p[:, med] if qaxis == 1 else p[med], t, m, eps=weights.epsilon)
        if not degenerate:
            adv = adv + a
            n_adv += 1
    scale = 1.0 / len(heads)
    mono, spatial, cons = mono * scale, spatial * scale, cons * scale
    adv = adv * (1.0 / n_adv) if n_adv else adv

    total = (sup + mono * weights.lambda_mono + spatial * weights.lambda_spatial
             + cons * weights.lambda_consistency + adv * weights.lambda_adv)
    breakdown = LossBreakdown(
        quantile=float(sup.data), mono=float(mono.data), spatial=float(spatial.data),
        consistency=float(cons.data), adversarial=float(adv.data),
        total=float(total.data),
        weights={"lambda_mono": weights.lambda_mono,
                 "lambda_spatial": weights.lambda_spatial,
                 "lambda_consistency": weights.lambda_consistency,
                 "lambda_adv": weights.lambda_adv,
                 "alpha": list(weights.alpha), "beta": weights.beta},
        empty_heads=tuple(empty),
    )
    return total, breakdown


def curriculum_update(epoch: int, total_epochs: int, val_rmse_history,
                      weights: LossWeights) -> LossWeights:
    """Three-phase regularization schedule.

    First 10% of epochs: initial weights.  10%-80%: linear ramp from the
    initial values to the maxima.  Final 20%: hold the maxima, but halve all
    four weights (floored at the initial values) whenever the newest
    validation RMSE exceeds the previous one.  The caller should invoke the
    stabilization branch once per fresh validation measurement.
    """
    if epoch >= total_epochs:
        raise ValueError("epoch must be smaller than total_epochs")
    warm_end = 0.1 * total_epochs
    ramp_end = 0.8 * total_epochs
    if epoch < warm_end:
        lams = CURRICULUM_INITIAL
        factor = 1.0
    elif epoch < ramp_end:
        t = (epoch - warm_end) / (ramp_end - warm_end)
        lams = tuple(a + t * (b - a)
                     for a, b in zip(CURRICULUM_INITIAL, CURRICULUM_MAXIMA))
        factor = 1.0
    else:
        factor = weights.penalty_factor
        history = list(val_rmse_history)
        if len(history) >= 2 and history[-1] > history[-2]:
            factor *= 0.5
        lams = tuple(max(m * factor, init)
                     for m, init in zip(CURRICULUM_MAXIMA, CURRICULUM_INITIAL))
    return dataclasses.replace(
        weights, lambda_mono=lams[0], lambda_spatial=lams[1],
        lambda_consistency=lams[2], lambda_adv=lams[3], penalty_factor=factor,
    )
