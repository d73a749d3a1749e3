"""Optimizer, schedule, clipping, and the two-stage training protocol.

Stage one pre-trains each concept sub-model on its own label source; stage
two fine-tunes the composed model end-to-end on the heterogeneous batch
mix.  Every random draw derives from the run seed, so a repeated run
reproduces the trajectory bitwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import data as dm
from . import loss as ls
from . import model as md
from .tensor import Tensor


class NumericFailureError(FloatingPointError):
    """A loss or gradient stopped being finite; the run must not continue."""


class MissingPrerequisiteError(RuntimeError):
    """A required upstream artifact (checkpoint, labels) is absent."""


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    base_lr: float = 1e-6
    lr_min: float = 0.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    t0: int = 10
    t_mult: int = 2
    eval_every: int = 5
    seed: int = 0
    stage: str = "pretrain"
    mix_ratio: float = 1.0  # plot-analog : GEDI-analog records per batch

    def validate(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr <= 0 or self.clip_norm <= 0:
            raise ValueError("base_lr and clip_norm must be positive")
        if self.t0 < 1 or self.t_mult < 1:
            raise ValueError("warm-restart parameters must be >= 1")
        if self.stage not in ("pretrain", "posttrain"):
            raise ValueError("stage must be pretrain or posttrain")


@dataclass
class CheckpointMeta:
    epoch: int
    val_loss: float
    val_rmse: float
    params: dict
    log: list = field(repr=False, default_factory=list)


# -- optimizer and schedule ------------------------------------------------


class AdamState:
    def __init__(self, params: dict):
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One in-place Adam update with bias correction."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        p.data -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return state


def warm_restart_position(step: int, t0: int, t_mult: int) -> tuple:
    """Map a global step index to (t_cur, period) of its restart cycle."""
    t, period = step, t0
    while t >= period:
        t -= period
        period *= t_mult
    return t, period


def cosine_warm_restart_lr(step: int, t0: int, t_mult: int,
                           lr_max: float, lr_min: float = 0.0) -> float:
    t_cur, period = warm_restart_position(step, t0, t_mult)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t_cur / period))


def clip_gradients(grads: dict, max_norm: float) -> tuple:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns (clipped grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return dict(grads), total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


# -- batch assembly --------------------------------------------------------


def stack_records(records) -> dict:
    return {
        "inputs": np.stack([r.inputs for r in records]).astype(np.float64),
        "position": np.stack([r.position for r in records]).astype(np.float64),
        "labels": np.stack([r.labels for r in records]).astype(np.float64),
        "masks": np.stack([r.masks for r in records]),
    }


def _epoch_batches(rng, n: int, batch_size: int):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _mixed_batches(rng, pools: tuple, batch_size: int, ratio: float):
    """Interleave two index pools at `ratio` (first:second) per batch."""
    plot, gedi = [rng.permutation(p) for p in pools]
    n_plot = max(1, int(round(batch_size * ratio / (1.0 + ratio))))
    n_gedi = max(1, batch_size - n_plot)
    batches = []
    i = j = 0
    while i < len(plot) or j < len(gedi):
        take_p = plot[i : i + n_plot]
        take_g = gedi[j : j + n_gedi]
        i += n_plot
        j += n_gedi
        batch = np.concatenate([take_p, take_g])
        if len(batch):
            batches.append(batch)
    return batches


def _grads_of(params: dict) -> dict:
    out = {}
    for k, t in params.items():
        if t.grad is None:
            raise NumericFailureError(f"no gradient reached parameter {k}")
        if not np.all(np.isfinite(t.grad)):
            raise NumericFailureError(f"non-finite gradient in {k}")
        out[k] = t.grad
        t.grad = None
    return out


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise NumericFailureError(f"non-finite {what} encountered; aborting")


# -- generic loop ----------------------------------------------------------


def _fit(named_params: dict, batch_fn, loss_fn, val_fn, cfg: TrainConfig,
         stage: str, log_path=None) -> CheckpointMeta:
    """Shared training loop.

    batch_fn(rng) -> list of index arrays; loss_fn(batch, weights, seed) ->
    (Tensor, LossBreakdown); val_fn(params) -> (val_loss, val_rmse).
    """
    cfg.validate()
    state = AdamState(named_params)
    weights = ls.LossWeights()
    log: list = []
    best = None
    rmse_history: list = []
    log_file = open(log_path, "w") if log_path else None
    try:
        step = 0
        seen_evals = 0
        for epoch in range(cfg.epochs):
            # the halving rule fires at most once per fresh validation point
            fresh = rmse_history if len(rmse_history) > seen_evals else []
            seen_evals = len(rmse_history)
            weights = ls.curriculum_update(epoch, cfg.epochs, fresh, weights)
            lr = cosine_warm_restart_lr(epoch, cfg.t0, cfg.t_mult,
                                        cfg.base_lr, cfg.lr_min)
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
            for batch in batch_fn(rng):
                seed = int(np.random.SeedSequence(
                    [cfg.seed, epoch, step]).generate_state(1)[0])
                total, breakdown = loss_fn(batch, weights, seed)
                _check_finite(breakdown.total, "loss")
                total.backward()
                grads = _grads_of(named_params)
                grads, norm = clip_gradients(grads, cfg.clip_norm)
                adam_step(named_params, grads, state, lr,
                          betas=cfg.betas, eps=cfg.adam_eps)
                entry = {"stage": stage, "epoch": epoch, "step": step, "lr": lr,
                         "loss": breakdown.to_dict(), "grad_norm": norm,
                         "lambdas": list(weights.lambdas())}
                log.append(entry)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                step += 1
            last = (epoch == cfg.epochs - 1)
            if epoch % cfg.eval_every == 0 or last:
                val_loss, val_rmse = val_fn(named_params)
                _check_finite(val_loss, "validation loss")
                rmse_history.append(val_rmse)
                entry = {"stage": stage, "epoch": epoch, "val_loss": val_loss,
                         "val_rmse": val_rmse}
                log.append(entry)
                if log_file:
                    log_file.write(json.dumps(entry) + "\n")
                if best is None or val_loss < best.val_loss:
                    best = CheckpointMeta(
                        epoch=epoch, val_loss=val_loss, val_rmse=val_rmse,
                        params={k: t.data.copy() for k, t in named_params.items()},
                    )
    finally:
        if log_file:
            log_file.close()
    best.log = log
    return best


def _head_loss(pred, target, mask, weights, quantiles):
    return ls.total_loss({}, {}, {}, pred, target, mask,
                         ls.LossWeights(
                             lambda_mono=weights.lambda_mono,
                             lambda_spatial=weights.lambda_spatial,
                             lambda_consistency=weights.lambda_consistency,
                             lambda_adv=weights.lambda_adv,
                             gamma=weights.gamma, epsilon=weights.epsilon,
                             alpha=(), beta=weights.beta),
                         quantiles)


def _masked_median_rmse(pred_values: np.ndarray, target: np.ndarray,
                        mask: np.ndarray, quantiles) -> float:
    med = pred_values[:, len(quantiles) // 2]
    if not mask.any():
        return float("nan")
    d = (med - target)[mask]
    return float(np.sqrt(np.mean(d * d)))


# -- stage one: sub-model pre-training -------------------------------------


def pretrain_submodel(params: dict, cfg: md.SubModelConfig, records, split,
                      attribute: int, train_cfg: TrainConfig,
                      log_path=None) -> CheckpointMeta:
    """Train one sub-model head on the records labelled for `attribute`."""
    train_idx = [i for i in split.train if records[i].masks[attribute].any()]
    val_idx = [i for i in split.val_id if records[i].masks[attribute].any()]
    if not train_idx:
        raise MissingPrerequisiteError(
            f"no training records carry labels for attribute {attribute}")
    if not val_idx:
        raise dm.EmptyValidationError(
            f"no validation records carry labels for attribute {attribute}")
    tr = stack_records([records[i] for i in train_idx])
    va = stack_records([records[i] for i in val_idx])
    quantiles = cfg.quantiles

    def batch_fn(rng):
        return _epoch_batches(rng, len(train_idx), train_cfg.batch_size)

    def loss_fn(batch, weights, seed):
        pred = md.submodel_apply(params, cfg, Tensor(tr["inputs"][batch]),
                                 tr["position"][batch], train=True, seed=seed)
        return _head_loss(pred, tr["labels"][batch, attribute],
                          tr["masks"][batch, attribute], weights, quantiles)

    def val_fn(named):
        pred = md.submodel_forward(named, cfg, va["inputs"], va["position"])
        loss, _ = ls.focal_quantile_loss(
            pred.values, va["labels"][:, attribute], va["masks"][:, attribute],
            quantiles)
        rmse = _masked_median_rmse(pred.values, va["labels"][:, attribute],
                                   va["masks"][:, attribute], quantiles)
        return float(loss.data), rmse

    return _fit(params, batch_fn, loss_fn, val_fn, train_cfg,
                stage="pretrain", log_path=log_path)


# -- stage two: end-to-end post-training -----------------------------------


def _split_pools(records, split):
    plot = np.array([i for i in split.train if records[i].is_plot_like()])
    gedi = np.array([i for i in split.train if records[i].is_gedi_like()])
    return plot, gedi


def posttrain_end_to_end(model: md.PGCBMModel, records, split,
                         train_cfg: TrainConfig, log_path=None) -> CheckpointMeta:
    """Fine-tune the composed model on the 1:1 plot/GEDI batch mix."""
    plot, gedi = _split_pools(records, split)
    if len(plot) == 0:
        raise MissingPrerequisiteError("no plot-analog records to post-train on")
    tr = stack_records(records)
    val_idx = [i for i in split.val_id if records[i].masks[dm.AGBD].any()]
    if not val_idx:
        raise dm.EmptyValidationError("no validation records carry task labels")
    va = stack_records([records[i] for i in val_idx])
    quantiles = model.agg_cfg.quantiles
    named = flatten_pgcbm_params(model)
    concept_attr = {"cover": dm.COVER, "height": dm.HEIGHT, "stems": dm.STEMS}

    def batch_fn(rng):
        if len(gedi) == 0:
            return _epoch_batches(rng, len(plot), train_cfg.batch_size)
        return _mixed_batches(rng, (plot, gedi), train_cfg.batch_size,
                              train_cfg.mix_ratio)

    def loss_fn(batch, weights, seed):
        z, y = md.pgcbm_apply(model, Tensor(tr["inputs"][batch]),
                              tr["position"][batch], train=True, seed=seed)
        ct = {k: tr["labels"][batch, a] for k, a in concept_attr.items()}
        cm = {k: tr["masks"][batch, a] for k, a in concept_attr.items()}
        return ls.total_loss(z, ct, cm, y, tr["labels"][batch, dm.AGBD],
                             tr["masks"][batch, dm.AGBD], weights, quantiles)

    def val_fn(_named):
        _, y = md.pgcbm_forward(model, va["inputs"], va["position"])
        loss, _ = ls.focal_quantile_loss(
            y.values, va["labels"][:, dm.AGBD], va["masks"][:, dm.AGBD], quantiles)
        rmse = _masked_median_rmse(y.values, va["labels"][:, dm.AGBD],
                                   va["masks"][:, dm.AGBD], quantiles)
        return float(loss.data), rmse

    return _fit(named, batch_fn, loss_fn, val_fn, train_cfg,
                stage="posttrain", log_path=log_path)


def posttrain_vanilla(model: md.VanillaCBMModel, records, split,
                      train_cfg: TrainConfig, log_path=None) -> CheckpointMeta:
    """Stage two for the static-concept baseline: only g receives updates."""
    plot, gedi = _split_pools(records, split)
    if len(plot) == 0:
        raise MissingPrerequisiteError("no plot-analog records to post-train on")
    tr = stack_records(records)
    val_idx = [i for i in split.val_id if records[i].masks[dm.AGBD].any()]
    if not val_idx:
        raise dm.EmptyValidationError("no validation records carry task labels")
    va = stack_records([records[i] for i in val_idx])
    quantiles = model.agg_cfg.quantiles
    named = {f"agg.{k}": t for k, t in model.agg_params.items()}

    def batch_fn(rng):
        return _epoch_batches(rng, len(plot), train_cfg.batch_size)

    def loss_fn(batch, weights, seed):
        idx = plot[batch]
        y = md.vanilla_apply(model, tr["inputs"][idx], tr["position"][idx],
                             train=True, seed=seed)
        return _head_loss(y, tr["labels"][idx, dm.AGBD],
                          tr["masks"][idx, dm.AGBD], weights, quantiles)

    def val_fn(_named):
        y = md.vanilla_forward(model, va["inputs"], va["position"])
        loss, _ = ls.focal_quantile_loss(
            y.values, va["labels"][:, dm.AGBD], va["masks"][:, dm.AGBD], quantiles)
        rmse = _masked_median_rmse(y.values, va["labels"][:, dm.AGBD],
                                   va["masks"][:, dm.AGBD], quantiles)
        return float(loss.data), rmse

    return _fit(named, batch_fn, loss_fn, val_fn, train_cfg,
                stage="posttrain", log_path=log_path)


def train_blackbox(model: md.BlackboxModel, records, split,
                   train_cfg: TrainConfig, log_path=None) -> CheckpointMeta:
    """Single-stage training of the parity baseline on task labels only."""
    return pretrain_submodel(model.params, model.cfg, records, split,
                             dm.AGBD, train_cfg, log_path=log_path)


# -- parameter plumbing ----------------------------------------------------


def flatten_pgcbm_params(model: md.PGCBMModel) -> dict:
    named = {}
    for cname, pdict in model.concept_params.items():
        for k, t in pdict.items():
            named[f"{cname}.{k}"] = t
    for k, t in model.agg_params.items():
        named[f"agg.{k}"] = t
    return named


def load_pgcbm_params(model: md.PGCBMModel, named: dict) -> None:
    target = flatten_pgcbm_params(model)
    for k, t in target.items():
        if k not in named:
            raise MissingPrerequisiteError(f"checkpoint lacks parameter {k}")
        t.data = np.array(named[k], dtype=np.float64)


def load_submodel_params(params: dict, named: dict, prefix: str = "") -> None:
    for k, t in params.items():
        key = prefix + k
        if key not in named:
            raise MissingPrerequisiteError(f"checkpoint lacks parameter {key}")
        t.data = np.array(named[key], dtype=np.float64)
