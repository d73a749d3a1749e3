"""Command-line pipeline: synth, pretrain, finetune, eval, compare.

One JSON config drives every stage; each command writes its resolved
config beside its outputs and exits nonzero on any error (2 config,
3 missing prerequisite, 4 numeric failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cf
from . import data as dm
from . import evaluate as ev
from . import model as md
from . import train as tr

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_NUMERIC = 4

ATTRIBUTES = {"cover": dm.COVER, "height": dm.HEIGHT, "stems": dm.STEMS}


def _out(cfg: cf.RunConfig) -> Path:
    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo(cfg: cf.RunConfig, out: Path, command: str) -> None:
    cf.echo(cfg, out / f"config_{command}.json")


def _dataset_paths(out: Path) -> tuple:
    return out / "dataset.pgcb", out / "norm_stats.json", out / "split.json"


def _load_dataset(out: Path):
    ds, st, sp = _dataset_paths(out)
    for p in (ds, st, sp):
        if not p.exists():
            raise tr.MissingPrerequisiteError(
                f"missing {p.name}; run `pgcbm synth` first")
    records = dm.read_dataset(ds)
    stats = dm.NormStats.from_dict(json.loads(st.read_text()))
    doc = json.loads(sp.read_text())
    split = dm.SplitSpec(train=doc["train"], val_id=doc["val_id"],
                         val_ood=doc["val_ood"], criteria=doc["criteria"])
    normed = [dm.apply_normalization(r, stats) for r in records]
    return records, normed, stats, split


def _checkpoint_path(out: Path, name: str) -> Path:
    return out / f"{name}.pgck"


def _require_checkpoint(out: Path, name: str, what: str) -> tuple:
    path = _checkpoint_path(out, name)
    if not path.exists():
        raise tr.MissingPrerequisiteError(f"missing {what} checkpoint: {path.name}")
    named, meta_cfg, epoch, val_loss = md.read_checkpoint(path)
    return named, meta_cfg, epoch, val_loss


def _write_meta_checkpoint(out: Path, name: str, params: dict,
                           cfg: cf.RunConfig, meta: tr.CheckpointMeta,
                           extra: dict | None = None) -> Path:
    doc = {"seed": cfg.seed, "stage": name}
    if extra:
        doc.update(extra)
    path = _checkpoint_path(out, name)
    md.write_checkpoint(path, params, doc, meta.epoch, meta.val_loss)
    return path


# -- commands --------------------------------------------------------------


def cmd_synth(cfg: cf.RunConfig) -> int:
    out = _out(cfg)
    records, stats, split = dm.generate_synthetic(cfg.synth, cfg.process)
    ds, st, sp = _dataset_paths(out)
    dm.write_dataset(records, ds)
    st.write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    sp.write_text(json.dumps(
        {"train": list(split.train), "val_id": list(split.val_id),
         "val_ood": list(split.val_ood), "criteria": split.criteria},
        indent=2, sort_keys=True) + "\n")
    _echo(cfg, out, "synth")
    print(f"wrote {len(records)} records to {ds}")
    return EXIT_OK


def cmd_pretrain(cfg: cf.RunConfig, attribute: str) -> int:
    if attribute not in ATTRIBUTES:
        raise cf.ConfigError(
            f"unknown attribute '{attribute}'; expected one of {sorted(ATTRIBUTES)}")
    out = _out(cfg)
    _, normed, _, split = _load_dataset(out)
    concept_index = list(md.CONCEPTS).index(attribute)
    params = md.init_submodel_params(cfg.model,
                                     seed=cfg.seed * 7919 + concept_index)
    meta = tr.pretrain_submodel(
        params, cfg.model, normed, split, ATTRIBUTES[attribute], cfg.train,
        log_path=out / f"pretrain_{attribute}.ndjson")
    named = {k: t for k, t in meta.params.items()}
    _write_meta_checkpoint(out, f"pretrain_{attribute}", named, cfg, meta,
                           extra={"attribute": attribute})
    _echo(cfg, out, f"pretrain_{attribute}")
    print(f"pretrained {attribute}: best epoch {meta.epoch}, "
          f"val loss {meta.val_loss:.6g}")
    return EXIT_OK


def _load_pretrained_concepts(out: Path, model) -> None:
    for name in md.CONCEPTS:
        named, _, _, _ = _require_checkpoint(out, f"pretrain_{name}", name)
        tr.load_submodel_params(model.concept_params[name], named)


def cmd_finetune(cfg: cf.RunConfig, variant: str) -> int:
    out = _out(cfg)
    _, normed, _, split = _load_dataset(out)
    if variant == "pgcbm":
        model = md.PGCBMModel.create(cfg.model, seed=cfg.seed)
        _load_pretrained_concepts(out, model)
        meta = tr.posttrain_end_to_end(model, normed, split, cfg.train,
                                       log_path=out / "posttrain_pgcbm.ndjson")
        params = meta.params
    elif variant == "vanilla":
        model = md.VanillaCBMModel.create(cfg.model, seed=cfg.seed)
        _load_pretrained_concepts(out, model)
        meta = tr.posttrain_vanilla(model, normed, split, cfg.train,
                                    log_path=out / "posttrain_vanilla.ndjson")
        params = dict(meta.params)
        for cname, pdict in model.concept_params.items():
            for k, t in pdict.items():
                params[f"{cname}.{k}"] = t.data
    elif variant == "blackbox":
        model = md.BlackboxModel.create(cfg.model, seed=cfg.seed)
        meta = tr.train_blackbox(model, normed, split, cfg.train,
                                 log_path=out / "posttrain_blackbox.ndjson")
        params = meta.params
    else:
        raise cf.ConfigError(f"unknown variant '{variant}'")
    _write_meta_checkpoint(out, f"posttrain_{variant}", params, cfg, meta,
                           extra={"variant": variant})
    _echo(cfg, out, f"finetune_{variant}")
    print(f"finetuned {variant}: best epoch {meta.epoch}, "
          f"val loss {meta.val_loss:.6g}")
    return EXIT_OK


# -- evaluation plumbing ---------------------------------------------------


def _restore_variant(variant: str, cfg: cf.RunConfig, out: Path):
    named, _, _, _ = _require_checkpoint(out, f"posttrain_{variant}", variant)
    if variant == "pgcbm":
        model = md.PGCBMModel.create(cfg.model, seed=cfg.seed)
        tr.load_pgcbm_params(model, named)
    elif variant == "vanilla":
        model = md.VanillaCBMModel.create(cfg.model, seed=cfg.seed)
        for cname in md.CONCEPTS:
            tr.load_submodel_params(model.concept_params[cname], named,
                                    prefix=f"{cname}.")
        tr.load_submodel_params(model.agg_params, named, prefix="agg.")
    elif variant == "blackbox":
        model = md.BlackboxModel.create(cfg.model, seed=cfg.seed)
        tr.load_submodel_params(model.params, named)
    else:
        raise cf.ConfigError(f"unknown variant '{variant}'")
    return model


def _denorm_label(values: np.ndarray, stats, channel: int) -> np.ndarray:
    return values * stats.label_std[channel] + stats.label_mean[channel]


def _forward_variant(variant: str, model, normed, indices, stats,
                     quantiles, chunk: int = 16):
    """Task quantile planes in label units; concept medians for pgcbm."""
    task = []
    concepts = {name: [] for name in md.CONCEPTS}
    for i in range(0, len(indices), chunk):
        sel = [normed[j] for j in indices[i : i + chunk]]
        x = np.stack([r.inputs for r in sel])
        pos = np.stack([r.position for r in sel])
        if variant == "pgcbm":
            z, y = md.pgcbm_forward(model, x, pos)
            for name, channel in ATTRIBUTES.items():
                med = z[name].values[:, len(quantiles) // 2]
                concepts[name].append(_denorm_label(med, stats, channel))
        elif variant == "vanilla":
            y = md.vanilla_forward(model, x, pos)
        else:
            y = md.blackbox_forward(model, x, pos)
        task.append(_denorm_label(y.values, stats, dm.AGBD))
    task = np.concatenate(task)
    if variant == "pgcbm":
        concepts = {k: np.concatenate(v) for k, v in concepts.items()}
        return task, concepts
    return task, None


def _record_stems(record) -> float:
    if record.latents is not None:
        return float(record.latents[2].mean())
    m = record.masks[dm.STEMS]
    plane = record.labels[dm.STEMS]
    return float(plane[m].mean()) if m.any() else float(plane.mean())


def _eval_indices(records, split, which: str):
    pool = split.val_id if which == "id" else split.val_ood
    return [i for i in pool if records[i].masks[dm.AGBD].any()]


def _variant_series(variant, cfg, out, records, normed, stats, indices):
    model = _restore_variant(variant, cfg, out)
    quantiles = cfg.model.quantiles
    task, concepts = _forward_variant(variant, model, normed, indices, stats,
                                      quantiles)
    labels = np.stack([records[i].labels[dm.AGBD] for i in indices]).astype(np.float64)
    masks = np.stack([records[i].masks[dm.AGBD] for i in indices])
    series = ev.record_series(task, labels, masks, quantiles)
    return series, concepts


def cmd_eval(cfg: cf.RunConfig, variants=None) -> int:
    out = _out(cfg)
    records, normed, stats, split = _load_dataset(out)
    variants = list(variants or cfg.eval.variants)
    indices = _eval_indices(records, split, "id")
    if not indices:
        raise tr.MissingPrerequisiteError("no validation records carry task labels")
    stems = np.array([_record_stems(records[i]) for i in indices])

    reports = {}
    intervals = {}
    curves = {}
    flatness = {}
    correlations = None
    for variant in variants:
        series, concepts = _variant_series(variant, cfg, out, records, normed,
                                           stats, indices)
        reports[variant] = ev.compute_metrics(series.predicted, series.observed,
                                              variant=variant)
        intervals[variant] = ev.interval_stats(series)
        if len(indices) >= cfg.eval.n_bins:
            curves[variant], flatness[variant] = ev.structure_bias_curve(
                series.abs_error, stems, n_bins=cfg.eval.n_bins)
        if variant == "pgcbm" and len(indices) >= 3:
            z_rec = {k: np.array([v[j].mean() for j in range(len(indices))])
                     for k, v in concepts.items()}
            try:
                correlations = ev.concept_correlation_matrix(
                    z_rec["cover"], z_rec["height"], z_rec["stems"],
                    series.predicted, series.observed)
            except ValueError:
                correlations = None  # a constant series leaves it undefined

    ev.write_report_json(out / "report.json", reports, extras={
        "intervals": {v: dataclasses.asdict(s) for v, s in intervals.items()},
        "flatness": flatness,
    })
    ev.write_structure_csv(out / "structure_bias.csv", curves, flatness)
    ev.write_intervals_csv(out / "intervals.csv", intervals)
    if correlations is not None:
        ev.write_correlations_csv(out / "correlations.csv", correlations)
    _echo(cfg, out, "eval")
    for v, r in reports.items():
        print(f"{v}: rmsd {r.rmsd:.4g}, bias {r.mean_bias:.4g}, "
              f"coverage {intervals[v].coverage:.3f}")
    return EXIT_OK


def cmd_compare(cfg: cf.RunConfig) -> int:
    out = _out(cfg)
    records, normed, stats, split = _load_dataset(out)
    id_idx = _eval_indices(records, split, "id")
    ood_idx = _eval_indices(records, split, "ood")
    if not id_idx or not ood_idx:
        raise tr.MissingPrerequisiteError(
            "compare needs task-labelled records in both validation splits")
    errors = {}
    for variant in ev.VARIANTS:
        id_series, _ = _variant_series(variant, cfg, out, records, normed,
                                       stats, id_idx)
        ood_series, _ = _variant_series(variant, cfg, out, records, normed,
                                        stats, ood_idx)
        errors[variant] = (id_series.abs_error, ood_series.abs_error)
    rows, ordering = ev.ood_comparison(errors)
    ev.write_ood_csv(out / "ood.csv", rows, ordering)
    _echo(cfg, out, "compare")
    for v, r in rows.items():
        print(f"{v}: id mae {r['id_mae']:.4g}, ood mae {r['ood_mae']:.4g}, "
              f"inflation {r['inflation']:.3f}")
    print(f"ordering pgcbm <= vanilla <= blackbox held: {ordering}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------


def _apply_thread_cap() -> None:
    cap = os.environ.get("PGCBM_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgcbm",
        description="Synthetic process-guided biomass benchmark pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON run configuration (defaults used if omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seed everywhere")
        p.add_argument("--out", type=Path, default=None,
                       help="override the output directory")

    common(sub.add_parser("synth", help="generate the synthetic dataset"))
    p = sub.add_parser("pretrain", help="pre-train one concept sub-model")
    p.add_argument("attribute", choices=sorted(ATTRIBUTES))
    common(p)
    p = sub.add_parser("finetune", help="stage-two training of one variant")
    p.add_argument("variant", choices=list(ev.VARIANTS))
    common(p)
    p = sub.add_parser("eval", help="evaluate trained variants")
    p.add_argument("--variants", nargs="+", choices=list(ev.VARIANTS),
                   default=None)
    common(p)
    common(sub.add_parser("compare", help="ID/OOD comparison across variants"))
    return parser


def _resolve_config(args) -> cf.RunConfig:
    cfg = cf.load(args.config) if args.config else cf.RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args.attribute)
        if args.command == "finetune":
            return cmd_finetune(cfg, args.variant)
        if args.command == "eval":
            return cmd_eval(cfg, args.variants)
        if args.command == "compare":
            return cmd_compare(cfg)
        raise cf.ConfigError(f"unknown command {args.command}")
    except cf.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (tr.MissingPrerequisiteError, ev.MissingVariantError,
            dm.DatasetFormatError, md.CheckpointFormatError,
            dm.EmptyValidationError) as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (tr.NumericFailureError, dm.ZeroVarianceError,
            dm.DegenerateProcessError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
