"""Command-line entry point.

Subcommands follow the two-phase workflow: ``preprocess`` slides, ``split``
patients into folds, ``train`` a head on embeddings and predict the "other"
set, ``pseudo`` select confident predictions, ``train`` again with
``--pseudo``, ``ensemble`` the models and ``evaluate`` against a solution.

Values come from ``--config`` (YAML) and are overridden by flags. Exit
status is 0 on success, 1 on data errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import augment, dataset, metrics, predictions, trainer, wsi

log = logging.getLogger("strokeclot")

DATA_ERRORS = (
    dataset.MetadataError, wsi.RasterError, augment.InvalidParams, metrics.ClassAbsent,
    predictions.SubjectCollision, predictions.SubjectSetMismatch, trainer.ShapeMismatch,
    ValueError, KeyError, OSError,
)


class UsageError(Exception):
    pass


def emit(line: str) -> None:
    print(line, flush=True)


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a mapping")
    return doc


def pick(args, cfg: dict, flag: str, *keys, default=None):
    """Flag value if given, else the nested config value, else ``default``."""
    value = getattr(args, flag, None)
    if value is not None:
        return value
    node = cfg
    for k in keys:
        if not isinstance(node, dict) or k not in node:
            return default
        node = node[k]
    return node


def need(value, name):
    if value is None:
        raise UsageError(f"missing required input: {name} (flag or config)")
    return value


# -- subcommands ------------------------------------------------------------------


def cmd_preprocess(args, cfg) -> int:
    metadata = need(pick(args, cfg, "metadata", "paths", "metadata"), "--metadata")
    image_dir = pick(args, cfg, "image_dir", "paths", "image_dir")
    out_dir = Path(need(pick(args, cfg, "out_dir", "paths", "output_dir"), "--out-dir"))
    kind = pick(args, cfg, "kind", "kind", default="Train")
    side = int(pick(args, cfg, "side", "side", default=1024))
    jobs = int(pick(args, cfg, "jobs", "jobs", default=1))
    policy = wsi.BackgroundPolicy(
        int(pick(args, cfg, "background_threshold", "background", "threshold", default=240)),
        float(pick(args, cfg, "empty_fraction", "background", "empty_fraction", default=0.995)),
    )
    index = dataset.load_metadata(metadata, kind, image_dir=image_dir)
    if not args.all_images:
        index = dataset.select_last_chronological(index)
    items = []
    for rec in index.records:
        path = rec.path if rec.path is not None else Path(image_dir or ".") / f"{rec.image_id}.tif"
        items.append((rec.image_id, path))
    done, failed = wsi.preprocess_batch(items, out_dir, policy, side, jobs)
    for s in done:
        emit(f"preprocessed image_id={s.image_id} orig={s.orig_w}x{s.orig_h} "
             f"crop={s.crop_w}x{s.crop_h} out={s.out_path}")
    for f in failed:
        emit(f"failed image_id={f.image_id} error={f.error}")
    wsi.write_manifest(done, out_dir / "manifest.csv")
    if failed:
        with (out_dir / "errors.csv").open("w", encoding="utf-8") as fh:
            fh.write("image_id,in_path,error\n")
            for f in failed:
                fh.write(f"{f.image_id},{f.in_path},\"{f.error.replace(chr(34), chr(39))}\"\n")
    emit(f"preprocess ok={len(done)} failed={len(failed)} manifest={out_dir / 'manifest.csv'}")
    return 1 if failed else 0


def cmd_split(args, cfg) -> int:
    metadata = need(pick(args, cfg, "metadata", "paths", "metadata"), "--metadata")
    out = need(pick(args, cfg, "out", "paths", "folds"), "--out")
    k = int(pick(args, cfg, "k", "folds", default=5))
    seed = int(pick(args, cfg, "seed", "seed", default=0))
    index = dataset.load_metadata(metadata, dataset.DatasetKind.TRAIN)
    folds = dataset.stratified_kfold(index, k, seed)
    dataset.write_folds(folds, out)
    labels = index.patient_labels()
    for f in range(k):
        members = folds.patients_in(f)
        ce = sum(labels[p] is dataset.Label.CE for p in members)
        emit(f"fold={f} patients={len(members)} CE={ce} LAA={len(members) - ce}")
    emit(f"split patients={len(folds.fold_of_patient)} k={k} seed={seed} out={out}")
    return 0


def _train_config(args, cfg, seed) -> trainer.TrainConfig:
    tc = dict(cfg.get("train") or {})
    tc["seed"] = seed
    for flag in ("batch_size", "max_epochs", "epsilon"):
        if getattr(args, flag, None) is not None:
            tc[flag] = getattr(args, flag)
    if getattr(args, "relu", False):
        tc["relu"] = True
    if tc.get("class_weights") is not None:
        tc["class_weights"] = tuple(tc["class_weights"])
    try:
        return trainer.TrainConfig(**tc)
    except TypeError as exc:
        raise UsageError(f"bad train config: {exc}") from None


def _labels(args, cfg) -> dict:
    if args.labels:
        return predictions.load_solution(args.labels)
    metadata = need(pick(args, cfg, "metadata", "paths", "metadata"), "--labels or --metadata")
    index = dataset.select_last_chronological(dataset.load_metadata(metadata))
    return {p: metrics.CLASSES.index(lab.value) for p, lab in index.patient_labels().items()}


def cmd_train(args, cfg) -> int:
    emb_path = need(pick(args, cfg, "embeddings", "paths", "embeddings"), "--embeddings")
    folds_path = need(pick(args, cfg, "folds", "paths", "folds"), "--folds")
    out_dir = Path(need(pick(args, cfg, "out_dir", "paths", "output_dir"), "--out-dir"))
    seed = int(pick(args, cfg, "seed", "seed", default=0))
    config = _train_config(args, cfg, seed)
    ids, x = trainer.load_embeddings(emb_path)
    labels = _labels(args, cfg)
    folds = dataset.load_folds(folds_path, seed)
    extra = None
    if args.pseudo:
        batch = predictions.load_pseudo_labels(args.pseudo)
        predictions.expand_train_folds(folds, batch)  # raises on collisions
        extra = batch.as_class_indices()
        if args.pseudo_embeddings:
            pseudo_ids, pseudo_x = trainer.load_embeddings(args.pseudo_embeddings)
            ids, x = ids + pseudo_ids, np.vstack([x, pseudo_x])
    out_dir.mkdir(parents=True, exist_ok=True)
    results = trainer.train_head(ids, x, labels, folds, config, extra)
    row = {s: i for i, s in enumerate(ids)}
    oof_ids, oof_probs, oof_y = [], [], []
    for res in results:
        trainer.save_head(res.params, out_dir / f"fold{res.fold}.head")
        trainer.write_history(res.history, out_dir / f"fold{res.fold}_history.csv")
        emit(f"fold={res.fold} best_epoch={res.best_epoch} val_wmcll={res.best_val_loss:.6f} "
             f"epochs={len(res.history)}")
        val = folds.patients_in(res.fold)
        oof_ids += val
        oof_probs.append(trainer.predict_proba(res.params, x[[row[s] for s in val]]))
        oof_y += [labels[s] for s in val]
    oof = predictions.PredictionTable(tuple(oof_ids), np.vstack(oof_probs), args.model_id)
    predictions.write_predictions(oof, out_dir / "oof.csv")
    cv = metrics.wmcll(oof_y, oof.probs)
    heads = [r.params for r in results]
    if args.predict:
        pids, px = trainer.load_embeddings(args.predict)
        table = predictions.PredictionTable(tuple(pids), trainer.predict_proba(heads, px), args.model_id)
        dest = args.predictions_out or out_dir / "predictions.csv"
        predictions.write_predictions(table, dest)
        emit(f"predicted rows={len(table)} out={dest}")
    emit(f"train folds={len(results)} oof_wmcll={cv:.6f} pseudo={len(extra or {})} out={out_dir}")
    return 0


def cmd_pseudo(args, cfg) -> int:
    preds = predictions.load_predictions(need(args.predictions, "--predictions"))
    threshold = float(pick(args, cfg, "threshold", "threshold", default=0.9))
    batch = predictions.select_pseudo_labels(preds, threshold)
    out = need(pick(args, cfg, "out", "paths", "pseudo"), "--out")
    if args.folds:
        manifests = predictions.expand_train_folds(dataset.load_folds(args.folds), batch)
        for m in manifests:
            emit(f"fold={m.fold} train={m.train_size} val={len(m.val)}")
    predictions.write_pseudo_labels(batch, out)
    n_ce = sum(r.label is dataset.Label.CE for r in batch.rows)
    emit(f"pseudo selected={len(batch)} of={len(preds)} CE={n_ce} LAA={len(batch) - n_ce} "
         f"threshold={threshold:g} out={out}")
    return 0


def cmd_ensemble(args, cfg) -> int:
    tables = [predictions.load_predictions(p) for p in args.inputs]
    mean = predictions.ensemble_mean(tables)
    if args.submission:
        predictions.write_submission(mean, args.out)
    else:
        predictions.write_predictions(mean, args.out)
    emit(f"ensemble models={len(tables)} rows={len(mean)} out={args.out}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    solution = predictions.load_solution(args.solution)
    sub = predictions.load_predictions(args.submission).as_dict()
    missing = sorted(set(solution) - set(sub))
    if missing:
        raise KeyError(f"submission lacks {len(missing)} subject(s), e.g. {missing[0]!r}")
    ids = sorted(solution)
    y = [solution[s] for s in ids]
    p = np.array([sub[s] for s in ids])
    loss = metrics.wmcll(y, p)
    emit(f"evaluate wmcll={loss:.6f} accuracy={metrics.accuracy(y, p):.6f} rows={len(ids)}")
    return 0


def cmd_augment(args, cfg) -> int:
    pipeline_path = pick(args, cfg, "pipeline", "augment")
    if pipeline_path:
        pipeline, _ = augment.load_pipeline(pipeline_path)
    else:
        pipeline = augment.default_pipeline()
    seed = int(pick(args, cfg, "seed", "seed", default=0))
    jobs = int(pick(args, cfg, "jobs", "jobs", default=1))
    in_dir = Path(need(args.in_dir, "--in-dir"))
    items = [(p.stem, p) for p in sorted(in_dir.glob("*.png"))]
    done = augment.augment_batch(items, pipeline, seed, need(args.out_dir, "--out-dir"), jobs)
    for image_id, dest in done:
        emit(f"augmented image_id={image_id} out={dest}")
    emit(f"augment images={len(done)} seed={seed} jobs={jobs}")
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--jobs", type=int, help="worker threads")
    common.add_argument("--seed", type=int, help="random seed (u64)")
    common.add_argument("--threshold", type=float, help="pseudo-label threshold")
    common.add_argument("--side", type=int, help="output side length in pixels")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="strokeclot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="prune, orient and resize slides")
    p.add_argument("--metadata")
    p.add_argument("--kind", choices=[k.value for k in dataset.DatasetKind])
    p.add_argument("--image-dir")
    p.add_argument("--out-dir")
    p.add_argument("--background-threshold", type=int)
    p.add_argument("--empty-fraction", type=float)
    p.add_argument("--all-images", action="store_true", help="keep every image, not only the last per patient")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", parents=[common], help="stratified patient-level folds")
    p.add_argument("--metadata")
    p.add_argument("-k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", parents=[common], help="apply the augmentation pipeline to PNGs")
    p.add_argument("--pipeline")
    p.add_argument("--in-dir")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="cross-validated head training")
    p.add_argument("--embeddings")
    p.add_argument("--labels", help="solution-style CSV subject_id,label")
    p.add_argument("--metadata", help="metadata CSV used for labels when --labels is absent")
    p.add_argument("--folds")
    p.add_argument("--pseudo", help="pseudo-label CSV to add to every training split")
    p.add_argument("--pseudo-embeddings", help="embeddings for the pseudo-labelled subjects")
    p.add_argument("--out-dir")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--relu", action="store_true")
    p.add_argument("--predict", help="embeddings to predict with the fold-mean head")
    p.add_argument("--predictions-out")
    p.add_argument("--model-id", default="head")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo", parents=[common], help="select confident pseudo-labels")
    p.add_argument("--predictions")
    p.add_argument("--folds", help="optional fold CSV to check collisions and report sizes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("ensemble", parents=[common], help="probability-mean ensemble")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--submission", action="store_true", help="write patient_id,CE,LAA")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", parents=[common], help="score a submission")
    p.add_argument("--solution", required=True)
    p.add_argument("--submission", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DATA_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
