"""Command-line pipelines.

Every subcommand reads files, writes its outputs plus an
``effective_config.json`` echo into ``--out-dir``, and never mutates its
inputs. Exit codes: 0 success, 2 input validation error, 3 numerical
failure. Pipelines are pure functions of (inputs, config, seed): re-runs
produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import io
from .baselines import (CountFeatures, fit_constant, fit_count_regressor,
                        count_matrix, predict, STATISTICS)
from .dataset import dataset_stats, stratified_split
from .errors import NumericalError, ValidationError
from .geo import match_images
from .metrics import (APReport, EvalConfig, RegressionPairSet,
                      evaluate_detection, rmse, wmae)
from .pcpm import (PCPMConfig, TrainConfig, params_from_dict, params_to_dict,
                   predict_batch, train)
from .synth import SynthConfig, generate

CONFIG_SECTIONS = {
    "synth": {f.name for f in dataclass_fields(SynthConfig)},
    "match": {"prefer_radius", "max_radius"},
    "split": {"k"},
    "metrics": {"max_detections_per_image"},
    "baseline": {"l2", "score_threshold"},
    "pcpm": {f.name for f in dataclass_fields(PCPMConfig)},
    "train": {f.name for f in dataclass_fields(TrainConfig)},
}


def load_run_config(path: str | None) -> dict:
    """Load the structured run config, rejecting unknown sections/keys."""
    if path is None:
        return {}
    payload = io.read_json(Path(path))
    if not isinstance(payload, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    for section, content in payload.items():
        if section not in CONFIG_SECTIONS:
            raise ValidationError(f"{path}: unknown config section {section!r}")
        if not isinstance(content, dict):
            raise ValidationError(f"{path}: section {section!r} must be an object")
        unknown = set(content) - CONFIG_SECTIONS[section]
        if unknown:
            raise ValidationError(f"{path}: unknown keys in {section!r}: {sorted(unknown)}")
    return payload


def _resolve(run_cfg: dict, section: str, key: str, cli_value, default):
    """CLI flag > config file > default."""
    if cli_value is not None:
        return cli_value
    return run_cfg.get(section, {}).get(key, default)


def _prepare_out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out_dir: Path, command: str, resolved: dict) -> None:
    io.write_json(out_dir / "effective_config.json",
                  {"command": command, "options": resolved})


# --- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    run_cfg = load_run_config(args.config)
    values = dict(run_cfg.get("synth", {}))
    if args.n_images is not None:
        values["n_images"] = args.n_images
    if args.n_crossings is not None:
        values["n_crossings"] = args.n_crossings
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = SynthConfig.from_dict(values)
    out = _prepare_out_dir(args)
    ds = generate(cfg)

    io.write_images_csv(out / "images.csv", ds.images)
    io.write_crossings_csv(out / "crossings.csv", ds.crossings)
    io.write_annotations_json(out / "annotations.json", ds.images, ds.annotations,
                              ds.categories)
    io.write_labels_csv(out / "labels.csv", ds.labels)
    emb_dir = out / "embeddings"
    emb_dir.mkdir(exist_ok=True)
    entries = []
    for im, emb in zip(ds.images, ds.embeddings):
        rel = f"embeddings/{im.image_id}.seb"
        io.write_embedding_seb(out / rel, emb)
        entries.append((im.image_id, rel, float(emb.label)))
    io.write_manifest_csv(out / "manifest.csv", entries)
    io.write_json(out / "provenance.json", {"generator": "synth", "config": cfg.to_dict()})
    _echo_config(out, "synth", cfg.to_dict())
    print(f"synth: {len(ds.images)} images, {len(ds.crossings)} crossings, "
          f"{len(ds.annotations)} boxes -> {out}")
    return 0


def cmd_match(args) -> int:
    run_cfg = load_run_config(args.config)
    prefer = float(_resolve(run_cfg, "match", "prefer_radius", args.prefer_radius, 30.0))
    max_r = float(_resolve(run_cfg, "match", "max_radius", args.max_radius, 100.0))
    images = io.read_images_csv(Path(args.images))
    crossings = io.read_crossings_csv(Path(args.crossings))
    out = _prepare_out_dir(args)

    outcome = match_images(images, crossings, prefer_radius=prefer, max_radius=max_r)
    io.write_matches_csv(out / "matches.csv", outcome, crossings)
    io.write_rejected_csv(out / "rejected.csv", outcome.rejected)
    io.write_json(out / "match_report.json", {
        "n_images": len(images),
        "n_matched": len(outcome.matches),
        "n_rejected": len(outcome.rejected),
        "coverage_within_prefer_radius": outcome.coverage,
        "prefer_radius_m": prefer,
        "max_radius_m": max_r,
    })
    _echo_config(out, "match", {"images": args.images, "crossings": args.crossings,
                                "prefer_radius": prefer, "max_radius": max_r})
    cov = "n/a" if outcome.coverage is None else f"{outcome.coverage:.3f}"
    print(f"match: {len(outcome.matches)} matched, {len(outcome.rejected)} rejected, "
          f"coverage {cov} -> {out}")
    return 0


def cmd_split(args) -> int:
    run_cfg = load_run_config(args.config)
    k = int(_resolve(run_cfg, "split", "k", args.k, 2))
    seed = int(args.seed if args.seed is not None else 0)
    images, annotations, _ = io.read_annotations_json(Path(args.annotations))
    labels = io.read_labels_csv(Path(args.labels))
    out = _prepare_out_dir(args)

    assignment = stratified_split(images, annotations, labels, k=k, seed=seed)
    io.write_split_csv(out / "split.csv", assignment.assignments)
    _echo_config(out, "split", {"annotations": args.annotations, "labels": args.labels,
                                "k": k, "seed": seed})
    sizes = {f: len(assignment.fold_ids(f)) for f in assignment.folds()}
    print(f"split: {sizes} -> {out}")
    return 0


def cmd_stats(args) -> int:
    images, annotations, _ = io.read_annotations_json(Path(args.annotations))
    labels = io.read_labels_csv(Path(args.labels))
    out = _prepare_out_dir(args)

    report = dataset_stats(images, annotations, labels)
    io.write_json(out / "stats.json", report.to_dict())
    for name, hist, title in (
        ("boxes_per_image", report.boxes_per_image_hist, "Boxes per image"),
        ("relative_area", report.relative_area_hist, "Relative box area"),
        ("collisions", report.collisions_hist, "Collisions per image"),
    ):
        io.write_histogram_csv(out / f"hist_{name}.csv", hist)
        io.write_histogram_svg(out / f"hist_{name}.svg", hist, title)
    _echo_config(out, "stats", {"annotations": args.annotations, "labels": args.labels})
    print(f"stats: {report.total_boxes} boxes over {len(images)} images -> {out}")
    return 0


def cmd_counts(args) -> int:
    run_cfg = load_run_config(args.config)
    thr = float(_resolve(run_cfg, "baseline", "score_threshold", args.score_threshold, 0.5))
    images, annotations, registry = io.read_annotations_json(Path(args.annotations))
    out = _prepare_out_dir(args)
    image_ids = [im.image_id for im in images]

    if args.detections:
        boxes = io.read_detections_json(Path(args.detections))
        mat = count_matrix(image_ids, boxes, len(registry), score_threshold=thr)
        source = "detections"
    else:
        mat = count_matrix(image_ids, annotations, len(registry))
        source = "ground_truth"

    includes_coords = False
    bounds = None
    if args.coords_from:
        located = {im.image_id: im.location for im in io.read_images_csv(Path(args.coords_from))}
        missing = [i for i in image_ids if i not in located]
        if missing:
            raise ValidationError(f"{args.coords_from}: no location for images {missing[:5]}")
        lats = np.array([located[i].lat for i in image_ids])
        lons = np.array([located[i].lon for i in image_ids])
        lat_span = max(lats.max() - lats.min(), 1e-12)
        lon_span = max(lons.max() - lons.min(), 1e-12)
        coords = np.column_stack([(lats - lats.min()) / lat_span,
                                  (lons - lons.min()) / lon_span])
        mat = np.column_stack([mat, coords])
        includes_coords = True
        bounds = {"lat_min": float(lats.min()), "lat_max": float(lats.max()),
                  "lon_min": float(lons.min()), "lon_max": float(lons.max())}

    io.write_counts_csv(out / "counts.csv", image_ids, mat, includes_coords)
    _echo_config(out, "counts", {"annotations": args.annotations,
                                 "detections": args.detections,
                                 "coords_from": args.coords_from,
                                 "score_threshold": thr if args.detections else None,
                                 "source": source, "coord_bounds": bounds})
    print(f"counts: {mat.shape[0]} rows x {mat.shape[1]} features ({source}) -> {out}")
    return 0


def cmd_eval_det(args) -> int:
    run_cfg = load_run_config(args.config)
    max_dets = int(_resolve(run_cfg, "metrics", "max_detections_per_image",
                            args.max_dets, 100))
    images, gts, registry = io.read_annotations_json(Path(args.annotations))
    dets = io.read_detections_json(Path(args.detections))
    out = _prepare_out_dir(args)

    report = evaluate_detection(gts, dets, images,
                                EvalConfig(max_detections_per_image=max_dets),
                                categories=list(registry.ids))
    payload = report.to_dict()
    payload["name"] = args.name
    io.write_json(out / "ap_report.json", payload)
    _echo_config(out, "eval-det", {"annotations": args.annotations,
                                   "detections": args.detections,
                                   "max_detections_per_image": max_dets,
                                   "name": args.name})
    ap = "n/a" if report.ap is None else f"{report.ap:.4f}"
    print(f"eval-det [{args.name}]: AP {ap} -> {out}")
    return 0


def cmd_eval_reg(args) -> int:
    labels = io.read_labels_csv(Path(args.labels))
    preds = io.read_predictions_csv(Path(args.predictions))
    missing = sorted(set(labels) - set(preds))
    if missing:
        raise ValidationError(f"{args.predictions}: missing predictions for {missing[:5]}")
    out = _prepare_out_dir(args)

    ids = sorted(labels)
    pairs = RegressionPairSet(
        image_ids=ids,
        y_true=np.array([labels[i] for i in ids], dtype=float),
        y_pred=np.array([preds[i] for i in ids], dtype=float),
    )
    payload = {"name": args.name, "rmse": rmse(pairs), "wmae": wmae(pairs), "n": len(pairs)}
    io.write_json(out / "reg_report.json", payload)
    _echo_config(out, "eval-reg", {"labels": args.labels, "predictions": args.predictions,
                                   "name": args.name})
    print(f"eval-reg [{args.name}]: rmse {payload['rmse']:.4f} wmae {payload['wmae']:.4f} "
          f"n {payload['n']} -> {out}")
    return 0


def cmd_baseline(args) -> int:
    run_cfg = load_run_config(args.config)
    out = _prepare_out_dir(args)
    train_labels = io.read_labels_csv(Path(args.train_labels))

    if args.kind == "constant":
        model = fit_constant(list(train_labels.values()), args.statistic)
        eval_labels = io.read_labels_csv(Path(args.eval_labels))
        ids = sorted(eval_labels)
        preds = model.predict(len(ids))
        io.write_json(out / "model.json", model.to_dict())
        io.write_predictions_csv(out / "predictions.csv", ids, preds)
        resolved = {"kind": "constant", "statistic": args.statistic,
                    "train_labels": args.train_labels, "eval_labels": args.eval_labels,
                    "fitted_value": model.value}
    else:
        l2 = float(_resolve(run_cfg, "baseline", "l2", args.l2, 1.0))
        tr_ids, tr_mat, tr_coords = io.read_counts_csv(Path(args.train_counts))
        ev_ids, ev_mat, ev_coords = io.read_counts_csv(Path(args.eval_counts))
        if tr_coords != ev_coords or tr_mat.shape[1] != ev_mat.shape[1]:
            raise ValidationError("train and eval count files must share the same feature layout")
        missing = sorted(set(tr_ids) - set(train_labels))
        if missing:
            raise ValidationError(f"{args.train_labels}: no label for {missing[:5]}")
        y = np.array([train_labels[i] for i in tr_ids], dtype=float)
        model = fit_count_regressor(CountFeatures(tr_ids, tr_mat, tr_coords), y, l2=l2)
        preds = predict(model, ev_mat)
        io.write_model_json(out / "model.json", model)
        io.write_predictions_csv(out / "predictions.csv", ev_ids, preds)
        resolved = {"kind": "ridge", "l2": model.l2, "ridge_fallback": model.ridge_fallback,
                    "train_counts": args.train_counts, "train_labels": args.train_labels,
                    "eval_counts": args.eval_counts}

    _echo_config(out, "baseline", resolved)
    print(f"baseline [{args.kind}]: predictions for "
          f"{len(preds) if hasattr(preds, '__len__') else 1} images -> {out}")
    return 0


def cmd_train_pcpm(args) -> int:
    run_cfg = load_run_config(args.config)
    pcpm_values = dict(run_cfg.get("pcpm", {}))
    if args.variant is not None:
        pcpm_values["variant"] = args.variant
    if "mlp_hidden" in pcpm_values:
        pcpm_values["mlp_hidden"] = tuple(pcpm_values["mlp_hidden"])
    train_values = dict(run_cfg.get("train", {}))
    if args.seed is not None:
        train_values["seed"] = args.seed
    if args.epochs is not None:
        train_values["epochs"] = args.epochs

    ids, embs = io.load_embeddings(Path(args.manifest))
    val_count = args.val_count or 0
    if val_count >= len(embs):
        raise ValidationError(f"--val-count {val_count} leaves no training data")
    train_embs = embs[: len(embs) - val_count] if val_count else embs

    pcfg = PCPMConfig(**pcpm_values)
    tcfg = TrainConfig(**train_values)
    out = _prepare_out_dir(args)

    params, history = train(train_embs, pcfg, tcfg)
    checkpoint = params_to_dict(params, pcfg)
    checkpoint["train_config"] = {f.name: getattr(tcfg, f.name)
                                  for f in dataclass_fields(TrainConfig)}
    checkpoint["history"] = history
    io.write_json(out / "checkpoint.json", checkpoint)
    _echo_config(out, "train-pcpm", {
        "manifest": args.manifest, "variant": pcfg.variant, "val_count": val_count,
        "n_train": len(train_embs),
        "pcpm": checkpoint["config"], "train": checkpoint["train_config"],
    })
    print(f"train-pcpm [{pcfg.variant}]: loss {history[0]:.4f} -> {history[-1]:.4f} "
          f"over {tcfg.epochs} epochs -> {out}")
    return 0


def cmd_predict_pcpm(args) -> int:
    ids, embs = io.load_embeddings(Path(args.manifest))
    payload = io.read_json(Path(args.checkpoint))
    params, pcfg = params_from_dict(payload)
    out = _prepare_out_dir(args)

    preds = predict_batch(params, pcfg, embs, clamp=not args.no_clamp)
    io.write_predictions_csv(out / "predictions.csv", ids, preds)
    _echo_config(out, "predict-pcpm", {"manifest": args.manifest,
                                       "checkpoint": args.checkpoint,
                                       "clamp": not args.no_clamp,
                                       "variant": pcfg.variant})
    print(f"predict-pcpm [{pcfg.variant}]: {len(ids)} predictions -> {out}")
    return 0


def cmd_report(args) -> int:
    out = _prepare_out_dir(args)
    columns = ["name", "rmse", "wmae", "n", "ap", "ap50", "ap75",
               "ap_small", "ap_medium", "ap_large"]
    rows = []
    for path in sorted(Path(args.inputs).glob("**/*.json")):
        payload = io.read_json(path)
        if not isinstance(payload, dict):
            continue
        if "rmse" in payload or "ap" in payload:
            name = payload.get("name") or path.stem
            rows.append([payload.get(c) if c != "name" else name for c in columns])
    rows.sort(key=lambda r: str(r[0]))
    formatted = [["" if v is None else v for v in row] for row in rows]
    io.write_csv(out / "report.csv", columns, formatted)
    _echo_config(out, "report", {"inputs": args.inputs, "n_reports": len(rows)})
    print(f"report: {len(rows)} result rows -> {out}")
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streetstudy",
        description="Street-scene collision benchmark pipelines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out-dir", required=True, help="output directory")
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="random seed override")

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    common(p)
    p.add_argument("--n-images", type=int, default=None)
    p.add_argument("--n-crossings", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", help="match images to nearest crossing points")
    common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--crossings", required=True)
    p.add_argument("--prefer-radius", type=float, default=None)
    p.add_argument("--max-radius", type=float, default=None)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("split", help="distribution-preserving k-fold split")
    common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("stats", help="dataset statistics report")
    common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("counts", help="per-image class count features")
    common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--detections", default=None,
                   help="count detections instead of ground truth")
    p.add_argument("--score-threshold", type=float, default=None)
    p.add_argument("--coords-from", default=None,
                   help="images CSV supplying coordinates to append (normalized)")
    p.set_defaults(func=cmd_counts)

    p = sub.add_parser("eval-det", help="detection AP evaluation")
    common(p)
    p.add_argument("--annotations", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--max-dets", type=int, default=None)
    p.add_argument("--name", default="detector")
    p.set_defaults(func=cmd_eval_det)

    p = sub.add_parser("eval-reg", help="collision regression metrics")
    common(p)
    p.add_argument("--labels", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--name", default="model")
    p.set_defaults(func=cmd_eval_reg)

    p = sub.add_parser("baseline", help="fit reference predictors")
    common(p)
    p.add_argument("--kind", choices=["constant", "ridge"], required=True)
    p.add_argument("--statistic", choices=list(STATISTICS), default="mean")
    p.add_argument("--train-labels", required=True)
    p.add_argument("--eval-labels", default=None,
                   help="labels CSV naming the images to predict (constant)")
    p.add_argument("--train-counts", default=None)
    p.add_argument("--eval-counts", default=None)
    p.add_argument("--l2", type=float, default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("train-pcpm", help="train the collision prediction head")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", default=None,
                   choices=["backbone_only", "linear", "self_att", "self_att_visual"])
    p.add_argument("--val-count", type=int, default=0,
                   help="hold out the last N manifest rows from training")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train_pcpm)

    p = sub.add_parser("predict-pcpm", help="predict with a trained head")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--no-clamp", action="store_true",
                   help="report raw (possibly negative) predictions")
    p.set_defaults(func=cmd_predict_pcpm)

    p = sub.add_parser("report", help="aggregate metric JSONs into one CSV")
    common(p)
    p.add_argument("--inputs", required=True, help="directory scanned for report JSONs")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
