"""Command-line entry point: synthesize, split, train, gridsearch, eval, predict.

Every command reads one JSON run config (``--config``) and writes only under
the configured output directory. Exit codes: 0 success, 2 configuration
error, 3 input/output error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import report
from .config import ConfigError, RunConfig
from .dataset import (DatasetError, SplitSpec, generate_synthetic, load_dataset, make_gzsl_val_split,
                      normalize_attributes, read_feature_matrix, write_dataset)
from .evaluation import (eval_gosr, eval_gzsl, gosr_metrics, grid_search, gzsl_metrics,
                         semantic_recognition)
from .inference import UNKNOWN, describe_unknown, predict_gosr_batch, predict_gzsl_batch, score_batch
from .model import ModelError, load_params, save_params
from .trainer import TrainingError, train, write_log

logger = logging.getLogger("protogate")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _strict(obj):
    # strict JSON has no inf/nan: infinities become "inf"/"-inf" (float() reads them back), nan becomes null
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _strict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_strict(v) for v in obj]
    return obj


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_strict(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _emit(obj) -> None:
    print(json.dumps(_strict(obj), sort_keys=True, allow_nan=False))


def _dataset(cfg: RunConfig, attr_mode: str | None = None):
    ds = load_dataset(cfg.path("manifest", "dataset/manifest.json"))
    mode = attr_mode or cfg.raw["attr_preprocess"]
    if mode == "center" and ds.attr_table.centered:
        return ds
    return normalize_attributes(ds, mode)


def _split(cfg: RunConfig, ds) -> SplitSpec:
    path = cfg.path("split", "split.json")
    if not path.exists():
        raise FileNotFoundError(f"missing split file: {path} (run `split` first)")
    with open(path, encoding="utf-8") as fh:
        sp = SplitSpec.from_json(json.load(fh))
    sp.validate(ds)
    return sp


def _checkpoint(cfg: RunConfig):
    path = cfg.path("checkpoint", "model.json")
    params = load_params(path)
    with open(path, encoding="utf-8") as fh:
        echoed = json.load(fh).get("config", {})
    return params, echoed.get("attr_preprocess", cfg.raw["attr_preprocess"])


# ---------------------------------------------------------------------------
# commands

def cmd_synthesize(cfg: RunConfig, args) -> dict:
    ds = generate_synthetic(cfg.synthetic(), seed=cfg.seed)
    manifest = write_dataset(ds, cfg.out / "dataset")
    with open(manifest, encoding="utf-8") as fh:
        man = json.load(fh)
    man["config"] = cfg.to_json()
    _dump(man, manifest)
    return {"manifest": str(manifest), "n": ds.n, "seen_classes": list(ds.seen_classes),
            "unseen_classes": list(ds.unseen_classes), "val_classes": list(ds.val_classes)}


def cmd_split(cfg: RunConfig, args) -> dict:
    ds = _dataset(cfg)
    s = cfg.raw["split"]
    try:
        sp = make_gzsl_val_split(ds, s["val_class_fraction"], s["holdout_fraction"], seed=cfg.seed,
                                 test_fraction=s["test_fraction"])
    except DatasetError as exc:
        raise ConfigError(f"[split] {exc}") from None
    path = cfg.out / "split.json"
    _dump({**sp.to_json(), "config": cfg.to_json()}, path)
    return {"split": str(path), **{k: len(v) for k, v in sp.to_json().items() if k.endswith("indices")}}


def cmd_train(cfg: RunConfig, args) -> dict:
    ds = _dataset(cfg)
    sp = _split(cfg, ds)
    hp, tc = cfg.hyperparams(), cfg.train_config()
    ckpt_dir = cfg.out / "checkpoints"

    def checkpoint(epoch, params):
        save_params(params, ckpt_dir / f"epoch_{epoch:05d}.json", {"config": _strict(cfg.to_json()), "epoch": epoch})

    records = []
    params, rep = train(ds, sp.train_indices, hp, tc, classes=ds.seen_classes,
                        checkpoint=checkpoint, log=records.append)
    save_params(params, cfg.out / "model.json", {"config": _strict(cfg.to_json()), "epoch": tc.epochs})
    write_log(records, cfg.out / "train_log.jsonl")
    if cfg.raw["figures"]:
        report.plot_training_loss(records, cfg.out / "figures" / "train_loss.png")
    logger.info("trained %d epochs in %.2fs", tc.epochs, rep.wall_time)
    return {"checkpoint": str(cfg.out / "model.json"), "epochs": tc.epochs,
            "loss_total": rep.loss_total[-1], "loss_visual": rep.loss_visual[-1],
            "loss_semantic": rep.loss_semantic[-1]}


def cmd_gridsearch(cfg: RunConfig, args) -> dict:
    ds = _dataset(cfg)
    sp = _split(cfg, ds)
    objective = cfg.objective()
    res = grid_search(ds, sp.validation(), cfg.hyperparams(), cfg.grid(), cfg.train_config(),
                      objective, jobs=int(cfg.raw["jobs"]))
    out = cfg.out / "gridsearch"
    res.write_csv(out / "scores.csv")
    best = cfg.to_json()
    best["hyperparams"]["lambda_pl"] = res.best_hp.lambda_pl
    best["hyperparams"]["proto_dim"] = res.best_hp.proto_dim
    best["thresholds"]["delta_g" if objective == "gzsl_h" else "delta_o"] = res.best_threshold
    best["mode"] = "gzsl" if objective == "gzsl_h" else "gosr"
    row = res.best_row()
    best["result"] = {"objective": objective, "validation": row}
    _dump(best, out / "best_config.json")
    if cfg.raw["figures"]:
        report.plot_threshold_sweep(res.columns, res.table, row, out / "threshold_sweep.png")
    return {"objective": objective, "best": row, "best_config": str(out / "best_config.json")}


def _metrics_from_predictions(cfg: RunConfig, ds, path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"missing predictions file: {path}")
    idx, domains, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                idx.append(int(rec["index"]))
                domains.append(rec["domain"])
                labels.append(rec["label"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: line {lineno}: bad prediction record ({exc})") from None
    if any(i < 0 or i >= ds.n for i in idx):
        raise DatasetError(f"{path}: prediction index out of range for N={ds.n}")
    y = ds.labels_at(idx)
    if cfg.mode == "gzsl":
        m = gzsl_metrics(y, domains, labels, ds.seen_classes, ds.unseen_classes)
    else:
        m = gosr_metrics(y, domains, labels, ds.seen_classes, ds.unseen_classes)
    return {"mode": cfg.mode, "source": "predictions", "n": len(idx), **m.to_json()}


def _threshold_fields(delta: float) -> dict:
    # an infinite threshold means the gate accepts everything
    if np.isinf(delta):
        return {"threshold": None, "gate_disabled": True}
    return {"threshold": delta, "gate_disabled": False}


def cmd_eval(cfg: RunConfig, args) -> dict:
    out_path = cfg.out / "metrics.json"
    pred_file = args.predictions or cfg.raw["paths"]["predictions"]
    if pred_file:
        ds = _dataset(cfg)
        metrics = _metrics_from_predictions(cfg, ds, Path(pred_file))
        _dump({**metrics, "config": cfg.to_json()}, out_path)
        return metrics
    params, attr_mode = _checkpoint(cfg)
    ds = _dataset(cfg, attr_mode)
    sp = _split(cfg, ds)
    params.check_compatible(ds.dim, ds.attr_table.dim)
    th = cfg.thresholds()
    idx = np.asarray(sp.test_indices, dtype=np.int64)
    if cfg.mode == "gzsl":
        delta = th.delta_g
        m = eval_gzsl(ds, idx, params, delta)
        metrics = {"mode": "gzsl", **_threshold_fields(delta), "n": len(idx), **m.to_json()}
    else:
        delta = th.delta_o
        m = eval_gosr(ds, idx, params, delta)
        rate, n_rej = semantic_recognition(ds, idx, params, delta)
        metrics = {"mode": "gosr", **_threshold_fields(delta), "n": len(idx), **m.to_json(),
                   "semantic_recognition": None if np.isnan(rate) else rate,
                   "rejected_unknown": n_rej}
    _dump({**metrics, "config": cfg.to_json()}, out_path)
    if cfg.raw["figures"]:
        s = score_batch(ds.features[idx], params, ds.attr_table)
        y = ds.labels_at(idx)
        seen = np.isin(y, list(params.seen_classes))
        report.plot_entropy_histogram(s.entropy[seen], s.entropy[~seen], delta,
                                      cfg.out / "figures" / f"entropy_{cfg.mode}.png",
                                      "unseen" if cfg.mode == "gzsl" else "unknown")
    return metrics


def cmd_predict(cfg: RunConfig, args) -> list[dict]:
    params, attr_mode = _checkpoint(cfg)
    ds = _dataset(cfg, attr_mode)
    params.check_compatible(ds.dim, ds.attr_table.dim)
    src = args.input or cfg.raw["paths"]["input"]
    if not src:
        raise ConfigError("predict needs an input file (--input or paths.input)")
    X = read_feature_matrix(src, ",", width=params.input_dim)
    th = cfg.thresholds()
    opts = cfg.raw["predict"]
    if cfg.mode == "gzsl":
        preds = predict_gzsl_batch(X, params, ds.attr_table, ds.unseen_classes, th.delta_g)
        records = []
        for i, p in enumerate(preds):
            rec = p.to_record(i)
            rec.pop("semantic_vector", None)
            records.append(rec)
    else:
        preds = predict_gosr_batch(X, params, ds.attr_table, th.delta_o, opts["semantic_for_all"])
        t = ds.attr_table
        # the readout is signed, so shift raw attributes onto the seen-class mean
        shift = np.zeros(t.dim) if t.centered else t.rows(ds.seen_classes).mean(axis=0)
        records = []
        for i, p in enumerate(preds):
            rec = p.to_record(i)
            if p.domain == UNKNOWN and opts["describe_unknown"]:
                desc = describe_unknown(p.semantic_vector - shift, t.names, centered=True)
                rec["attributes"] = [{"name": n, "value": v, "reading": r} for n, v, r in desc]
            records.append(rec)
    path = cfg.out / "predictions.jsonl"
    _dump({"config": cfg.to_json(), "input": str(src), "n": len(records)}, cfg.out / "predictions.config.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


COMMANDS = {
    "synthesize": (cmd_synthesize, "generate a synthetic dataset under <out>/dataset"),
    "split": (cmd_split, "build train/test and fitting/G-ZSL-val index sets"),
    "train": (cmd_train, "fit both heads and the prototypes on the training split"),
    "gridsearch": (cmd_gridsearch, "select lambda, t and threshold on the G-ZSL-val split"),
    "eval": (cmd_eval, "score the test split (or a predictions file) and write metrics.json"),
    "predict": (cmd_predict, "gate and label feature rows from an input file"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protogate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--mode", choices=("gzsl", "gosr"), help="override the config mode")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--jobs", type=int, help="worker processes for grid search")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key, value parsed as JSON")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--predictions", help="line-JSON predictions to score instead of a model")
        if name == "predict":
            p.add_argument("--input", help="delimited feature rows to predict")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    func = COMMANDS[args.command][0]
    try:
        cfg = RunConfig.load(args.config, {"seed": args.seed, "mode": args.mode, "out": args.out,
                                           "jobs": args.jobs}, args.set)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            result = func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError, ModelError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if isinstance(result, list):
        for rec in result:
            _emit(rec)
    else:
        _emit(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
