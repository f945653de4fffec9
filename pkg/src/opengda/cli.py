"""Command-line entry point: generate, train, evaluate, ablate, inspect."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import model as gm
from .graph import (LabeledGraph, load_graph, load_labels, load_pair, make_pair, relabel_openset,
                    write_graph)
from .metrics import evaluate_predictions
from .reprogram import commit_flips
from .synthetic import GeneratorSpec, generate_raw, generate_synthetic_pair
from .train import TrainConfig, TrainingAborted, final_report, run_training

log = logging.getLogger("opengda")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2
ABLATE_AXES = ("rho", "budget", "known_count", "variant")
_FLAG_KEYS = {"variant": "variant", "rho": "rho", "budget_ratio": "budget_ratio", "lam": "lam",
              "tau": "tau", "epochs": "epochs"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# config handling

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def merge_flags(config: dict, args) -> dict:
    """Flags override config keys; the result is the effective config."""
    cfg = copy.deepcopy(config)
    training = cfg.setdefault("training", {})
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            training[key] = value
    if getattr(args, "seeds", None):
        cfg["seeds"] = parse_seeds(args.seeds)
    elif getattr(args, "seed", None) is not None:
        cfg["seeds"] = [args.seed]
    cfg.setdefault("seeds", [training.get("seed", 0)])
    src, tgt = getattr(args, "dataset_src", None), getattr(args, "dataset_tgt", None)
    if (src is None) != (tgt is None):
        raise UsageError("--dataset-src and --dataset-tgt must be given together")
    if src is not None:
        dataset = cfg.setdefault("dataset", {})
        dataset.pop("path", None)
        dataset["source"], dataset["target"] = str(src), str(tgt)
        cfg.pop("generator", None)
    if "dataset" not in cfg and "generator" not in cfg:
        raise UsageError("config needs a 'dataset' or 'generator' section (or --dataset-src/--dataset-tgt)")
    return cfg


def parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--seeds expects integers, got {text!r}") from None


def training_config(cfg: dict, seed: int) -> TrainConfig:
    try:
        tc = TrainConfig.from_dict({**cfg.get("training", {}), "seed": seed})
        tc.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return tc


def generator_spec(cfg: dict) -> GeneratorSpec:
    try:
        spec = GeneratorSpec.from_dict(cfg["generator"])
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid generator spec: {exc}") from None
    return spec


def build_pair(cfg: dict, seed: int):
    """DomainPair from a dataset section, or freshly generated from a generator section."""
    if "generator" in cfg:
        gen_seed = cfg["generator"].get("seed", seed) if isinstance(cfg["generator"], dict) else seed
        spec_dict = {k: v for k, v in cfg["generator"].items() if k != "seed"}
        return generate_synthetic_pair(generator_spec({"generator": spec_dict}), gen_seed)
    ds = cfg["dataset"]
    row_norm = bool(ds.get("row_normalize", False))
    try:
        if "path" in ds:
            return load_pair(ds["path"], ds.get("known_classes"), ds.get("known_count"), row_norm)
        src, tgt = load_graph(ds["source"], row_norm), load_graph(ds["target"], row_norm)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset file not found: {exc.filename}") from None
    classes = max(src.class_count, tgt.class_count, int(ds.get("class_count", 0)))
    known = ds.get("known_classes")
    if known is None:
        if "known_count" not in ds:
            raise UsageError("dataset section needs known_classes or known_count")
        known = list(range(int(ds["known_count"])))
    src = LabeledGraph(src.adjacency, src.features, src.labels, classes)
    tgt = LabeledGraph(tgt.adjacency, tgt.features, tgt.labels, classes)
    return make_pair(src, tgt, known)


def dataset_files(cfg: dict) -> list[Path]:
    ds = cfg.get("dataset")
    if not ds:
        return []
    roots = [Path(ds["path"]) / "source", Path(ds["path"]) / "target"] if "path" in ds else \
        [Path(ds["source"]), Path(ds["target"])]
    files = [r / name for r in roots for name in ("edges.txt", "features.txt", "labels.txt")]
    if "path" in ds and (Path(ds["path"]) / "meta.json").exists():
        files.append(Path(ds["path"]) / "meta.json")
    return files


def content_hash(cfg: dict) -> str:
    h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode())
    for f in dataset_files(cfg):
        if f.exists():
            h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, cfg: dict, extra: dict | None = None) -> None:
    manifest = {
        "config": cfg,
        "seeds": cfg.get("seeds", []),
        "dataset_paths": [str(p) for p in dataset_files(cfg)],
        "output_dir": str(out),
        "content_hash": content_hash(cfg),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


# commands

def cmd_generate(args) -> int:
    config = load_config(args.config)
    spec_dict = config.get("generator", config)
    spec = generator_spec({"generator": spec_dict})
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    src, tgt = generate_raw(spec, seed)
    write_graph(out / "source", src)
    write_graph(out / "target", tgt)
    meta = {"class_count": spec.class_count, "known_count": spec.known_count, "seed": seed,
            "generator": spec.to_dict()}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_manifest(out, {"generator": spec.to_dict(), "seeds": [seed]})
    print(f"wrote {out}/source and {out}/target ({spec.n_source}+{spec.n_target} nodes)")
    return EXIT_OK


def _train_one(cfg: dict, seed: int, out: str) -> dict:
    pair = build_pair(cfg, seed)
    result = run_training(pair, training_config(cfg, seed), out)
    return json.loads(result.report.to_json())


def _run_seeds(cfg: dict, out: Path, workers: int) -> list[dict]:
    seeds = cfg["seeds"]
    dirs = [str(out / f"seed_{s}") for s in seeds]
    for s in seeds:
        training_config(cfg, s)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_one, [cfg] * len(seeds), seeds, dirs))
    return [_train_one(cfg, s, d) for s, d in zip(seeds, dirs)]


def _write_summary(path: Path, seeds, reports) -> None:
    cols = ("acc", "acc_tk", "acc_tu", "h_score", "mmd_before", "mmd_after")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("seed", *cols))
        for s, r in zip(seeds, reports):
            w.writerow((s, *(r[c] for c in cols)))
        for name, fn in (("mean", np.mean), ("std", np.std)):
            w.writerow((name, *(float(fn([r[c] if r[c] is not None else np.nan for r in reports])) for c in cols)))


def cmd_train(args) -> int:
    cfg = merge_flags(load_config(args.config), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg)
    reports = _run_seeds(cfg, out, args.workers)
    _write_summary(out / "summary.csv", cfg["seeds"], reports)
    h_mean, h_std = _mean_std([r["h_score"] for r in reports])
    a_mean, a_std = _mean_std([r["acc"] for r in reports])
    print(f"seeds={cfg['seeds']} H={h_mean:.4f}±{h_std:.4f} acc={a_mean:.4f}±{a_std:.4f}")
    return EXIT_OK


def _find_manifest(path: Path) -> Path | None:
    for parent in (path.parent, path.parent.parent):
        if (parent / "manifest.json").exists():
            return parent / "manifest.json"
    return None


def cmd_evaluate(args) -> int:
    if args.predictions is not None:
        if args.labels is None:
            raise UsageError("--predictions needs --labels")
        pred, labels = _read_labels(args.predictions), _read_labels(args.labels)
        k = args.known_count if args.known_count is not None else int(labels.max())
        report = evaluate_predictions(pred, labels, k)
        return _emit(report.to_json(), args.out)
    if args.checkpoint is None:
        raise UsageError("evaluate needs --checkpoint (or --predictions with --labels)")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, extra = gm.load_checkpoint(ckpt)
    if args.config is not None or args.dataset_src is not None:
        base = load_config(args.config)
    else:
        manifest = _find_manifest(ckpt)
        if manifest is None:
            raise UsageError("no --config given and no manifest.json next to the checkpoint")
        base = json.loads(manifest.read_text())["config"]
    base.pop("seeds", None)
    args.seeds = None
    args.seed = model.seed
    cfg = merge_flags(base, args)
    pair = build_pair(cfg, model.seed)
    if args.labels is not None:
        raw = _read_labels(args.labels)
        if len(raw) != pair.target.n:
            raise UsageError(f"label file has {len(raw)} rows, target has {pair.target.n} nodes")
        known = cfg.get("dataset", {}).get("known_classes") or list(range(pair.known_count))
        raw_graph = LabeledGraph(pair.target.adjacency, pair.target.features, raw,
                                 max(pair.target.class_count, int(raw.max()) + 1))
        pair = type(pair)(pair.source, relabel_openset(raw_graph, known), pair.known_count)
    if (pair.target.labels < 0).any():
        raise UsageError("target labels are missing; pass --labels")
    if model.dims[0] != pair.target.features.shape[1]:
        raise UsageError(f"checkpoint expects {model.dims[0]} features, dataset has {pair.target.features.shape[1]}")
    train_cfg = TrainConfig.from_dict(model.meta["config"])
    flips = [tuple(int(v) for v in p) for p in extra.get("flips", np.zeros((0, 2), dtype=np.int64))]
    adj = commit_flips(pair.target.adjacency, flips) if flips else pair.target.adjacency
    report, *_ = final_report(pair, train_cfg, model, adj, extra["feature_delta"], model.meta["best_epoch"], len(flips))
    return _emit(report.to_json(), args.out)


def _read_labels(path) -> np.ndarray:
    try:
        return load_labels(path)
    except FileNotFoundError:
        raise UsageError(f"label file not found: {path}") from None


def _emit(text: str, out) -> int:
    print(text)
    if out is not None:
        Path(out).write_text(text + "\n")
    return EXIT_OK


def _axis_values(cfg: dict, args) -> tuple[str, list]:
    section = cfg.get("ablate", {})
    axis = args.axis or section.get("axis")
    if axis not in ABLATE_AXES:
        raise UsageError(f"unknown ablation axis {axis!r}; expected one of {ABLATE_AXES}")
    values = section.get("values") if args.values is None else _parse_values(args.values, axis)
    if not values:
        raise UsageError("ablation needs axis values (config 'ablate.values' or --values)")
    return axis, values


def _parse_values(text: str, axis: str) -> list:
    parts = [p for p in text.replace(",", " ").split() if p]
    if axis == "variant":
        return parts
    try:
        return [int(p) if axis in ("budget", "known_count") else float(p) for p in parts]
    except ValueError:
        raise UsageError(f"--values for axis {axis} must be numeric") from None


def _arm_config(cfg: dict, axis: str, value) -> dict:
    arm = copy.deepcopy(cfg)
    training = arm.setdefault("training", {})
    if axis == "rho":
        training["rho"] = float(value)
    elif axis == "budget":
        training["budget"] = int(value)
    elif axis == "variant":
        training["variant"] = str(value)
    elif "generator" in arm:
        arm["generator"]["known_count"] = int(value)
    else:
        arm["dataset"].pop("known_classes", None)
        arm["dataset"]["known_count"] = int(value)
    return arm


def cmd_ablate(args) -> int:
    cfg = merge_flags(load_config(args.config), args)
    axis, values = _axis_values(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, {"ablate": {"axis": axis, "values": values}})
    rows = []
    for value in values:
        arm = _arm_config(cfg, axis, value)
        reports = _run_seeds(arm, out / f"{axis}_{value}", args.workers)
        h_mean, h_std = _mean_std([r["h_score"] for r in reports])
        a_mean, a_std = _mean_std([r["acc"] for r in reports])
        rows.append((value, h_mean, h_std, a_mean, a_std))
        print(f"{axis}={value} H={h_mean:.4f}±{h_std:.4f} acc={a_mean:.4f}±{a_std:.4f}")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow((axis, "mean_h", "std_h", "mean_acc", "std_acc"))
        w.writerows(rows)
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    model, extra = gm.load_checkpoint(path)
    print(f"dims={model.dims} known_count={model.known_count} seed={model.seed}")
    for i, m in enumerate(model.masks):
        print(f"layer {i}: mask zero fraction {float((m == 0).mean()):.4f} ({int((m == 0).sum())}/{m.size})")
    if "flips" in extra:
        print(f"committed edge flips: {len(extra['flips'])}")
    if "feature_delta" in extra:
        print(f"feature delta norm: {float(np.linalg.norm(extra['feature_delta'])):.6g}")
    if model.meta:
        print("meta: " + json.dumps({k: v for k, v in model.meta.items() if k != "config"}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opengda", description="Open-set graph domain adaptation by reprogramming.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(p):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--variant", choices=("full", "threshold", "no_mr", "no_gr", "no_adapt"))
        p.add_argument("--rho", type=float)
        p.add_argument("--budget-ratio", dest="budget_ratio", type=float)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--dataset-src", dest="dataset_src")
        p.add_argument("--dataset-tgt", dest="dataset_tgt")

    p = sub.add_parser("generate", help="write a synthetic source/target dataset")
    p.add_argument("--config", required=True, help="generator spec JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train over one or more seeds")
    run_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on its target graph")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--labels", help="target label file with original class ids")
    p.add_argument("--predictions", help="score a prediction file against --labels instead")
    p.add_argument("--known-count", dest="known_count", type=int)
    p.add_argument("--dataset-src", dest="dataset_src")
    p.add_argument("--dataset-tgt", dest="dataset_tgt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep one axis over seeds")
    run_flags(p)
    p.add_argument("--axis")
    p.add_argument("--values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="print checkpoint contents")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"opengda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"opengda: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ValueError, OSError) as exc:
        print(f"opengda: error: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
