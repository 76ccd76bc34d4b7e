"""Multimodal intent recognition on synthetic data: generate, train, evaluate, analyse.

Subcommands: ``gen``, ``train``, ``eval``, ``ablate``, ``attn-stats``,
``dump-embeddings`` and ``rerun``.  Every command writes plain tab-separated
outputs plus a ``manifest.json`` that is enough to repeat the job.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import (PRESETS, SPLITS, DataFormatError, DatasetSpec, StratificationError, generate,
                   load_dataset, save_dataset)
from .losses import LossBreakdown, compute_prototypes
from .metrics import UndefinedMetricError, classification_report, silhouette
from .trainer import (ABLATION_MASKS, METRIC_NAMES, Checkpoint, CheckpointFormatError, ConfigError,
                      TrainConfig, build_model, mask_label, predict, run_ablation_grid, summarize, train)

logger = logging.getLogger("mmintent")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
MANIFEST = "manifest.json"
FINE_STREAMS = ("text", "visual", "acoustic")
COARSE_STREAMS = ("fine", "coarse")


class UsageError(Exception):
    pass


def _fmt(x) -> str:
    """Shortest round-trip text for a float, so outputs are byte-stable."""
    return repr(float(x))


def _write_tsv(path: Path, header: Sequence[str], rows, comments: Sequence[str] = ()) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append("\t".join(header))
    lines.extend("\t".join(str(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _config_comments(config: TrainConfig) -> List[str]:
    return [f"{k} = {v}" for k, v in _flat_config(config).items()]


def _flat_config(config: TrainConfig) -> Dict[str, str]:
    values = config.to_dict()
    values["seeds"] = ",".join(str(s) for s in config.seeds)
    values["mask"] = mask_label(config.mask)
    return {k: str(v) for k, v in values.items()}


def _parse_flat(text: str, source: str) -> Dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _read_text(path: Optional[str], what: str) -> str:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {path}")
    return p.read_text()


def _load_config(args) -> TrainConfig:
    config = TrainConfig() if args.config is None else TrainConfig.from_text(_read_text(args.config, "config"))
    if getattr(args, "seeds", None):
        try:
            seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        except ValueError:
            raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
        config = config.replace(seeds=seeds)
    if getattr(args, "workers", None):
        config = config.replace(workers=args.workers)
    config.validate()
    return config


def dataset_hash(directory) -> str:
    """sha256 over the split files, in split order."""
    digest = hashlib.sha256()
    for name in SPLITS:
        path = Path(directory) / f"{name}.bin"
        if path.exists():
            digest.update(name.encode() + b"\0")
            digest.update(path.read_bytes())
    return digest.hexdigest()


def _load_data(directory):
    if directory is None:
        raise UsageError("--data is required")
    if not Path(directory).is_dir():
        raise UsageError(f"data directory not found: {directory}")
    return load_dataset(directory)


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args: dict, outputs: Sequence[str],
                    config: Optional[TrainConfig] = None, data: Optional[str] = None,
                    seeds: Sequence[int] = ()) -> None:
    manifest = {
        "command": command,
        "args": args,
        "config": None if config is None else config.to_text(),
        "dataset_sha256": None if data is None else dataset_hash(data),
        "seeds": list(seeds),
        "outputs": sorted(outputs),
        "version": __version__,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    if args.preset is None and args.spec is None:
        raise UsageError("gen needs --preset or --spec")
    values = dataclasses.asdict(PRESETS[args.preset]) if args.preset else {}
    if args.spec is not None:
        values.update(_parse_flat(_read_text(args.spec, "spec"), args.spec))
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        spec = DatasetSpec.from_dict(values)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    out = _out_dir(args)
    paths = save_dataset(generate(spec), spec, out)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    _write_manifest(out, "gen", {"preset": args.preset, "spec_values": {k: str(v) for k, v in values.items()}},
                    [p.name for p in paths.values()] + ["metadata.json"], seeds=[spec.seed])
    return EXIT_OK


def _results_rows(label: str, seed: int, split: str, metrics: Dict[str, float]):
    return [label, seed, split] + [_fmt(metrics[m]) for m in METRIC_NAMES]


RESULT_HEADER = ["mask", "seed", "split"] + list(METRIC_NAMES)


def cmd_train(args) -> int:
    config = _load_config(args)
    _, splits = _load_data(args.data)
    out = _out_dir(args)
    seed = config.seeds[0]
    resume = Checkpoint.load(args.resume) if args.resume else None
    log_lines = ["\t".join(("epoch", "step") + LossBreakdown.FIELDS)]

    def step_log(record):
        log_lines.append("\t".join([str(record["epoch"]), str(record["step"])]
                                   + [_fmt(record[k]) for k in LossBreakdown.FIELDS]))

    try:
        result = train(config, splits, seed=seed, resume=resume, step_log=step_log)
    finally:
        mode = "a" if resume is not None and (out / "train.log").exists() else "w"
        lines = log_lines[1:] if mode == "a" else log_lines
        with open(out / "train.log", mode) as fh:
            if lines:
                fh.write("\n".join(lines) + "\n")
    result.best.save(out / "best.ckpt")
    result.last.save(out / "last.ckpt")
    history_keys = list(result.history[0]) if result.history else ["epoch"]
    _write_tsv(out / "epochs.tsv", history_keys,
               [[h["epoch"]] + [_fmt(h[k]) for k in history_keys[1:]] for h in result.history])
    model = build_model(result.best)
    rows = []
    for split in ("val", "test"):
        if split in splits and len(splits[split]):
            p = predict(model, splits[split], config.eval_batch_size)
            metrics = classification_report(p.preds, splits[split].labels, splits[split].num_classes)
            rows.append(_results_rows(mask_label(config.mask), seed, split, metrics))
            print(f"{split}\t" + "\t".join(f"{m} {metrics[m]:.4f}" for m in METRIC_NAMES))
    _write_tsv(out / "results.tsv", RESULT_HEADER, rows, _config_comments(config))
    print(f"best epoch {result.best.meta['best_epoch']} val WF1 {result.best_val_wf1:.4f}")
    outputs = ["train.log", "best.ckpt", "last.ckpt", "epochs.tsv", "results.tsv"]
    _write_manifest(out, "train", {"data": args.data, "resume": args.resume}, outputs,
                    config=config, data=args.data, seeds=[seed])
    return EXIT_OK


def _load_checkpoint_and_split(args):
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = Checkpoint.load(args.checkpoint)
    _, splits = _load_data(args.data)
    if args.split not in splits:
        raise UsageError(f"split {args.split!r} not in dataset")
    model = build_model(ckpt, "best")
    data = splits[args.split]
    model.check_batch(data)
    batch_size = ckpt.meta["train_config"].get("eval_batch_size", 256)
    return ckpt, model, data, batch_size


def cmd_eval(args) -> int:
    ckpt, model, data, batch_size = _load_checkpoint_and_split(args)
    p = predict(model, data, batch_size)
    metrics = classification_report(p.preds, data.labels, data.num_classes)
    print("\t".join(f"{m} {_fmt(metrics[m])}" for m in METRIC_NAMES))
    if args.out is not None:
        out = _out_dir(args)
        config = TrainConfig.from_dict(ckpt.meta["train_config"])
        _write_tsv(out / "results.tsv", RESULT_HEADER,
                   [_results_rows(mask_label(config.mask), ckpt.meta["seed"], args.split, metrics)],
                   _config_comments(config))
        _write_manifest(out, "eval", {"data": args.data, "checkpoint": args.checkpoint, "split": args.split},
                        ["results.tsv"], config=config, data=args.data, seeds=[ckpt.meta["seed"]])
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    _, splits = _load_data(args.data)
    out = _out_dir(args)
    cells = run_ablation_grid(config, splits, ABLATION_MASKS)
    _write_tsv(out / "results.tsv",
               ["mask", "seed"] + list(METRIC_NAMES) + ["silhouette", "coarse_median", "epochs"],
               [[mask_label(c.mask), c.seed] + [_fmt(c.metrics[m]) for m in METRIC_NAMES]
                + [_fmt(c.silhouette), _fmt(c.coarse_median), c.epochs] for c in cells],
               _config_comments(config))
    summary = summarize(cells)
    header = ["mask", "n_seeds"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
    _write_tsv(out / "summary.tsv", header,
               [[r["mask"], r["n_seeds"]] + [_fmt(r[k]) for k in header[2:]] for r in summary],
               _config_comments(config))
    for r in summary:
        print(f"{r['mask']:24s} " + "  ".join(
            f"{m} {100 * r[m + '_mean']:.2f}±{100 * r[m + '_std']:.2f}" for m in METRIC_NAMES))
    _write_manifest(out, "ablate", {"data": args.data}, ["results.tsv", "summary.tsv"],
                    config=config, data=args.data, seeds=config.seeds)
    return EXIT_OK


def cmd_attn_stats(args) -> int:
    ckpt, model, data, batch_size = _load_checkpoint_and_split(args)
    out = _out_dir(args)
    p = predict(model, data, batch_size)
    rows, columns = [], {}
    for stage, streams, weights in (("fine", FINE_STREAMS, p.fine_weights),
                                    ("coarse", COARSE_STREAMS, p.coarse_weights)):
        for j, stream in enumerate(streams):
            columns[stream] = weights[:, j]
        for i in range(len(data)):
            rows.extend([i, stage, stream, _fmt(weights[i, j])] for j, stream in enumerate(streams))
    _write_tsv(out / "attn_stats.tsv", ["instance", "stage", "stream", "weight"], rows)
    summary = []
    for stream, w in columns.items():
        q = np.quantile(w, [0.0, 0.25, 0.5, 0.75, 1.0])
        summary.append([stream] + [_fmt(v) for v in q])
        print(f"{stream:9s} min {q[0]:.4f}  q1 {q[1]:.4f}  median {q[2]:.4f}  q3 {q[3]:.4f}  max {q[4]:.4f}")
    _write_tsv(out / "attn_summary.tsv", ["stream", "min", "q1", "median", "q3", "max"], summary)
    _write_manifest(out, "attn-stats", {"data": args.data, "checkpoint": args.checkpoint, "split": args.split},
                    ["attn_stats.tsv", "attn_summary.tsv"], data=args.data, seeds=[ckpt.meta["seed"]])
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    ckpt, model, data, batch_size = _load_checkpoint_and_split(args)
    out = _out_dir(args)
    p = predict(model, data, batch_size)
    protos = compute_prototypes(ad.Tensor(p.h_f), data.labels, data.num_classes)
    d = p.h_f.shape[1]
    rows = [["instance", i, int(y)] + [_fmt(v) for v in p.h_f[i]] for i, y in enumerate(data.labels)]
    rows += [["prototype", c, c] + [_fmt(v) for v in protos.prototypes.data[c]]
             for c in range(data.num_classes) if protos.present[c]]
    _write_tsv(out / "embeddings.tsv", ["kind", "index", "label"] + [f"e{k}" for k in range(d)], rows)
    score = silhouette(p.h_f, data.labels)
    print(f"silhouette {score:.6f}")
    _write_manifest(out, "dump-embeddings", {"data": args.data, "checkpoint": args.checkpoint,
                                             "split": args.split},
                    ["embeddings.tsv"], data=args.data, seeds=[ckpt.meta["seed"]])
    return EXIT_OK


def cmd_rerun(args) -> int:
    """Repeat the job recorded in a manifest into a new output directory."""
    manifest = json.loads(_read_text(args.manifest, "manifest"))
    command, recorded = manifest["command"], manifest["args"]
    if recorded.get("data") is not None and manifest.get("dataset_sha256"):
        if dataset_hash(recorded["data"]) != manifest["dataset_sha256"]:
            raise ConfigError(f"dataset at {recorded['data']} no longer matches the manifest hash")
    argv = [command, "--out", args.out]
    with tempfile.TemporaryDirectory() as tmp:
        if command == "gen":
            spec_path = Path(tmp) / "spec.txt"
            spec_path.write_text("".join(f"{k} = {v}\n" for k, v in recorded["spec_values"].items()))
            argv += ["--spec", str(spec_path)]
        else:
            argv += ["--data", recorded["data"]]
        if manifest.get("config") is not None and command in ("train", "ablate"):
            config_path = Path(tmp) / "config.txt"
            config_path.write_text(manifest["config"])
            argv += ["--config", str(config_path)]
        if recorded.get("resume"):
            argv += ["--resume", recorded["resume"]]
        if command in ("eval", "attn-stats", "dump-embeddings"):
            argv += ["--checkpoint", recorded["checkpoint"], "--split", recorded["split"]]
        return main(argv)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmintent", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--preset", choices=sorted(PRESETS))
    gen.add_argument("--spec", help="flat key = value dataset spec (overrides the preset)")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out")
    gen.set_defaults(func=cmd_gen)

    for name, func, help_text in (("train", cmd_train, "train one model"),
                                  ("ablate", cmd_ablate, "run the loss-ablation grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value training config")
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--seeds", help="comma-separated seeds (overrides the config)")
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--resume", help="continue from a last.ckpt")
        else:
            p.add_argument("--workers", type=int, help="parallel processes for grid cells")

    for name, func, help_text in (("eval", cmd_eval, "score a checkpoint"),
                                  ("attn-stats", cmd_attn_stats, "dump per-instance fusion weights"),
                                  ("dump-embeddings", cmd_dump_embeddings, "dump h_f and class prototypes")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--data")
        p.add_argument("--split", default="test", choices=SPLITS)
        p.add_argument("--out")
        p.set_defaults(func=func)

    rerun = sub.add_parser("rerun", help="repeat the job recorded in a manifest")
    rerun.add_argument("--manifest")
    rerun.add_argument("--out", required=True)
    rerun.set_defaults(func=cmd_rerun)

    config = sub.add_parser("config", help="print the default training config with documentation")
    config.set_defaults(func=lambda args: print(TrainConfig().to_text(), end="") or EXIT_OK)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ad.NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DataFormatError, CheckpointFormatError, StratificationError,
            UndefinedMetricError, FileNotFoundError, KeyError, ValueError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
