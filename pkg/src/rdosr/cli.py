"""Command-line front end: dataset synthesis, training, evaluation, and the
leave-one-class-out sweep.

Hyperparameters come from a key=value config file (# starts a comment);
recognized keys are the TrainConfig fields plus cube, labels, unknown, and
train_fraction. Flags override file values. Exit codes: 0 success, 2
usage/IO problem, 3 numerical failure, 4 sweep with failed runs.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data, models, openset
from .diffcore import DomainError, NumericError, ShapeError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4

CHECKPOINT_NAME = "model.rdck"
MANIFEST_NAME = "manifest.txt"


class CliError(Exception):
    """Bad invocation or unusable input files."""


_FIELD_TYPES = {f.name: f.type for f in fields(models.TrainConfig)}
_EXTRA_KEYS = ("cube", "labels", "unknown", "train_fraction")
_PARSERS = {"int": int, "float": float, "str": str}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse key=value lines; unknown keys are rejected."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES and key not in _EXTRA_KEYS:
            raise CliError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, value: str):
    kind = _FIELD_TYPES.get(key, "str" if key in ("cube", "labels", "unknown") else "float")
    try:
        return _PARSERS[kind](value)
    except ValueError as exc:
        raise CliError(f"config key {key}: {exc}") from exc


def build_train_config(values: dict[str, str]) -> models.TrainConfig:
    kwargs = {k: _coerce(k, v) for k, v in values.items() if k in _FIELD_TYPES}
    try:
        return models.TrainConfig(**kwargs)
    except DomainError as exc:
        raise CliError(str(exc)) from exc


def _merge_config(args) -> dict[str, str]:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in _FIELD_TYPES and key not in _EXTRA_KEYS:
            raise CliError(f"--set: unknown config key {key!r}")
        values[key] = value
    # explicit flags win over both the file and --set
    for key in ("cube", "labels", "unknown", "seed"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = str(flag)
    if getattr(args, "train_fraction", None) is not None:
        values["train_fraction"] = str(args.train_fraction)
    return values


def _parse_unknown(text: str) -> tuple[int, ...]:
    try:
        ids = tuple(sorted({int(part) for part in text.split(",") if part.strip()}))
    except ValueError as exc:
        raise CliError(f"--unknown expects comma-separated class ids, got {text!r}") from exc
    if not ids:
        raise CliError("--unknown lists no classes")
    return ids


def _load_dataset(values: dict[str, str]) -> tuple[data.HsiDataset, Path, Path]:
    for key in ("cube", "labels"):
        if key not in values:
            raise CliError(f"missing required input: {key} (flag or config key)")
    cube_path, label_path = Path(values["cube"]), Path(values["labels"])
    dataset = data.pair(data.load_cube(cube_path), data.load_labels(label_path))
    return dataset, cube_path, label_path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(path: Path, entries: list[tuple[str, object]]) -> None:
    # repr() on floats keeps round-trip fidelity in the echoed config
    lines = [
        f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}"
        for key, value in entries
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise CliError("--classes must be >= 2 (open-set evaluation needs a holdout)")
    dataset = data.synth_generate(
        l_total=args.classes,
        bands=args.bands,
        per_class=args.per_class,
        bases_per_class=args.bases_per_class,
        dirichlet_alpha=args.alpha,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cube_path, label_path = out / "cube.hsid", out / "labels.hsil"
    data.dataset_to_files(cube_path, label_path, dataset)
    print(
        f"wrote {cube_path} and {label_path}: {dataset.pixel_count} pixels, "
        f"{dataset.class_count} classes, {dataset.band_count} bands"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    values = _merge_config(args)
    if "unknown" not in values:
        raise CliError("missing required input: unknown (flag or config key)")
    unknown = _parse_unknown(values["unknown"])
    train_fraction = float(values.get("train_fraction", 0.5))
    config = build_train_config(values)
    dataset, cube_path, label_path = _load_dataset(values)

    model, logs, _ = models.train_pipeline(dataset, unknown, config, train_fraction)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models.save_checkpoint(out / CHECKPOINT_NAME, model)

    entries: list[tuple[str, object]] = list(asdict(config).items())
    entries += [
        ("train_fraction", train_fraction),
        ("unknown_classes", ",".join(str(u) for u in unknown)),
        ("known_class_ids", ",".join(str(k) for k in model.known_class_ids)),
        ("band_count", dataset.band_count),
        ("class_count", dataset.class_count),
        ("cube_sha256", _sha256(cube_path)),
        ("labels_sha256", _sha256(label_path)),
    ]
    stage1 = logs["stage1"]
    entries += [
        ("stage1_epochs_run", len(stage1)),
        ("stage1_final_loss", stage1[-1].loss if stage1 else float("nan")),
        ("stage1_final_accuracy", stage1[-1].accuracy if stage1 else float("nan")),
    ]
    if config.mode != "softmax":
        stage2 = logs["stage2"]
        entries += [
            ("stage2_epochs_run", len(stage2)),
            ("stage2_final_loss", stage2[-1].loss if stage2 else float("nan")),
            ("stage2_final_recon", stage2[-1].recon if stage2 else float("nan")),
        ]
    _write_manifest(out / MANIFEST_NAME, entries)
    acc = stage1[-1].accuracy if stage1 else float("nan")
    print(f"trained {config.mode} model on {len(model.known_class_ids)} known classes; "
          f"stage1 accuracy {acc:.4f}; checkpoint at {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _resolve_model_path(raw: str) -> Path:
    path = Path(raw)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    return path


def cmd_eval(args) -> int:
    model = models.load_checkpoint(_resolve_model_path(args.model))
    dataset, _, _ = _load_dataset({"cube": args.cube, "labels": args.labels})
    trained_on = set(model.known_class_ids) | set(model.unknown_class_ids)
    if dataset.class_count != len(trained_on) or trained_on != set(
        range(1, dataset.class_count + 1)
    ):
        raise CliError(
            f"model was trained on classes {sorted(trained_on)} but the dataset "
            f"has classes 1..{dataset.class_count}"
        )
    parts = data.split(
        dataset,
        data.SplitSpec(
            frozenset(model.unknown_class_ids), model.train_fraction, model.config.seed
        ),
    )
    known_scores = model.open_score(parts.test_known.pixels)
    unknown_scores = model.open_score(parts.unknown_pool.pixels)
    curve = openset.roc(known_scores, unknown_scores)
    predictions = model.closed_predict(parts.test_known.pixels)
    accuracy = float(np.mean(predictions == parts.test_known.labels))
    open_frac = openset.openness(model.n_known, dataset.class_count, model.n_known)
    print(f"auc={curve.auc:.4f}")
    print(f"closed_set_accuracy={accuracy:.4f}")
    print(f"openness={open_frac:.4f}")
    if args.roc_out:
        openset.export_roc(args.roc_out, curve)
    if args.hist_out:
        scores = np.concatenate([known_scores, unknown_scores])
        lo = min(0.0, float(scores.min()))
        hi = float(scores.max())
        if hi <= lo:
            hi = lo + 1.0
        openset.export_histogram(args.hist_out, known_scores, unknown_scores, args.bins, lo, hi)
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = _merge_config(args)
    train_fraction = float(values.get("train_fraction", 0.5))
    config = build_train_config(values)
    dataset, _, _ = _load_dataset(values)
    report = openset.sweep(dataset, config, train_fraction, jobs=args.jobs)
    openset.export_sweep(args.report, report)
    print(f"average_auc={report.average_auc:.4f}")
    for row in report.failed:
        print(f"failed: {row.error}", file=sys.stderr)
    return EXIT_PARTIAL if report.failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdosr",
        description="Open-set land-cover pixel classification via reconstruction error.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic linear-mixing dataset")
    p.add_argument("--out", required=True, help="output directory for cube.hsid/labels.hsil")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--bands", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True, dest="per_class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bases-per-class", type=int, default=2, dest="bases_per_class")
    p.add_argument("--alpha", type=float, default=1.0, help="symmetric Dirichlet concentration")
    p.add_argument("--noise-sigma", type=float, default=0.01, dest="noise_sigma")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train both stages on one known/unknown partition")
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--unknown", help="comma-separated unknown class ids")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output directory for checkpoint + manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a trained model and export curves")
    p.add_argument("--model", required=True, help="checkpoint file or its directory")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--roc-out", dest="roc_out")
    p.add_argument("--hist-out", dest="hist_out")
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep", help="leave-one-class-out protocol over every class")
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--config")
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(handler=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (CliError, data.FormatError, DomainError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
