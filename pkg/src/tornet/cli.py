"""Command-line entry point: ``tornet <command> [options]``.

Commands: synth-data, features, train, eval, predict, params, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 numerical failure or internal assertion.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, DataError, NumericalError, TornetError

log = logging.getLogger("tornet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# run configuration: defaults < config file < flags


RUN_DEFAULTS: Dict[str, Any] = {
    "variant": "default",
    "epochs": None,
    "seed": 0,
    "lr": 1e-5,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "batch_size": 16,
    "patience": None,
    "target_uar": None,
    "class_weighting": "off",
    "grad_clip": None,
    "block_dropout": 0.5,
    "head_dropout": 0.5,
    "threads": None,
    "cache_dir": None,
}

_TYPES = {
    "variant": str, "epochs": int, "seed": int, "lr": float, "beta1": float, "beta2": float,
    "eps": float, "batch_size": int, "patience": int, "target_uar": float, "class_weighting": str,
    "grad_clip": float, "block_dropout": float, "head_dropout": float, "threads": int, "cache_dir": str,
}


def _convert(key: str, raw: str, origin: str) -> Any:
    if raw.lower() in ("none", ""):
        return None
    try:
        return _TYPES[key](raw)
    except ValueError:
        raise ConfigError(f"{origin}: {key} = {raw!r} is not a valid {_TYPES[key].__name__}") from None


def parse_config_file(path: Path) -> Dict[str, Any]:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    values: Dict[str, Any] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in RUN_DEFAULTS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _convert(key, raw, f"{path}:{lineno}")
    return values


@dataclass
class RunConfig:
    values: Dict[str, Any]
    origin: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def merge(cls, file_values: Dict[str, Any], flag_values: Dict[str, Any]) -> "RunConfig":
        values, origin = dict(RUN_DEFAULTS), {k: "default" for k in RUN_DEFAULTS}
        for source, layer in (("config", file_values), ("flag", flag_values)):
            for key, value in layer.items():
                if value is not None:
                    values[key], origin[key] = value, source
        return cls(values, origin)

    def __getitem__(self, key):
        return self.values[key]

    def log(self) -> None:
        for key in sorted(self.values):
            log.info("config %s = %r (%s)", key, self.values[key], self.origin[key])


# --------------------------------------------------------------------------
# threading


def _threads(requested: Optional[int], single: bool) -> int:
    if single:
        return 1
    return requested if requested else (os.cpu_count() or 1)


@contextlib.contextmanager
def thread_limits(single: bool):
    """Pin BLAS to one thread in single-thread mode so reductions are bitwise reproducible."""
    if not single:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _created_timestamp(single: bool) -> float:
    env = os.environ.get("SOURCE_DATE_EPOCH")
    if env is not None:
        return float(env)
    return 0.0 if single else round(time.time(), 3)


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    from .data import SynthSpec, generate_synth

    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    out = Path(args.out)
    try:
        manifest = generate_synth(SynthSpec(n_per_class_per_split=args.n, seed=args.seed), out)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc.strerror or exc}") from None
    log.info("wrote %d clips", len(manifest))
    print(manifest.source)
    return EXIT_OK


def cmd_features(args) -> int:
    from .data import load_manifest, load_split, SPLITS

    manifest = load_manifest(args.manifest)
    threads = _threads(args.threads, args.single_thread)
    splits = [args.split] if args.split else [s for s in SPLITS if manifest.split(s)]
    with thread_limits(args.single_thread):
        for split in splits:
            data = load_split(manifest, split, threads=threads, cache_dir=args.cache_dir)
            print(f"{split}: {len(data)} clips -> {tuple(data.x.shape)}")
    return EXIT_OK


def _model_config(run: RunConfig):
    from .network import VARIANTS, ModelConfig

    if run["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {run['variant']!r}; choose from {', '.join(VARIANTS)}")
    base = ModelConfig(block_dropout=run["block_dropout"], head_dropout=run["head_dropout"])
    return base.with_variant(run["variant"])


def cmd_train(args) -> int:
    from .data import load_manifest, load_split
    from .network import build_model
    from .train import TrainConfig, checkpoint_metadata, save_model, train

    file_values = parse_config_file(args.config) if args.config else {}
    flags = {"epochs": args.epochs, "seed": args.seed, "variant": args.variant, "lr": args.lr,
             "threads": args.threads, "cache_dir": args.cache_dir, "target_uar": args.target_uar}
    run = RunConfig.merge(file_values, flags)
    run.log()
    if run["epochs"] is None:
        raise ConfigError("max epochs must be set (--epochs or 'epochs = N' in the config file)")
    if run["epochs"] < 1:
        raise ConfigError(f"--epochs must be >= 1, got {run['epochs']}: no epoch would be trained")
    tcfg = TrainConfig(
        max_epochs=run["epochs"], lr=run["lr"], beta1=run["beta1"], beta2=run["beta2"], eps=run["eps"],
        batch_size=run["batch_size"], seed=run["seed"], patience=run["patience"],
        target_uar=run["target_uar"], class_weighting=run["class_weighting"], grad_clip=run["grad_clip"],
    )
    mcfg = _model_config(run)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None

    single = args.single_thread
    threads = _threads(run["threads"], single)
    manifest = load_manifest(args.manifest)
    with thread_limits(single):
        train_data = load_split(manifest, "train", threads=threads, cache_dir=run["cache_dir"])
        val_data = load_split(manifest, "devel", threads=threads, cache_dir=run["cache_dir"])
        log.info("train %d clips, devel %d clips", len(train_data), len(val_data))
        model = build_model(mcfg, seed=run["seed"])
        history_path = out / "history.jsonl"
        with history_path.open("w", encoding="utf-8") as hist:
            def on_epoch(record):
                hist.write(json.dumps(record, sort_keys=True) + "\n")
                hist.flush()

            result = train(model, train_data, val_data, tcfg, on_epoch=on_epoch, record_time=not single)

    created = _created_timestamp(single)
    save_model(out / "best.ckpt", result.best_state, checkpoint_metadata(
        mcfg, tcfg, epoch=result.best_epoch, val_uar=result.best_uar, seed=run["seed"], created=created))
    final_uar = result.history[-1]["val_uar"]
    save_model(out / "final.ckpt", result.final_state, checkpoint_metadata(
        mcfg, tcfg, epoch=result.final_epoch, val_uar=final_uar, seed=run["seed"], created=created))
    print(f"best epoch {result.best_epoch}: val UAR {result.best_uar:.4f} ({result.stop_reason})")
    print(out / "best.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import LABEL_NAMES, load_manifest, load_split
    from .metrics import evaluate_predictions
    from .train import load_model, predict_logits

    model, meta = load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    threads = _threads(args.threads, args.single_thread)
    with thread_limits(args.single_thread):
        data = load_split(manifest, args.split, threads=threads, cache_dir=args.cache_dir)
        logits = predict_logits(model, data.x)
    report = evaluate_predictions(
        data.y, logits.argmax(axis=1), model.config.n_classes, args.bootstrap, 0.95, args.seed, args.split
    )
    print(report.table([LABEL_NAMES[k] for k in range(model.config.n_classes)]))
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    from . import features
    from .data import LABEL_NAMES
    from .numerics import softmax
    from .train import load_model, predict_logits

    model, _ = load_model(args.checkpoint)
    try:
        raw = Path(args.wav).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {args.wav}: {exc.strerror}") from None
    x = features.assemble(features.read_wav(raw, name=str(args.wav)))[None]
    probs = softmax(predict_logits(model, x).astype(np.float64))[0]
    label = int(np.argmax(probs))
    print(f"label: {LABEL_NAMES[label]}")
    for k, p in enumerate(probs):
        print(f"p({LABEL_NAMES[k]}) = {p:.6f}")
    return EXIT_OK


def cmd_params(args) -> int:
    from .network import ABLATION_LABELS, VARIANTS, ModelConfig, build_model, format_trace, param_breakdown

    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
    model = build_model(ModelConfig().with_variant(args.variant))
    print(f"variant: {args.variant} ({ABLATION_LABELS[args.variant]})")
    print(format_trace(model))
    print()
    for name, count in param_breakdown(model).items():
        print(f"{name:<18s} {count:>10,d}")
    total = model.num_parameters()
    print(f"{'total':<18s} {total:>10,d}  ({total / 1e6:.2f} M)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradsuite

    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    registry = gradsuite.REGISTRY
    if args.only:
        unknown = set(args.only) - set(registry)
        if unknown:
            raise ConfigError(f"unknown gradcheck entries: {sorted(unknown)}")
        registry = {k: v for k, v in registry.items() if k in args.only}
    reports = gradsuite.run_suite(registry, args.seeds)
    for rep in reports:
        print(rep.line())
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed over {args.seeds} seeds")
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tornet", description="TorNet audio classifier: data, training, evaluation, audits.")
    p.add_argument("--version", action="version", version=f"tornet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def threading_flags(sp):
        sp.add_argument("--threads", type=int, default=None, help="feature-extraction workers (default: all cores)")
        sp.add_argument("--single-thread", action="store_true", help="one thread everywhere; bitwise reproducible")

    s = sub.add_parser("synth-data", help="generate the synthetic two-class corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10, help="clips per class per split")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("features", help="extract features for a manifest into a cache directory")
    s.add_argument("--manifest", required=True)
    s.add_argument("--cache-dir", required=True)
    s.add_argument("--split", choices=["train", "devel", "test"])
    threading_flags(s)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train and keep the best-validation-UAR checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--variant")
    s.add_argument("--lr", type=float)
    s.add_argument("--target-uar", type=float, help="stop once validation UAR reaches this value")
    s.add_argument("--cache-dir")
    threading_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="UAR, confusion matrix and bootstrap CI on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test", choices=["train", "devel", "test"])
    s.add_argument("--bootstrap", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    s.add_argument("--json", help="also write the report as JSON")
    s.add_argument("--cache-dir")
    threading_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="classify one WAV file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--wav", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("params", help="shape trace and parameter breakdown")
    s.add_argument("--variant", default="default")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--only", nargs="+", help="restrict to these entries")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TornetError, AssertionError) as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
