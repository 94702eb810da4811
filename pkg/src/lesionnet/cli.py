"""``lesionnet`` command line: synth, train, eval, predict, sweep, bench.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (MODALITIES, DataFormatError, EnsembleWeights, SyntheticConfig, build_samples,
                   ensemble_predict, gen_synthetic, load_labels, split)
from .experiments import (RunConfig, benchmark, build_model, format_table, load_run_config,
                          optimizer_sweep, run, save_run_config)
from .metrics import DegenerateLabelsError, auc, read_scores, write_scores
from .models import WeightFileError, load_weights, save_weights
from .training import OPTIMIZERS, NumericalError, case_scores

log = logging.getLogger("lesionnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_CASTS = {"width": float, "depth": float, "lr": float, "epochs": int, "patience": int,
          "batch_size": int, "seed": int, "size": int, "augment": _bool, "bias_correction": _bool}


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            out[key] = _CASTS.get(key, str)(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--model", choices=["eff3d", "multiscale"])
    p.add_argument("--variant", choices=["b0", "b7", "custom"])
    p.add_argument("--width", type=float, help="width multiplier for --variant custom")
    p.add_argument("--depth", type=float, help="depth multiplier for --variant custom")
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int, help="slice edge length after resizing")
    p.add_argument("--modality", help="'stack' or one of " + ", ".join(MODALITIES))
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)
    p.add_argument("--bias-correction", dest="bias_correction", action="store_true", default=None)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--out", dest="out_dir")


def resolve_config(args) -> RunConfig:
    """defaults < config file < LESIONNET_SEED < explicit flags."""
    values = read_config_file(args.config) if args.config else {}
    env_seed = os.environ.get("LESIONNET_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"LESIONNET_SEED must be an integer, got {env_seed!r}") from None
    for key in ("model", "variant", "width", "depth", "optimizer", "lr", "epochs", "patience",
                "batch_size", "seed", "size", "modality", "augment", "bias_correction",
                "data_dir", "out_dir"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    try:
        return RunConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _labels_path(data_dir) -> Path:
    path = Path(data_dir) / "labels.csv"
    if not path.exists():
        raise DataFormatError(f"missing label file {path}")
    return path


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.n < 4:
        raise UsageError(f"need ≥ 4 cases, got {args.n}")
    cfg = SyntheticConfig(depth=args.depth, size=args.size, amplitude=args.amplitude)
    labels = gen_synthetic(args.n, args.seed, args.out, cfg)
    print(f"wrote {len(labels)} cases x {len(MODALITIES)} modalities to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _labels_path(cfg.data_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, history, _ = run(cfg)
    save_weights(model, out / "best.lnwt")
    save_run_config(cfg, model, out / "best.json")
    header = (f"# optimizer={cfg.optimizer} lr={cfg.lr:g} model={cfg.model} variant={cfg.variant} "
              f"modality={cfg.modality} seed={cfg.seed}")
    (out / "history.csv").write_text("\n".join([header] + history.csv_lines()) + "\n")
    print(f"best epoch {history.best_epoch} of {len(history.records)}")
    print(f"val AUC {history.best_val_auc:.5f}")
    return EXIT_OK


def _meta_path(checkpoint: Path, meta) -> Path:
    path = Path(meta) if meta else checkpoint.with_suffix(".json")
    if not path.exists():
        raise DataFormatError(f"missing model description {path}")
    return path


def _load_checkpoint(checkpoint, meta=None, data_dir=None):
    checkpoint = Path(checkpoint)
    cfg, described = load_run_config(_meta_path(checkpoint, meta))
    if data_dir:
        cfg.data_dir = data_dir
    depth = described["in_spatial"][0] if cfg.model == "eff3d" else None
    model = build_model(cfg, depth)
    load_weights(model, checkpoint)
    return cfg, model


def cmd_eval(args) -> int:
    if args.scores:
        _, scores, labels = read_scores(args.scores)
        print(f"AUC {auc(scores, labels):.5f}")
        return EXIT_OK
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --scores")
    cfg, model = _load_checkpoint(args.checkpoint, args.meta, args.data_dir)
    labels = load_labels(_labels_path(cfg.data_dir))
    ids = sorted(labels) if args.split == "all" else split(list(labels), cfg.seed).val_ids
    samples = build_samples(cfg.data_dir, ids, labels, cfg.layout, cfg.size)
    case_ids, scores, y = case_scores(model, samples)
    value = auc(scores, y)
    out = Path(args.scores_out or Path(args.checkpoint).with_name(f"scores_{args.split}.csv"))
    write_scores(out, case_ids, scores, y)
    print(f"AUC {value:.5f}")
    return EXIT_OK


def list_cases(data_dir) -> list[str]:
    return sorted(p.name for p in Path(data_dir).iterdir() if p.is_dir())


def cmd_predict(args) -> int:
    try:
        weights = EnsembleWeights.from_ratio(args.ratio)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    paths = dict(zip(MODALITIES, (args.flair, args.t1w, args.t1gd, args.t2)))
    for mod, w in zip(MODALITIES, weights.weights):
        if w > 0 and not paths[mod]:
            raise UsageError(f"no checkpoint for {mod} but its ensemble weight is nonzero")
    cases = list_cases(args.data_dir)
    if not cases:
        raise DataFormatError(f"no case directories under {args.data_dir}")
    probs = np.zeros((len(cases), len(MODALITIES)))
    for j, (mod, w) in enumerate(zip(MODALITIES, weights.weights)):
        if w == 0 or not paths[mod]:
            continue
        cfg, model = _load_checkpoint(paths[mod], data_dir=args.data_dir)
        samples = build_samples(args.data_dir, cases, None, cfg.layout, cfg.size)
        ids, p, _ = case_scores(model, samples)
        lookup = dict(zip(ids, p))
        probs[:, j] = [lookup[c] for c in cases]
    lines = [f"# ratio={args.ratio}", "case_id,probability"]
    lines += [f"{c},{ensemble_predict(row, weights)!r}" for c, row in zip(cases, probs)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_lrs(text: str | None) -> dict:
    out = {}
    for item in filter(None, (text or "").split(",")):
        name, _, value = item.partition("=")
        if name not in OPTIMIZERS or not value:
            raise UsageError(f"bad --lrs entry {item!r}; expected optimizer=value")
        out[name] = float(value)
    return out


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    _labels_path(cfg.data_dir)
    rows = optimizer_sweep(cfg, lrs=_parse_lrs(args.lrs))
    table = format_table(rows, "optimizer")
    print(table)
    if args.table:
        Path(args.table).write_text(table + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    _labels_path(cfg.data_dir)
    table = format_table(benchmark(cfg), "method")
    print(table)
    if args.table:
        Path(args.table).write_text(table + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lesionnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic four-modality dataset")
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--amplitude", type=float, default=100.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model, keep the best-validation checkpoint")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AUC of a checkpoint, or of a scores file")
    p.add_argument("--checkpoint")
    p.add_argument("--meta", help="model description (default: checkpoint with .json suffix)")
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--split", choices=["val", "all"], default="val")
    p.add_argument("--scores-out")
    p.add_argument("--scores", help="id,score,label file to score instead of a checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-case ensemble over modality checkpoints")
    for mod in MODALITIES:
        p.add_argument(f"--{mod.lower()}", metavar="CKPT")
    p.add_argument("--data", dest="data_dir", required=True)
    p.add_argument("--ratio", default="3:3:3:2")
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    for name, fn, helptext in (("sweep", cmd_sweep, "train once per optimizer, print a table"),
                               ("bench", cmd_bench, "EfficientNet-3D vs Multiscale on one split")):
        p = sub.add_parser(name, help=helptext)
        _add_run_flags(p)
        p.add_argument("--table", help="also write the table here")
        if name == "sweep":
            p.add_argument("--lrs", help="per-optimizer overrides, e.g. sgd=0.01,adadelta=1.0")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # non-finite values are detected and reported explicitly (exit 3)
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateLabelsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataFormatError, WeightFileError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
