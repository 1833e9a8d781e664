"""Command-line entry point: ``fairnn <command> [options]``.

Commands: prepare, train, eval, gridsearch, ablate, compare-ae, export-latent.

Exit codes: 0 success, 1 usage or configuration error, 2 input/output
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from . import model as M
from .data import LOADERS, SchemaError, dataset_stats, file_sha256, load, read_cache, write_cache
from .losses import ConfigError
from .metrics import export_latent_scatter, summary_row, write_csv
from .numerics import NumericError
from .train import (
    ABLATION_FIELDS,
    AE_FIELDS,
    GRID_FIELDS,
    GRID_ALPHAS,
    GRID_BETAS,
    TrainConfig,
    ablate,
    compare_ae_losses,
    evaluate_checkpoint,
    grid_search,
    run_many,
    write_loss_log,
)

logger = logging.getLogger("fairnn")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
CACHE_ENV = "FAIRNN_CACHE_DIR"
DEFAULT_CACHE_DIR = ".fairnn-cache"
MANIFEST_FORMAT = "fairnn-manifest"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def parse_seeds(text) -> list[int]:
    """``"0..9"`` (inclusive range) or a comma list such as ``"0,3,5"``."""
    text = str(text).strip()
    m = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    try:
        seeds = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def parse_floats(text) -> list[float]:
    try:
        return [float(p) for p in str(text).split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def parse_widths(text) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in str(text).split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad width list {text!r}") from None


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes in keys
    are read as underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


_FIELD_TYPES = {
    "alpha": float,
    "beta": float,
    "batch_size": int,
    "lr": float,
    "epochs": int,
    "preferential_sampling": parse_bool,
    "ps_epochs": int,
    "ps_rule": str,
    "reconstruction": str,
    "encoder_widths": parse_widths,
    "latent_dim": int,
    "classifier_hidden": int,
}
_CHOICES = {"ps_rule": ("expected", "difference"), "reconstruction": ("mixed", "mse")}


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value file; explicit flags override it")
    for name, typ in _FIELD_TYPES.items():
        flags = [f"--{name}"]
        if "_" in name:
            flags.append(f"--{name.replace('_', '-')}")
        kw = {"dest": name, "type": typ, "default": None}
        if name == "preferential_sampling":
            kw.update(nargs="?", const=True)
        if name in _CHOICES:
            kw["choices"] = _CHOICES[name]
        p.add_argument(*flags, **kw)
    p.add_argument("--seeds", type=parse_seeds, default=None, help='"0..9" or "0,1,2"')
    p.add_argument("--n_jobs", "--n-jobs", dest="n_jobs", type=int, default=None)


def _add_data_flags(p: argparse.ArgumentParser, dataset_required: bool = True):
    p.add_argument("--dataset", choices=sorted(LOADERS), required=dataset_required)
    p.add_argument("--cache", help=f"dataset cache file (default: ${CACHE_ENV}/<dataset>.csv)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairnn", description="Fair autoencoder + classifier experiments.")
    parser.add_argument("--version", action="version", version=f"fairnn {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="clean, encode and cache a raw dataset")
    _add_data_flags(p)
    p.add_argument("--input", required=True, help="raw data file or directory")

    p = sub.add_parser("train", help="train one configuration on several seeds")
    _add_data_flags(p, dataset_required=False)
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="re-evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache")
    p.add_argument("--part", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="write the summary row to this CSV")

    p = sub.add_parser("gridsearch", help="rank (alpha, beta) cells by validation score")
    _add_data_flags(p, dataset_required=False)
    _add_config_flags(p)
    p.add_argument("--alphas", type=parse_floats, default=list(GRID_ALPHAS))
    p.add_argument("--betas", type=parse_floats, default=list(GRID_BETAS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="penalty on/off and preferential sampling ablation")
    _add_data_flags(p, dataset_required=False)
    _add_config_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare-ae", help="mixed vs squared-error reconstruction loss")
    _add_data_flags(p, dataset_required=False)
    _add_config_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-latent", help="two latent coordinates of the test rows as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache")
    p.add_argument("--dims", type=int, nargs=2, required=True, metavar=("I", "J"),
                   help="zero-based latent coordinates")  # fmt: skip
    p.add_argument("--part", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# Configuration assembly
# ---------------------------------------------------------------------------


def resolve_options(args) -> dict:
    """Merge config file values under explicit flags; returns a plain dict."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    known = set(_FIELD_TYPES) | {"dataset", "seeds", "n_jobs", "seed"}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    opts = {}
    for key, raw in file_values.items():
        try:
            if key in ("seeds", "seed"):
                opts["seeds"] = parse_seeds(raw)
            elif key == "n_jobs":
                opts[key] = int(raw)
            elif key == "dataset":
                opts[key] = raw
            else:
                opts[key] = _FIELD_TYPES[key](raw)
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"config key {key}: {e}") from None
        if key in _CHOICES and opts[key] not in _CHOICES[key]:
            raise UsageError(f"config key {key}: must be one of {_CHOICES[key]}")
    for key in list(_FIELD_TYPES) + ["seeds", "n_jobs", "dataset"]:
        v = getattr(args, key, None)
        if v is not None:
            opts[key] = v
    if opts.get("dataset") not in LOADERS:
        raise UsageError(f"--dataset must be one of {sorted(LOADERS)}")
    opts.setdefault("seeds", [0])
    opts.setdefault("n_jobs", 1)
    return opts


def base_config(opts: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in opts.items() if k in names}
    return TrainConfig(**kw)


def cache_path(dataset: str, explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(CACHE_ENV, DEFAULT_CACHE_DIR)) / f"{dataset}.csv"


def _load_cache(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"dataset cache {path} not found; run `fairnn prepare` first")
    return read_cache(path), file_sha256(path)


def write_manifest(out: Path, command: str, config: dict, cache: Path, sha: str, seeds, outputs, wall):
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "command": command,
        "config": config,
        "dataset": {"cache": str(cache), "sha256": sha},
        "seeds": list(seeds),
        "outputs": sorted(str(p) for p in outputs),
        "wall_clock_seconds": wall,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    ds = load(args.dataset, args.input)
    path = cache_path(args.dataset, args.cache)
    sha = write_cache(ds, path)
    stats = dataset_stats(ds)
    print(f"dataset            {stats['dataset']}")
    print(f"instances          {stats['instances']}")
    print(f"attributes         {stats['attributes']} (encoded width {stats['encoded_width']})")
    print(f"class ratio        1:{stats['class_ratio']:.2f} ({stats['positives']} positive, {stats['negatives']} negative)")
    print(f"protected group    {stats['protected']}: {stats['protected_group_size']}")
    print(f"non-protected      {stats['nonprotected_group_size']}")
    print(f"cache              {path}")
    print(f"sha256             {sha}")
    return EXIT_OK


def cmd_train(args) -> int:
    opts = resolve_options(args)
    cache = cache_path(opts["dataset"], args.cache)
    ds, sha = _load_cache(cache)
    base = base_config(opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    results = run_many([replace(base, seed=s) for s in opts["seeds"]], ds, opts["n_jobs"])
    outputs = []
    for r in results:
        log = out / "logs" / f"seed_{r.config.seed}.csv"
        write_loss_log(r.loss_log, log)
        ckpt = out / "checkpoints" / f"seed_{r.config.seed}.json"
        r.checkpoint["meta"]["dataset_sha256"] = sha
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        ckpt.write_text(json.dumps(r.checkpoint, sort_keys=True), encoding="utf-8")
        outputs += [log, ckpt]
    summary = out / "summary.csv"
    write_csv([r.summary() for r in results], summary)
    outputs.append(summary)
    for r in results:
        rep = r.report
        print(f"seed {r.config.seed}: accuracy={rep.accuracy:.4f} "
              f"balanced_accuracy={rep.balanced_accuracy:.4f} eq_odds={rep.eq_odds:.4f}")  # fmt: skip
    write_manifest(out, "train", base.to_dict(), cache, sha, opts["seeds"], outputs, time.perf_counter() - t0)
    return EXIT_OK


def _checkpoint_dataset(ckpt: dict, cache_arg):
    meta = ckpt.get("meta", {})
    cache = cache_path(meta.get("dataset", ""), cache_arg)
    ds, sha = _load_cache(cache)
    recorded = meta.get("dataset_sha256")
    if recorded and recorded != sha:
        logger.warning("cache %s differs from the one the checkpoint was trained on", cache)
    return ds


def _read_checkpoint(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        ckpt = json.load(fh)
    if ckpt.get("format") != M.CHECKPOINT_FORMAT:
        raise SchemaError(f"{path} is not a fairnn checkpoint")
    return ckpt


def cmd_eval(args) -> int:
    ckpt = _read_checkpoint(args.checkpoint)
    ds = _checkpoint_dataset(ckpt, args.cache)
    report, _, _ = evaluate_checkpoint(ckpt, ds, args.part)
    tc = TrainConfig.from_dict(ckpt["meta"].get("train_config", {}))
    for k, v in report.to_dict().items():
        print(f"{k:18} {v!r}")
    if args.out:
        row = summary_row(report, dataset=tc.dataset, seed=tc.seed, alpha=tc.alpha, beta=tc.beta,
                          preferential_sampling=tc.preferential_sampling, recon=tc.reconstruction)  # fmt: skip
        write_csv([row], args.out)
    return EXIT_OK


def _harness(args, command, run, fieldnames, filename) -> int:
    opts = resolve_options(args)
    cache = cache_path(opts["dataset"], args.cache)
    ds, sha = _load_cache(cache)
    base = base_config(opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows = run(ds, base, opts)
    table = out / filename
    write_csv(rows, table, fieldnames)
    config = base.to_dict()
    config.update({k: getattr(args, k) for k in ("alphas", "betas") if hasattr(args, k)})
    write_manifest(out, command, config, cache, sha, opts["seeds"], [table], time.perf_counter() - t0)
    print(f"wrote {len(rows)} rows to {table}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    def run(ds, base, opts):
        return grid_search(ds, args.alphas, args.betas, opts["seeds"], base, opts["n_jobs"])

    return _harness(args, "gridsearch", run, GRID_FIELDS, "grid.csv")


def cmd_ablate(args) -> int:
    def run(ds, base, opts):
        alpha = opts.get("alpha")
        beta = opts.get("beta")
        return ablate(ds, opts["seeds"], alpha, beta, base, opts["n_jobs"])[0]

    return _harness(args, "ablate", run, ABLATION_FIELDS, "ablation.csv")


def cmd_compare_ae(args) -> int:
    def run(ds, base, opts):
        return compare_ae_losses(ds, opts["seeds"], base, opts["n_jobs"])[0]

    return _harness(args, "compare-ae", run, AE_FIELDS, "ae_comparison.csv")


PLOT_STUB = """\
# Scatter plot of the exported latent coordinates.
# Usage: python {script} [output.png]
import csv
import sys

import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("{csv}", encoding="utf-8")))
fig, ax = plt.subplots(figsize=(6, 6))
for group, colour in (("0", "tab:blue"), ("1", "tab:red")):
    pts = [r for r in rows if r["group"] == group]
    ax.scatter([float(r["z1"]) for r in pts], [float(r["z2"]) for r in pts],
               s=4, alpha=0.4, c=colour, label="protected" if group == "1" else "non-protected")
ax.set_xlabel("z[{i}]")
ax.set_ylabel("z[{j}]")
ax.legend()
fig.savefig(sys.argv[1] if len(sys.argv) > 1 else "latent.png", dpi=150)
"""


def cmd_export_latent(args) -> int:
    ckpt = _read_checkpoint(args.checkpoint)
    ds = _checkpoint_dataset(ckpt, args.cache)
    _, est, sub = evaluate_checkpoint(ckpt, ds, args.part)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "latent.csv"
    i, j = args.dims
    try:
        export_latent_scatter(est.transform(sub.X), sub.s, sub.y, (i, j), csv_path)
    except ValueError as e:
        raise UsageError(str(e)) from None
    script = out / "plot_latent.py"
    script.write_text(PLOT_STUB.format(script=script.name, csv=csv_path.name, i=i, j=j), encoding="utf-8")
    print(f"wrote {csv_path} and {script}")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "gridsearch": cmd_gridsearch,
    "ablate": cmd_ablate,
    "compare-ae": cmd_compare_ae,
    "export-latent": cmd_export_latent,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, SchemaError, json.JSONDecodeError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
