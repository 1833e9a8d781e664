"""Experiment protocol: single runs, grid search, ablations and the
reconstruction-loss comparison, plus their CSV logs."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from . import model as M
from .data import AttributeSchema, DataWarning, Dataset, SplitSpec, encode, split
from .estimator import FairNNClassifier
from .losses import ConfigError, LossBreakdown, check_weight
from .metrics import (
    REPORT_FIELDS,
    FairnessReport,
    evaluate,
    format_value,
    latent_probe_auc,
    selection_score,
    summary_row,
    write_csv,
)

logger = logging.getLogger(__name__)

GRID_ALPHAS = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
GRID_BETAS = (0.1, 0.2, 0.3, 0.4, 0.5)
SELECTED_WEIGHTS = {"adult": (0.9, 0.2), "bank": (0.8, 0.4)}


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.9
    beta: float = 0.2
    batch_size: int = 512
    lr: float = 0.002
    epochs: int = 100
    seed: int = 0
    preferential_sampling: bool = False
    ps_epochs: int = 20
    ps_rule: str = "expected"
    dataset: str = "adult"
    reconstruction: str = "mixed"
    encoder_widths: tuple[int, ...] = (64, 32)
    latent_dim: int = 10
    classifier_hidden: int = 32

    def __post_init__(self):
        check_weight("alpha", self.alpha)
        check_weight("beta", self.beta)
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 0 or self.ps_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    def estimator(self, layout) -> FairNNClassifier:
        return FairNNClassifier(
            alpha=self.alpha,
            beta=self.beta,
            layout=layout,
            reconstruction=self.reconstruction,
            encoder_widths=self.encoder_widths,
            latent_dim=self.latent_dim,
            classifier_hidden=self.classifier_hidden,
            batch_size=self.batch_size,
            lr=self.lr,
            epochs=self.epochs,
            preferential_sampling=self.preferential_sampling,
            ps_epochs=self.ps_epochs,
            ps_rule=self.ps_rule,
            random_state=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "encoder_widths" in d:
            d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


@dataclass
class RunResult:
    config: TrainConfig
    report: FairnessReport
    val_report: FairnessReport
    checkpoint: dict
    loss_log: list[LossBreakdown]
    history: list[dict]
    best_epoch: int
    wall_clock: float
    estimator: FairNNClassifier = field(repr=False)
    test: Dataset = field(repr=False)

    def summary(self) -> dict:
        c = self.config
        return summary_row(
            self.report,
            dataset=c.dataset,
            seed=c.seed,
            alpha=c.alpha,
            beta=c.beta,
            preferential_sampling=c.preferential_sampling,
            recon=c.reconstruction,
        )

    def latent(self) -> np.ndarray:
        return self.estimator.transform(self.test.X)


def _logging_clamps(fn, *args):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DataWarning)
        out = fn(*args)
    for w in caught:
        if issubclass(w.category, DataWarning):
            logger.info("%s", w.message)
        else:
            warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    return out


def prepare_split(dataset: Dataset, spec: SplitSpec):
    """Refit normalization on the training portion and cut the three parts.

    Test values above the fitted maxima are clamped; those warnings go to
    the log rather than to the caller.
    """
    fit_idx = np.concatenate([spec.train_idx, spec.val_idx])
    ds = _logging_clamps(dataset.refit, fit_idx)
    return ds, ds.subset(spec.train_idx), ds.subset(spec.val_idx), ds.subset(spec.test_idx)


def train(config: TrainConfig, dataset: Dataset, spec: SplitSpec | None = None) -> RunResult:
    """Train one model; the split defaults to ``split(dataset, config.seed)``."""
    spec = spec if spec is not None else split(dataset, config.seed)
    ds, tr, va, te = prepare_split(dataset, spec)
    t0 = time.perf_counter()
    est = config.estimator(ds.layout)
    est.fit(tr.X, tr.y, tr.s, eval_set=(va.X, va.y, va.s))
    wall = time.perf_counter() - t0
    meta = {
        "dataset": dataset.name,
        "split_seed": spec.seed,
        "train_config": config.to_dict(),
        "schema": [a.to_dict() for a in ds.schema],
        "best_epoch": est.best_epoch_,
    }
    ckpt = M.checkpoint_dict(est.config_, est.params_, config.seed, meta)
    report = est.fairness_report(te.X, te.y, te.s)
    logger.info(
        "%s seed=%d alpha=%.2f beta=%.2f ps=%s: acc=%.4f bacc=%.4f eq_odds=%.4f (%.1fs)",
        dataset.name, config.seed, config.alpha, config.beta, config.preferential_sampling,
        report.accuracy, report.balanced_accuracy, report.eq_odds, wall,
    )  # fmt: skip
    return RunResult(
        config=config,
        report=report,
        val_report=est.fairness_report(va.X, va.y, va.s),
        checkpoint=ckpt,
        loss_log=est.loss_log_,
        history=est.history_,
        best_epoch=est.best_epoch_,
        wall_clock=wall,
        estimator=est,
        test=te,
    )


def evaluate_checkpoint(ckpt: dict, dataset: Dataset, part: str = "test"):
    """Rebuild the split recorded in ``ckpt`` and evaluate its parameters.

    Returns ``(report, estimator, part_dataset)``.
    """
    config, params = M.params_from_dict(ckpt)
    meta = ckpt["meta"]
    spec = split(dataset, meta["split_seed"])
    schema = tuple(AttributeSchema.from_dict(a) for a in meta["schema"])
    ds = replace(dataset, schema=schema, X=_logging_clamps(encode, dataset.raw, schema))
    idx = {"train": spec.train_idx, "val": spec.val_idx, "test": spec.test_idx}[part]
    sub = ds.subset(idx)
    est = FairNNClassifier.from_params(config, params)
    return est.fairness_report(sub.X, sub.y, sub.s), est, sub


# ---------------------------------------------------------------------------
# Logs
# ---------------------------------------------------------------------------

LOSS_LOG_FIELDS = ("step",) + LossBreakdown.CSV_FIELDS


def write_loss_log(log: Sequence[LossBreakdown], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_LOG_FIELDS)
        for i, lb in enumerate(log):
            w.writerow([i] + [repr(float(v)) for v in lb.as_row()])


# ---------------------------------------------------------------------------
# Harnesses
# ---------------------------------------------------------------------------


def _median(values) -> float:
    a = np.asarray([v for v in values if not np.isnan(v)], dtype=np.float64)
    return float(np.median(a)) if a.size else float("nan")


def median_report(reports: Sequence[FairnessReport]) -> FairnessReport:
    return FairnessReport(**{f: _median([getattr(r, f) for r in reports]) for f in REPORT_FIELDS})


def run_many(configs: Sequence[TrainConfig], dataset: Dataset, n_jobs: int = 1) -> list[RunResult]:
    """Train every config; results keep the input order."""
    if n_jobs == 1:
        return [train(c, dataset) for c in configs]
    return Parallel(n_jobs=n_jobs)(delayed(train)(c, dataset) for c in configs)


def grid_search(
    dataset: Dataset,
    alphas: Sequence[float] = GRID_ALPHAS,
    betas: Sequence[float] = GRID_BETAS,
    seeds: Sequence[int] = (0,),
    base: TrainConfig | None = None,
    n_jobs: int = 1,
) -> list[dict]:
    """Train every ``(alpha, beta)`` cell on every seed and rank the cells.

    Ranking uses the median over seeds of the validation score
    ``(1 - balanced_accuracy) + eq_odds`` (ties: smaller alpha, then beta).
    Each returned row also carries median test figures.
    """
    if not alphas or not betas or not seeds:
        raise ConfigError("grids and seeds must be non-empty")
    base = base or TrainConfig(dataset=dataset.name)
    cells = [(a, b) for a in alphas for b in betas]
    configs = [replace(base, alpha=a, beta=b, seed=s) for a, b in cells for s in seeds]
    results = run_many(configs, dataset, n_jobs)
    rows = []
    for i, (a, b) in enumerate(cells):
        runs = results[i * len(seeds) : (i + 1) * len(seeds)]
        row = {"alpha": a, "beta": b, "n_seeds": len(seeds)}
        row["val_score"] = _median([selection_score(r.val_report) for r in runs])
        row.update(median_report([r.report for r in runs]).to_dict())
        rows.append(row)
    rows.sort(key=lambda r: (r["val_score"], r["alpha"], r["beta"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return rows


GRID_FIELDS = ("rank", "alpha", "beta", "n_seeds", "val_score") + REPORT_FIELDS


def ablation_configs(dataset: str, alpha: float, beta: float, base: TrainConfig | None = None):
    base = base or TrainConfig(dataset=dataset)
    pairs = [(0.0, 0.0), (alpha, 0.0), (0.0, beta), (alpha, beta)]
    return [
        replace(base, dataset=dataset, alpha=a, beta=b, preferential_sampling=ps)
        for ps in (False, True)
        for a, b in pairs
    ]


def ablate(
    dataset: Dataset,
    seeds: Sequence[int] = (0, 1, 2),
    alpha: float | None = None,
    beta: float | None = None,
    base: TrainConfig | None = None,
    n_jobs: int = 1,
) -> tuple[list[dict], list[RunResult]]:
    """Four weight settings times preferential sampling off/on.

    Returns one row per setting with median test figures over ``seeds``, and
    the underlying runs.
    """
    a0, b0 = SELECTED_WEIGHTS.get(dataset.name, (0.9, 0.2))
    alpha = a0 if alpha is None else alpha
    beta = b0 if beta is None else beta
    cells = ablation_configs(dataset.name, alpha, beta, base)
    configs = [replace(c, seed=s) for c in cells for s in seeds]
    results = run_many(configs, dataset, n_jobs)
    rows = []
    for i, c in enumerate(cells):
        runs = results[i * len(seeds) : (i + 1) * len(seeds)]
        row = {
            "dataset": dataset.name,
            "alpha": c.alpha,
            "beta": c.beta,
            "preferential_sampling": c.preferential_sampling,
            "n_seeds": len(seeds),
        }
        row.update(median_report([r.report for r in runs]).to_dict())
        rows.append(row)
    return rows, results


ABLATION_FIELDS = ("dataset", "alpha", "beta", "preferential_sampling", "n_seeds") + REPORT_FIELDS


def compare_ae_losses(
    dataset: Dataset, seeds: Sequence[int] = (0, 1, 2), base: TrainConfig | None = None, n_jobs: int = 1
) -> tuple[list[dict], list[RunResult]]:
    """Test accuracy of the mixed ("AE-M") vs squared-error ("AE-N")
    reconstruction loss with both penalties off; identical seeds and splits."""
    base = base or TrainConfig(dataset=dataset.name)
    base = replace(base, alpha=0.0, beta=0.0, preferential_sampling=False)
    variants = (("AE-M", "mixed"), ("AE-N", "mse"))
    configs = [replace(base, reconstruction=k, seed=s) for _, k in variants for s in seeds]
    results = run_many(configs, dataset, n_jobs)
    rows = []
    for (name, _), start in zip(variants, range(0, len(results), len(seeds))):
        for r in results[start : start + len(seeds)]:
            rows.append(
                {
                    "variant": name,
                    "seed": r.config.seed,
                    "accuracy": r.report.accuracy,
                    "balanced_accuracy": r.report.balanced_accuracy,
                }
            )
    return rows, results


AE_FIELDS = ("variant", "seed", "accuracy", "balanced_accuracy")


def probe_auc(result: RunResult, seed: int = 0) -> float:
    return latent_probe_auc(result.latent(), result.test.s, seed=seed)

