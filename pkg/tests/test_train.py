import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from fairnn.losses import ConfigError
from fairnn.train import (
    GRID_ALPHAS,
    GRID_BETAS,
    SELECTED_WEIGHTS,
    TrainConfig,
    ablate,
    ablation_configs,
    compare_ae_losses,
    evaluate_checkpoint,
    grid_search,
    median_report,
    probe_auc,
    train,
    write_loss_log,
)

from helpers import synthetic_dataset

FAST = TrainConfig(epochs=3, batch_size=32, encoder_widths=(8,), latent_dim=3, classifier_hidden=4, ps_epochs=2)


@pytest.fixture(scope="module")
def ds():
    return synthetic_dataset(n=200)


@pytest.fixture(scope="module")
def run(ds):
    return train(FAST, ds)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.batch_size, c.lr, c.epochs, c.ps_epochs) == (512, 0.002, 100, 20)

    def test_default_grids(self):
        assert SELECTED_WEIGHTS == {"adult": (0.9, 0.2), "bank": (0.8, 0.4)}
        assert len(GRID_ALPHAS) * len(GRID_BETAS) == 30

    @pytest.mark.parametrize("kw", [dict(alpha=1.0), dict(beta=1.2), dict(batch_size=1), dict(lr=-1.0), dict(epochs=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        assert TrainConfig.from_dict(FAST.to_dict()) == FAST

    def test_baseline_is_degenerate_config(self, ds):
        r = train(replace(FAST, alpha=0.0, beta=0.0), ds)
        assert all(lb.kl == 0.0 and lb.eqodds_soft == 0.0 for lb in r.loss_log)
        assert not any(lb.kl_skipped for lb in r.loss_log)


class TestTrain:
    def test_result(self, run):
        assert 0 <= run.report.accuracy <= 1
        assert run.best_epoch == run.checkpoint["meta"]["best_epoch"]
        assert len(run.loss_log) == 3 * math.ceil(80 / 32)
        row = run.summary()
        assert row["dataset"] == "adult" and row["alpha"] == 0.9 and row["recon"] == "mixed"

    def test_checkpoint_reproduces_test_metrics(self, run, ds):
        report, _, _ = evaluate_checkpoint(run.checkpoint, ds)
        assert report == run.report

    def test_same_seed_same_result(self, run, ds):
        again = train(FAST, ds)
        assert again.report == run.report
        assert [lb.total for lb in again.loss_log] == [lb.total for lb in run.loss_log]

    def test_other_seed_other_split(self, run, ds):
        assert train(replace(FAST, seed=1), ds).checkpoint["meta"]["split_seed"] == 1

    def test_loss_log_csv(self, run, tmp_path):
        path = tmp_path / "log.csv"
        write_loss_log(run.loss_log, path)
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["step", "recon", "kl", "bce", "eqodds_soft", "L_ae", "L_cls", "total"]
        assert len(rows) == len(run.loss_log) + 1
        assert float(rows[1][-1]) == run.loss_log[0].total

    def test_latent_probe(self, run):
        assert 0 <= probe_auc(run) <= 1


class TestHarnesses:
    def test_grid_search(self, ds):
        rows = grid_search(ds, alphas=(0.0, 0.5), betas=(0.0, 0.3), seeds=(0, 1), base=FAST)
        assert len(rows) == 4
        assert [r["rank"] for r in rows] == [1, 2, 3, 4]
        scores = [r["val_score"] for r in rows]
        assert scores == sorted(scores)

    def test_grid_requires_values(self, ds):
        with pytest.raises(ConfigError):
            grid_search(ds, alphas=(), betas=(0.1,), base=FAST)

    def test_ablation_cells(self):
        cells = ablation_configs("adult", 0.9, 0.2)
        assert {(c.alpha, c.beta, c.preferential_sampling) for c in cells} == {
            (a, b, ps) for a, b in [(0, 0), (0.9, 0), (0, 0.2), (0.9, 0.2)] for ps in (False, True)
        }

    def test_ablate(self, ds):
        rows, results = ablate(ds, seeds=(0,), base=FAST)
        assert len(rows) == 8 and len(results) == 8
        assert rows[0]["alpha"] == 0.0 and rows[-1]["alpha"] == 0.9

    def test_compare_ae(self, ds):
        rows, results = compare_ae_losses(ds, seeds=(0, 1), base=FAST)
        assert [r["variant"] for r in rows] == ["AE-M", "AE-M", "AE-N", "AE-N"]
        assert all(r.config.alpha == 0 and r.config.beta == 0 for r in results)
        # identical seeds share the split
        assert results[0].test.row_ids.tolist() == results[2].test.row_ids.tolist()

    def test_parallel_matches_serial(self, ds):
        serial = grid_search(ds, alphas=(0.5,), betas=(0.2,), seeds=(0, 1), base=FAST)
        parallel = grid_search(ds, alphas=(0.5,), betas=(0.2,), seeds=(0, 1), base=FAST, n_jobs=2)
        assert serial == parallel

    def test_median_report_skips_missing(self, run):
        nan_report = replace(run.report, eq_odds=float("nan"))
        med = median_report([run.report, nan_report, run.report])
        assert med.eq_odds == run.report.eq_odds
        assert med.accuracy == pytest.approx(run.report.accuracy)


def test_training_loss_decreases(ds):
    log = train(replace(FAST, epochs=20), ds).loss_log
    tenth = max(1, len(log) // 10)
    totals = [lb.total for lb in log]
    assert np.median(totals[-tenth:]) < np.median(totals[:tenth])
