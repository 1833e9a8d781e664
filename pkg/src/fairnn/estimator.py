"""scikit-learn compatible estimator for joint fair representation and
classifier learning."""

from __future__ import annotations

import logging
import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import losses as L
from . import model as M
from . import numerics as nx
from .data import FeatureLayout, plan_preferential_sample
from .metrics import evaluate, selection_score

logger = logging.getLogger(__name__)


class TrainingDiverged(nx.NumericError):
    """The objective became non-finite during training."""


def _check_sensitive(s, n: int, name: str = "sensitive_features") -> np.ndarray:
    if s is None:
        raise ValueError(f"{name} is required")
    s = np.asarray(s).reshape(-1)
    if s.shape[0] != n:
        raise ValueError(f"{name} has {s.shape[0]} entries, expected {n}")
    if not np.isin(s, (0, 1)).all():
        raise ValueError(f"{name} must be binary (1 = protected group)")
    return s.astype(np.int8)


class FairNNClassifier(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Autoencoder and classifier trained jointly under two fairness penalties.

    The objective per batch is ``(1 - alpha) * recon + alpha * KL`` for the
    autoencoder plus ``(1 - beta) * BCE + beta * soft_eq_odds`` for the
    classifier. The KL term compares Gaussians fitted to the latent codes of
    the protected and non-protected rows of the batch.

    Parameters
    ----------
    alpha, beta : float in [0, 1)
        Weights of the KL and equalized-odds penalties.
    layout : FeatureLayout, optional
        Column layout of ``X`` (numerical columns first, then one-hot
        blocks). Defaults to treating every column as numerical.
    reconstruction : {"mixed", "mse"}
        Mixed squared-error / cross-entropy loss, or squared error on every
        column.
    encoder_widths, latent_dim, classifier_hidden : architecture.
    batch_size, lr, epochs : optimization settings (Adam).
    preferential_sampling : bool
        After the main phase, resample the training set around the decision
        boundary and train ``ps_epochs`` more epochs.
    ps_rule : {"expected", "difference"}
        How many instances each community moves; see
        :func:`fairnn.data.plan_preferential_sample`.
    random_state : int
        Seeds initialization and shuffling.

    Attributes
    ----------
    params_ : ParamStore
        Selected parameters (lowest validation score if validation data was
        given, otherwise the final epoch).
    config_ : FairNNConfig
    loss_log_ : list of LossBreakdown, one per optimizer step.
    history_ : list of dict, per-epoch validation figures.
    best_epoch_ : int
    """

    def __init__(
        self,
        alpha=0.9,
        beta=0.2,
        layout=None,
        reconstruction="mixed",
        encoder_widths=(64, 32),
        latent_dim=10,
        classifier_hidden=32,
        batch_size=512,
        lr=0.002,
        epochs=100,
        preferential_sampling=False,
        ps_epochs=20,
        ps_rule="expected",
        random_state=0,
    ):
        self.alpha = alpha
        self.beta = beta
        self.layout = layout
        self.reconstruction = reconstruction
        self.encoder_widths = encoder_widths
        self.latent_dim = latent_dim
        self.classifier_hidden = classifier_hidden
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.preferential_sampling = preferential_sampling
        self.ps_epochs = ps_epochs
        self.ps_rule = ps_rule
        self.random_state = random_state

    # -- fitting ----------------------------------------------------------

    def _validate_params(self):
        L.check_weight("alpha", self.alpha)
        L.check_weight("beta", self.beta)
        if self.batch_size < 2:
            raise L.ConfigError("batch_size must be at least 2")
        if not self.lr > 0:
            raise L.ConfigError("lr must be positive")
        if self.reconstruction not in ("mixed", "mse"):
            raise L.ConfigError(f"unknown reconstruction {self.reconstruction!r}")

    def fit(self, X, y, sensitive_features=None, eval_set=None):
        """Train on ``(X, y)`` with protected-group flags ``sensitive_features``.

        ``eval_set=(X_val, y_val, s_val)`` enables per-epoch model selection
        on ``(1 - balanced_accuracy) + eq_odds``.
        """
        self._validate_params()
        X, y = check_X_y(X, y, dtype=np.float64)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be binary 0/1")
        y = y.astype(np.int8)
        s = _check_sensitive(sensitive_features, X.shape[0])
        if eval_set is not None:
            Xv, yv, sv = eval_set
            Xv, yv = check_X_y(Xv, yv, dtype=np.float64)
            sv = _check_sensitive(sv, Xv.shape[0], "eval_set sensitive features")
            eval_set = (Xv, yv.astype(np.int8), sv)

        layout = self.layout if self.layout is not None else FeatureLayout.all_numerical(X.shape[1])
        self.config_ = M.FairNNConfig(
            input_dim=X.shape[1],
            layout=layout,
            encoder_widths=tuple(self.encoder_widths),
            latent_dim=self.latent_dim,
            classifier_hidden=self.classifier_hidden,
        )
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self._rng = np.random.default_rng(self.random_state)
        self.params_ = M.init_params(self.config_, self._rng)
        self.loss_log_ = []
        self.history_ = []

        self.best_epoch_ = self._run_phase(X, y, s, self.epochs, eval_set, phase="main")
        self.ps_plan_ = None
        if self.preferential_sampling and self.ps_epochs > 0:
            scores = M.classify_batch(self.params_, M.encode_batch(self.params_, X))
            plan = plan_preferential_sample(y, s, scores, rule=self.ps_rule)
            keep = np.setdiff1d(np.arange(X.shape[0]), plan.removed)
            idx = np.concatenate([keep, plan.duplicated])
            self.ps_plan_ = plan
            logger.info("preferential sampling k=%s: %d -> %d rows", plan.k, X.shape[0], idx.size)
            self.best_epoch_ = self._run_phase(
                X[idx], y[idx], s[idx], self.ps_epochs, eval_set, phase="ps"
            )
        del self._rng
        return self

    def _run_phase(self, X, y, s, epochs, eval_set, phase):
        n = X.shape[0]
        best, best_score, best_epoch = None, math.inf, len(self.history_) - 1
        for _ in range(epochs):
            perm = self._rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = perm[start : start + self.batch_size]
                self._step(X[idx], y[idx], s[idx])
            epoch = len(self.history_)
            record = {"epoch": epoch, "phase": phase}
            if eval_set is not None:
                rep = self._evaluate(*eval_set)
                score = selection_score(rep)
                record.update(rep.to_dict(), selection=score)
                if score < best_score:
                    best, best_score, best_epoch = self.params_.copy(), score, epoch
            self.history_.append(record)
        if eval_set is None or best is None:
            return len(self.history_) - 1
        self.params_ = best
        return best_epoch

    def _step(self, Xb, yb, sb):
        tape = nx.Tape()
        try:
            fw = M.forward(tape, self.params_, Xb, self.config_.layout)
            obj, lb = objective(fw, Xb, yb, sb, self.config_.layout, self.alpha, self.beta, self.reconstruction)
        except nx.NumericError as e:
            raise TrainingDiverged(f"step {len(self.loss_log_)}: {e}") from e
        if not math.isfinite(lb.total):
            raise TrainingDiverged(
                f"non-finite loss at step {len(self.loss_log_)}: {lb.to_dict()}"
            )
        grads = nx.backward(obj, fw.leaves)
        nx.adam_step(self.params_, [grads[v.index] for v in fw.leaves], self.lr)
        self.loss_log_.append(lb)

    def _evaluate(self, X, y, s):
        return evaluate(y, M.hard_labels(self._proba(X)), s)

    # -- inference --------------------------------------------------------

    def _proba(self, X) -> np.ndarray:
        return M.classify_batch(self.params_, M.encode_batch(self.params_, X))

    def _check(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        p = self._proba(self._check(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        """Hard labels: positive iff the probability is at least 0.5."""
        return M.hard_labels(self._proba(self._check(X)))

    def transform(self, X) -> np.ndarray:
        """Latent codes of ``X``."""
        return M.encode_batch(self.params_, self._check(X))

    def reconstruct(self, X) -> np.ndarray:
        X = self._check(X)
        return M.decode_batch(self.params_, M.encode_batch(self.params_, X), self.config_.layout)

    def fairness_report(self, X, y, sensitive_features):
        X = self._check(X)
        s = _check_sensitive(sensitive_features, X.shape[0])
        return evaluate(np.asarray(y), M.hard_labels(self._proba(X)), s)

    @classmethod
    def from_params(cls, config: M.FairNNConfig, params, **kwargs) -> "FairNNClassifier":
        """Wrap already-trained parameters (e.g. from a checkpoint)."""
        est = cls(
            layout=config.layout,
            encoder_widths=config.encoder_widths,
            latent_dim=config.latent_dim,
            classifier_hidden=config.classifier_hidden,
            **kwargs,
        )
        est.config_ = config
        est.params_ = params
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = config.input_dim
        return est


def objective(fw: M.Forward, X, y, s, layout, alpha, beta, reconstruction="mixed"):
    """Joint objective on one batch; returns ``(tape scalar, LossBreakdown)``."""
    recon = L.reconstruction_loss(X, fw.X_hat, layout, kind=reconstruction)
    kl = None
    if alpha > 0:
        g_s, g_sbar = L.fit_group_gaussians(fw.Z, s)
        if g_s is not None and g_sbar is not None:
            kl = L.kl_gaussian(g_s, g_sbar)
    bce = L.bce_loss(y, fw.prob)
    eo = L.soft_equalized_odds(y, fw.prob, s) if beta > 0 else L.SoftRates(None)
    return L.breakdown(recon, kl, bce, eo, alpha, beta)
