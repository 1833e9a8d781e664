"""Objective terms: mixed reconstruction, group Gaussian KL divergence,
binary cross-entropy, the soft equalized-odds surrogate and their weighted
combinations.

Every term accepts either tape variables (and returns a :class:`~fairnn.numerics.Var`)
or plain arrays (and returns a ``float``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import numerics as nx
from .data import FeatureLayout
from .numerics import NumericError, Tape, Var

RIDGE = 1e-4


class ConfigError(ValueError):
    pass


def check_weight(name: str, w: float) -> float:
    if not (0.0 <= w < 1.0):
        raise ConfigError(f"{name} must lie in [0, 1), got {w}")
    return float(w)


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------


def reconstruction_loss(X, X_hat, layout: FeatureLayout, kind: str = "mixed"):
    """Batch-mean reconstruction error.

    ``kind="mixed"``: squared error on the numerical columns plus
    cross-entropy ``-sum x log p`` on each nominal block, where the nominal
    part of ``X_hat`` holds probabilities.
    ``kind="mse"``: squared error summed over every encoded column.
    """
    if not isinstance(X_hat, Var):
        X_hat = Tape().leaf(nx.as_matrix(X_hat, "X_hat"))
        return float(_recon(X_hat, X, layout, kind).value)
    return _recon(X_hat, X, layout, kind)


def _recon(X_hat: Var, X, layout: FeatureLayout, kind: str) -> Var:
    X = nx.as_matrix(nx.value_of(X), "X")
    B, width = X.shape
    if X_hat.value.shape != X.shape or width != layout.width:
        raise nx.DimensionError(
            f"X {X.shape}, X_hat {X_hat.value.shape} and layout width {layout.width} disagree"
        )
    if kind == "mse":
        return nx.total(nx.square(X_hat - X)) / B
    if kind != "mixed":
        raise ValueError(f"unknown reconstruction kind {kind!r}")
    K = layout.n_numerical
    terms = []
    if K:
        terms.append(nx.total(nx.square(nx.columns(X_hat, 0, K) - X[:, :K])))
    if width > K:
        p = nx.columns(X_hat, K, width)
        observed = p.value[X[:, K:] > 0]
        if np.any(observed < 0) or np.isnan(observed).any():
            raise NumericError("negative or NaN probability on an observed nominal value")
        terms.append(-nx.total(nx.log(p) * X[:, K:]))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out / B


# ---------------------------------------------------------------------------
# Group Gaussians and KL
# ---------------------------------------------------------------------------


@dataclass
class BatchGaussian:
    mean: Var | np.ndarray
    cov: Var | np.ndarray
    n: int

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        return nx.value_of(self.mean), nx.value_of(self.cov)


def gaussian_moments(Z: Var, ridge: float = RIDGE) -> BatchGaussian:
    """Sample mean and biased covariance (+ ``ridge * I``) of the rows of ``Z``."""
    z = Z.value
    n, d = z.shape
    mu = z.mean(axis=0)
    zc = z - mu
    cov = zc.T @ zc / n + ridge * np.eye(d)
    mean_var = Z.tape.record(mu, [Z], lambda g: [np.broadcast_to(g / n, (n, d)).copy()])
    cov_var = Z.tape.record(cov, [Z], lambda g: [zc @ (g + g.T) / n])
    return BatchGaussian(mean_var, cov_var, n)


def fit_group_gaussians(Z, group, ridge: float = RIDGE):
    """Fit one Gaussian per group (``group == 1`` is the protected group).

    Returns ``(protected, nonprotected)``; a group with fewer than two rows
    yields ``None`` in its slot.
    """
    group = np.asarray(group).astype(bool)
    plain = not isinstance(Z, Var)
    if plain:
        Z = Tape().leaf(nx.as_matrix(Z, "Z"))
    if group.shape[0] != Z.value.shape[0]:
        raise nx.DimensionError("group mask length differs from batch size")
    out = []
    for mask in (group, ~group):
        if mask.sum() < 2:
            out.append(None)
            continue
        g = gaussian_moments(nx.take_rows(Z, mask), ridge)
        if plain:
            g = BatchGaussian(g.mean.value, g.cov.value, g.n)
        out.append(g)
    return tuple(out)


def _cholesky(S: np.ndarray, which: str):
    try:
        return cho_factor(S, lower=True)
    except LinAlgError as e:
        w = np.linalg.eigvalsh((S + S.T) / 2)
        raise NumericError(
            f"{which} covariance not positive definite: eigenvalues [{w.min():.3e}, {w.max():.3e}]"
        ) from e


def _kl_value(mu1, S1, mu2, S2):
    d = mu1.shape[0]
    c1 = _cholesky(S1, "first")
    c2 = _cholesky(S2, "second")
    logdet1 = 2.0 * np.log(np.diag(c1[0])).sum()
    logdet2 = 2.0 * np.log(np.diag(c2[0])).sum()
    delta = mu2 - mu1
    sol_delta = cho_solve(c2, delta)
    tr = np.trace(cho_solve(c2, S1))
    kl = 0.5 * (logdet2 - logdet1 - d + tr + delta @ sol_delta)
    return kl, c1, c2, delta, sol_delta


def kl_gaussian(p, q):
    """``KL(p || q)`` for two :class:`BatchGaussian` (or ``(mean, cov)`` pairs).

    Uses Cholesky factorizations for the log-determinants and solves; no
    explicit inverse enters the value.
    """
    if not isinstance(p, BatchGaussian):
        p = BatchGaussian(p[0], p[1], 0)
    if not isinstance(q, BatchGaussian):
        q = BatchGaussian(q[0], q[1], 0)
    parts = [p.mean, p.cov, q.mean, q.cov]
    if not any(isinstance(x, Var) for x in parts):
        mu1, S1 = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (p.mean, p.cov))
        mu2, S2 = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (q.mean, q.cov))
        S1, S2 = np.atleast_2d(S1), np.atleast_2d(S2)
        return float(_kl_value(mu1, S1, mu2, S2)[0])
    tape = next(x.tape for x in parts if isinstance(x, Var))
    mu1, S1, mu2, S2 = (nx.value_of(x) for x in parts)
    kl, c1, c2, delta, sol_delta = _kl_value(mu1, S1, mu2, S2)
    d = mu1.shape[0]

    def vjp(g):
        eye = np.eye(d)
        inv1 = cho_solve(c1, eye)
        inv2 = cho_solve(c2, eye)
        g_mu1 = -g * sol_delta
        g_mu2 = g * sol_delta
        g_S1 = 0.5 * g * (inv2 - inv1)
        g_S2 = 0.5 * g * (inv2 - inv2 @ S1 @ inv2 - np.outer(sol_delta, sol_delta))
        grads = [g_mu1, g_S1, g_mu2, g_S2]
        return [gr for gr, x in zip(grads, parts) if isinstance(x, Var)]

    return tape.record(np.array(kl), [x for x in parts if isinstance(x, Var)], vjp)


# ---------------------------------------------------------------------------
# Classification terms
# ---------------------------------------------------------------------------


def bce_loss(c, c_hat):
    """Mean binary cross-entropy of probabilities ``c_hat`` against labels ``c``."""
    if not isinstance(c_hat, Var):
        return float(_bce(Tape().leaf(c_hat), c).value)
    return _bce(c_hat, c)


def _bce(c_hat: Var, c) -> Var:
    c = np.asarray(c, dtype=np.float64).reshape(c_hat.value.shape)
    B = c.size
    return -nx.total(c * nx.log(c_hat) + (1.0 - c) * nx.log(1.0 - c_hat)) / B


@dataclass
class SoftRates:
    value: Var | float | None
    fpr_dropped: bool = False
    fnr_dropped: bool = False


def soft_equalized_odds(c, c_hat, group) -> SoftRates:
    """Differentiable equalized-odds surrogate.

    Hard error rates are replaced by mean scores: the soft FNR of a group is
    the mean of ``1 - c_hat`` over its positives, the soft FPR the mean of
    ``c_hat`` over its negatives. Returns
    ``|FPR_sbar - FPR_s| + |FNR_sbar - FNR_s|``; a rate difference is
    dropped (and flagged) when either group lacks the needed class.
    """
    plain = not isinstance(c_hat, Var)
    if plain:
        c_hat = Tape().leaf(np.asarray(c_hat, dtype=np.float64).reshape(-1))
    p = c_hat
    c = np.asarray(c).astype(bool).reshape(-1)
    s = np.asarray(group).astype(bool).reshape(-1)
    if not (len(c) == len(s) == p.value.shape[0]):
        raise nx.DimensionError("labels, scores and group mask must have equal length")
    terms = []
    flags = {}
    for label, key in ((False, "fpr_dropped"), (True, "fnr_dropped")):
        prot = s & (c == label)
        nonp = ~s & (c == label)
        if not prot.any() or not nonp.any():
            flags[key] = True
            continue
        flags[key] = False
        r_prot = nx.mean(nx.take_rows(p, prot))
        r_nonp = nx.mean(nx.take_rows(p, nonp))
        # FNR difference equals the negated score-mean difference; |.| absorbs the sign
        terms.append(nx.absolute(r_nonp - r_prot))
    if not terms:
        value = None
    else:
        value = terms[0]
        for t in terms[1:]:
            value = value + t
    if plain and value is not None:
        value = float(value.value)
    return SoftRates(value, **flags)


# ---------------------------------------------------------------------------
# Combinations
# ---------------------------------------------------------------------------


def autoencoder_loss(recon, kl, alpha: float):
    """``(1 - alpha) * recon + alpha * kl``; ``kl=None`` counts as 0."""
    alpha = check_weight("alpha", alpha)
    if kl is None or alpha == 0.0:
        return (1.0 - alpha) * recon
    return (1.0 - alpha) * recon + alpha * kl


def classifier_loss(bce, eqodds, beta: float):
    """``(1 - beta) * bce + beta * eqodds``; ``eqodds=None`` counts as 0."""
    beta = check_weight("beta", beta)
    if eqodds is None or beta == 0.0:
        return (1.0 - beta) * bce
    return (1.0 - beta) * bce + beta * eqodds


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    bce: float
    eqodds_soft: float
    L_ae: float
    L_cls: float
    total: float
    alpha: float
    beta: float
    kl_skipped: bool = False
    eqodds_dropped: tuple[bool, bool] = field(default=(False, False))

    CSV_FIELDS = ("recon", "kl", "bce", "eqodds_soft", "L_ae", "L_cls", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in self.CSV_FIELDS]

    def to_dict(self) -> dict:
        return asdict(self)


def total_loss(L_ae, L_cls):
    return L_ae + L_cls


def _f(x) -> float:
    if x is None:
        return 0.0
    return float(nx.value_of(x))


def breakdown(recon, kl, bce, eo: SoftRates, alpha: float, beta: float):
    """Combine term values into the joint objective.

    Returns ``(objective, LossBreakdown)`` where ``objective`` keeps the type
    of the inputs (tape variable or float).
    """
    L_ae = autoencoder_loss(recon, kl, alpha)
    L_cls = classifier_loss(bce, eo.value, beta)
    obj = total_loss(L_ae, L_cls)
    lb = LossBreakdown(
        recon=_f(recon),
        kl=_f(kl),
        bce=_f(bce),
        eqodds_soft=_f(eo.value),
        L_ae=_f(L_ae),
        L_cls=_f(L_cls),
        total=_f(obj),
        alpha=alpha,
        beta=beta,
        kl_skipped=kl is None and alpha > 0,
        eqodds_dropped=(eo.fpr_dropped, eo.fnr_dropped),
    )
    return obj, lb
