"""Shared builders for the test suite: toy networks, toy batches and a
gradient check against central finite differences."""

import os
from pathlib import Path

import numpy as np

from fairnn import losses as L
from fairnn import model as M
from fairnn import numerics as nx
from fairnn.data import FeatureLayout
from fairnn.estimator import objective

ROOT = Path(__file__).resolve().parents[1]
ADULT_PATH = Path(os.environ.get("FAIRNN_ADULT_PATH", ROOT / "data" / "adult"))
BANK_PATH = Path(os.environ.get("FAIRNN_BANK_PATH", ROOT / "data" / "bank" / "bank-full.csv"))

TERMS = ("reconstruction", "kl", "bce", "soft_eq_odds", "total")


def toy_problem(seed: int, batch: int = 12):
    """A small random network and a batch that has both groups and both
    classes in each group. Widths stay at or below 8, latent width at or below 4."""
    rng = np.random.default_rng(seed)
    n_num = int(rng.integers(1, 3))
    blocks = tuple(int(b) for b in rng.integers(2, 4, size=int(rng.integers(1, 3))))
    layout = FeatureLayout(n_num, blocks)
    width = layout.width
    config = M.FairNNConfig(
        input_dim=width,
        layout=layout,
        encoder_widths=(int(rng.integers(4, 9)),),
        latent_dim=int(rng.integers(2, 5)),
        classifier_hidden=int(rng.integers(3, 9)),
    )
    params = M.init_params(config, rng)
    X = np.zeros((batch, width))
    X[:, :n_num] = rng.uniform(0, 1, size=(batch, n_num))
    for sl in layout.block_slices():
        X[np.arange(batch), sl.start + rng.integers(0, sl.stop - sl.start, size=batch)] = 1.0
    # two rows for each (group, class) cell, the rest random
    s = np.array([1, 1, 1, 1, 0, 0, 0, 0] + list(rng.integers(0, 2, size=batch - 8)))
    y = np.array([1, 1, 0, 0, 1, 1, 0, 0] + list(rng.integers(0, 2, size=batch - 8)))
    return config, params, X, y, s


def term_value(term, params, X, y, s, layout, alpha=0.6, beta=0.3):
    """Evaluate one objective term on a fresh tape; returns ``(tape var, leaves)``."""
    tape = nx.Tape()
    fw = M.forward(tape, params, X, layout)
    if term == "reconstruction":
        out = L.reconstruction_loss(X, fw.X_hat, layout)
    elif term == "kl":
        out = L.kl_gaussian(*L.fit_group_gaussians(fw.Z, s))
    elif term == "bce":
        out = L.bce_loss(y, fw.prob)
    elif term == "soft_eq_odds":
        out = L.soft_equalized_odds(y, fw.prob, s).value
    elif term == "total":
        out, _ = objective(fw, X, y, s, layout, alpha, beta)
    else:
        raise ValueError(term)
    return out, fw.leaves


def gradient_check(term, seed, h=1e-5):
    """Norm-wise relative error between tape and finite-difference gradients,
    taken over all parameters at once.

    Per-array ratios are not used: some arrays have an exactly zero gradient
    (the KL term ignores a shift of the latent codes), where both sides are
    pure rounding noise.
    """
    config, params, X, y, s = toy_problem(seed)
    out, leaves = term_value(term, params, X, y, s, config.layout)
    grads = nx.backward(out, leaves)
    analytic = [grads[v.index] for v in leaves]

    def f(arrays):
        return float(term_value(term, params, X, y, s, config.layout)[0].value)

    numeric = nx.finite_difference_gradient(f, params.arrays(), h=h)
    return nx.relative_error(_flatten(analytic), _flatten(numeric))


def _flatten(arrays):
    return np.concatenate([a.reshape(-1) for a in arrays])


def synthetic_dataset(n=240, seed=0, name="adult"):
    """A small biased tabular dataset: the label leans on ``x1`` and the
    protected group shifts ``x1`` down."""
    import pandas as pd

    from fairnn.data import Dataset, TabularEncoder

    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, n)
    x1 = np.clip(rng.normal(5 - 1.5 * s, 1.5), 0.1, 10).round(3)
    x2 = rng.integers(1, 50, n).astype(float)
    colour = rng.choice(["red", "green", "blue"], n)
    y = (x1 + rng.normal(0, 1, n) > 4.5).astype(np.int8)
    raw = pd.DataFrame({"x1": x1, "x2": x2, "colour": colour, "grp": np.where(s == 1, "p", "q")})
    enc = TabularEncoder(numerical=["x1", "x2"], nominal=["colour", "grp"]).fit(raw)
    return Dataset(
        name=name,
        schema=tuple(enc.schema_),
        X=enc.transform(raw),
        y=y,
        s=s.astype(np.int8),
        row_ids=np.arange(n),
        raw=raw,
        protected="grp",
    )


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
