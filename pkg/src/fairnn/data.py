"""Loading, cleaning, encoding, splitting and resampling of the tabular
benchmarks (UCI Adult and Bank Marketing).

Encoded feature matrices use a fixed column layout: all numerical attributes
first (max-normalized to [0, 1]), then one one-hot block per nominal
attribute, in schema order. :class:`FeatureLayout` describes that layout to
the model and the reconstruction loss.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

logger = logging.getLogger(__name__)

NUMERICAL = "numerical"
NOMINAL = "nominal"
CACHE_MAGIC = "#fairnn-dataset"
CACHE_VERSION = 1


class SchemaError(ValueError):
    pass


class DataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    name: str
    kind: str
    values: tuple[str, ...] = ()
    max: float | None = None

    def __post_init__(self):
        if self.kind == NOMINAL:
            if not self.values:
                raise SchemaError(f"nominal attribute {self.name!r} has no values")
            if len(set(self.values)) != len(self.values):
                raise SchemaError(f"nominal attribute {self.name!r} has duplicate values")
        elif self.kind == NUMERICAL:
            if self.max is None or not self.max > 0:
                raise SchemaError(f"numerical attribute {self.name!r} has max {self.max!r}; must be > 0")
        else:
            raise SchemaError(f"unknown attribute kind {self.kind!r}")

    @property
    def width(self) -> int:
        return len(self.values) if self.kind == NOMINAL else 1

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == NOMINAL:
            d["values"] = list(self.values)
        else:
            d["max"] = self.max
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttributeSchema":
        return cls(d["name"], d["kind"], tuple(d.get("values", ())), d.get("max"))


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of an encoded matrix: ``n_numerical`` leading columns,
    then one block per nominal attribute."""

    n_numerical: int
    blocks: tuple[int, ...] = ()

    @property
    def width(self) -> int:
        return self.n_numerical + sum(self.blocks)

    def block_slices(self) -> list[slice]:
        out, start = [], self.n_numerical
        for w in self.blocks:
            out.append(slice(start, start + w))
            start += w
        return out

    @classmethod
    def from_schema(cls, schema: Sequence[AttributeSchema]) -> "FeatureLayout":
        return cls(
            sum(1 for a in schema if a.kind == NUMERICAL),
            tuple(a.width for a in schema if a.kind == NOMINAL),
        )

    @classmethod
    def all_numerical(cls, width: int) -> "FeatureLayout":
        return cls(width, ())


def ordered_schema(schema: Sequence[AttributeSchema]) -> list[AttributeSchema]:
    """Numerical attributes first, nominal after; relative order kept."""
    return [a for a in schema if a.kind == NUMERICAL] + [a for a in schema if a.kind == NOMINAL]


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


class TabularEncoder(TransformerMixin, BaseEstimator):
    """Max-normalize numerical columns and one-hot encode nominal ones.

    Parameters
    ----------
    numerical : list of str
        Columns treated as numerical.
    nominal : list of str
        Columns treated as nominal.
    vocabularies : dict, optional
        Fixed value lists for nominal columns. Columns not listed get the
        sorted values observed during ``fit``.

    Attributes
    ----------
    schema_ : list of AttributeSchema
        Fitted per-attribute metadata, numerical attributes first.
    layout_ : FeatureLayout
    """

    def __init__(self, numerical=(), nominal=(), vocabularies=None):
        self.numerical = numerical
        self.nominal = nominal
        self.vocabularies = vocabularies

    def fit(self, X: pd.DataFrame, y=None):
        vocab = dict(self.vocabularies or {})
        schema = []
        for col in self.numerical:
            col_max = float(pd.to_numeric(X[col]).max())
            if not col_max > 0:
                raise SchemaError(f"numerical column {col!r} has max {col_max}; cannot normalize")
            schema.append(AttributeSchema(col, NUMERICAL, max=col_max))
        for col in self.nominal:
            values = vocab.get(col)
            if values is None:
                values = sorted(map(str, pd.unique(X[col])))
            schema.append(AttributeSchema(col, NOMINAL, tuple(values)))
        self.schema_ = schema
        self.layout_ = FeatureLayout.from_schema(schema)
        return self

    def transform(self, X: pd.DataFrame) -> np.ndarray:
        check_is_fitted(self, "schema_")
        return encode(X, self.schema_)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "schema_")
        names = []
        for a in self.schema_:
            if a.kind == NUMERICAL:
                names.append(a.name)
            else:
                names.extend(f"{a.name}={v}" for v in a.values)
        return np.asarray(names, dtype=object)


def encode(raw: pd.DataFrame, schema: Sequence[AttributeSchema]) -> np.ndarray:
    """Encode ``raw`` rows with a fixed schema (numerical first, then one-hot).

    Numerical values are divided by the schema maximum and clamped to [0, 1];
    clamping emits a :class:`DataWarning`. Unknown nominal values raise
    :class:`SchemaError` naming the offending rows.
    """
    schema = ordered_schema(schema)
    n = len(raw)
    layout = FeatureLayout.from_schema(schema)
    X = np.zeros((n, layout.width), dtype=np.float64)
    col = 0
    for a in schema:
        if a.kind == NUMERICAL:
            v = pd.to_numeric(raw[a.name]).to_numpy(dtype=np.float64) / a.max
            bad = (v < 0) | (v > 1)
            if bad.any():
                warnings.warn(
                    f"{int(bad.sum())} value(s) of {a.name!r} outside [0, {a.max}] clamped",
                    DataWarning,
                    stacklevel=2,
                )
                v = np.clip(v, 0.0, 1.0)
            X[:, col] = v
            col += 1
        else:
            lookup = {v: i for i, v in enumerate(a.values)}
            vals = raw[a.name].astype(str).to_numpy()
            codes = np.array([lookup.get(v, -1) for v in vals])
            unknown = np.flatnonzero(codes < 0)
            if unknown.size:
                rows = list(raw.index[unknown[:10]])
                raise SchemaError(
                    f"unknown value(s) {sorted(set(vals[unknown]))[:5]} for {a.name!r} at rows {rows}"
                )
            X[np.arange(n), col + codes] = 1.0
            col += a.width
    return X


def decode_nominal(X: np.ndarray, schema: Sequence[AttributeSchema]) -> dict[str, np.ndarray]:
    """Recover nominal values from their one-hot blocks (argmax per block)."""
    schema = ordered_schema(schema)
    layout = FeatureLayout.from_schema(schema)
    nominal = [a for a in schema if a.kind == NOMINAL]
    return {
        a.name: np.asarray(a.values, dtype=object)[np.argmax(X[:, sl], axis=1)]
        for a, sl in zip(nominal, layout.block_slices())
    }


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Encoded instances plus labels, protected-group flags and provenance.

    ``s == 1`` marks the protected group, ``y == 1`` the positive class.
    ``raw`` holds the cleaned attribute table the encoding was computed from.
    """

    name: str
    schema: tuple[AttributeSchema, ...]
    X: np.ndarray
    y: np.ndarray
    s: np.ndarray
    row_ids: np.ndarray
    raw: pd.DataFrame = field(repr=False)
    protected: str = ""

    def __post_init__(self):
        n = self.X.shape[0]
        if not (len(self.y) == len(self.s) == len(self.row_ids) == len(self.raw) == n):
            raise SchemaError("X, y, s, row_ids and raw must have the same number of rows")

    @property
    def n_instances(self) -> int:
        return self.X.shape[0]

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout.from_schema(self.schema)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            s=self.s[idx],
            row_ids=self.row_ids[idx],
            raw=self.raw.iloc[idx],
        )

    def refit(self, idx) -> "Dataset":
        """Re-encode all rows with numerical maxima taken from rows ``idx`` only.

        Nominal vocabularies are kept, so every row stays encodable.
        """
        part = self.raw.iloc[np.asarray(idx)]
        schema = []
        for a in self.schema:
            if a.kind == NUMERICAL:
                m = float(pd.to_numeric(part[a.name]).max())
                if not m > 0:
                    raise SchemaError(f"numerical column {a.name!r} has max {m} on the fitting rows")
                schema.append(AttributeSchema(a.name, NUMERICAL, max=m))
            else:
                schema.append(a)
        schema = tuple(schema)
        return replace(self, schema=schema, X=encode(self.raw, schema))

    def community_counts(self) -> "CommunityCounts":
        return CommunityCounts.of(self.y, self.s)


@dataclass(frozen=True)
class CommunityCounts:
    """Sizes of the four (group, class) communities."""

    s_pos: int
    s_neg: int
    sbar_pos: int
    sbar_neg: int

    @property
    def total(self) -> int:
        return self.s_pos + self.s_neg + self.sbar_pos + self.sbar_neg

    @classmethod
    def of(cls, y, s) -> "CommunityCounts":
        y = np.asarray(y).astype(bool)
        s = np.asarray(s).astype(bool)
        return cls(
            int(np.sum(s & y)), int(np.sum(s & ~y)), int(np.sum(~s & y)), int(np.sum(~s & ~y))
        )


def dataset_stats(ds: Dataset) -> dict:
    c = ds.community_counts()
    pos = c.s_pos + c.sbar_pos
    neg = c.s_neg + c.sbar_neg
    return {
        "dataset": ds.name,
        "instances": ds.n_instances,
        "attributes": len(ds.schema),
        "encoded_width": ds.X.shape[1],
        "positives": pos,
        "negatives": neg,
        "class_ratio": neg / pos if pos else float("nan"),
        "protected": ds.protected,
        "protected_group_size": c.s_pos + c.s_neg,
        "nonprotected_group_size": c.sbar_pos + c.sbar_neg,
    }


def _build(name, frame, numerical, nominal, label, positive, group_col, protected_values, protected):
    frame = frame.reset_index(drop=True)
    y = (frame[label] == positive).to_numpy().astype(np.int8)
    s = frame[group_col].isin(protected_values).to_numpy().astype(np.int8)
    raw = frame[[c for c in frame.columns if c != label]]
    enc = TabularEncoder(numerical, nominal).fit(raw)
    # keep the original attribute order in the schema listing, encode numerical-first
    return Dataset(
        name=name,
        schema=tuple(enc.schema_),
        X=enc.transform(raw),
        y=y,
        s=s,
        row_ids=np.arange(len(frame)),
        raw=raw,
        protected=protected,
    )


# ---------------------------------------------------------------------------
# Adult
# ---------------------------------------------------------------------------

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]  # fmt: skip
ADULT_NUMERICAL = ["age", "fnlwgt", "education-num", "capital-gain", "capital-loss", "hours-per-week"]
ADULT_NOMINAL = [
    "workclass", "education", "marital-status", "occupation", "relationship", "race",
    "sex", "native-country",
]  # fmt: skip


def _read_uci(path: Path, sep: str, **kw) -> pd.DataFrame:
    try:
        if path.stat().st_size == 0:
            raise OSError(f"{path} is empty")
        return pd.read_csv(path, sep=sep, dtype=str, skipinitialspace=True, **kw)
    except pd.errors.EmptyDataError as e:
        raise OSError(f"{path} has no data") from e


def read_adult_raw(path) -> pd.DataFrame:
    """Read and clean Adult rows.

    ``path`` is a directory with ``adult.data`` and/or ``adult.test``, or one
    file in either format. Rows with ``?`` are dropped, the trailing period
    of test labels stripped, and exact duplicate rows removed (first kept).
    """
    path = Path(path)
    if path.is_dir():
        files = [p for p in (path / "adult.data", path / "adult.test") if p.exists()]
        if not files:
            raise FileNotFoundError(f"no adult.data / adult.test in {path}")
    else:
        files = [path]
    frames = []
    for f in files:
        df = _read_uci(f, ",", header=None, comment="|")
        df = df.dropna(how="all")
        if df.shape[1] != len(ADULT_COLUMNS):
            raise SchemaError(f"{f}: expected {len(ADULT_COLUMNS)} columns, got {df.shape[1]}")
        df.columns = ADULT_COLUMNS
        frames.append(df)
    df = pd.concat(frames, ignore_index=True)
    df = df.apply(lambda c: c.str.strip())
    df["income"] = df["income"].str.rstrip(".")
    df = df[~(df == "?").any(axis=1) & df.notna().all(axis=1)]
    df = df.drop_duplicates(keep="first")
    bad = ~df["income"].isin(["<=50K", ">50K"])
    if bad.any():
        raise SchemaError(f"unexpected income labels at rows {list(df.index[bad][:10])}")
    for c in ADULT_NUMERICAL:
        df[c] = pd.to_numeric(df[c])
    return df.reset_index(drop=True)


def load_adult(path) -> Dataset:
    """Adult: positive class ``>50K``, protected group ``sex == Female``."""
    df = read_adult_raw(path)
    return _build(
        "adult", df, ADULT_NUMERICAL, ADULT_NOMINAL, "income", ">50K", "sex", ["Female"], "sex"
    )


# ---------------------------------------------------------------------------
# Bank
# ---------------------------------------------------------------------------

BANK_COLUMNS = [
    "age", "job", "marital", "education", "default", "balance", "housing", "loan",
    "contact", "day", "month", "duration", "campaign", "pdays", "previous", "poutcome", "y",
]  # fmt: skip
BANK_NUMERICAL = ["age", "balance", "day", "duration", "campaign", "pdays", "previous"]
BANK_NOMINAL = [
    "job", "marital", "education", "default", "housing", "loan", "contact", "month", "poutcome",
]  # fmt: skip
BANK_FILTER_UNKNOWN = ("job", "education")


def read_bank_raw(path, drop_unknown: Sequence[str] = BANK_FILTER_UNKNOWN) -> pd.DataFrame:
    """Read ``bank-full.csv`` (semicolon separated, quoted strings).

    Rows whose value is ``unknown`` in any column of ``drop_unknown`` are
    removed.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "bank-full.csv"
    df = _read_uci(path, ";", quotechar='"')
    missing = [c for c in BANK_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    df = df[BANK_COLUMNS].apply(lambda c: c.str.strip())
    for c in drop_unknown:
        df = df[df[c] != "unknown"]
    bad = ~df["y"].isin(["yes", "no"])
    if bad.any():
        raise SchemaError(f"unexpected labels at rows {list(df.index[bad][:10])}")
    for c in BANK_NUMERICAL:
        df[c] = pd.to_numeric(df[c])
    return df.reset_index(drop=True)


def load_bank(path, drop_unknown: Sequence[str] = BANK_FILTER_UNKNOWN) -> Dataset:
    """Bank: positive class ``yes``, protected group ``marital == married``."""
    df = read_bank_raw(path, drop_unknown)
    with warnings.catch_warnings():
        # balance and pdays hold negative values; they are clamped by design
        warnings.simplefilter("ignore", DataWarning)
        return _build(
            "bank", df, BANK_NUMERICAL, BANK_NOMINAL, "y", "yes", "marital", ["married"], "marital"
        )


LOADERS = {"adult": load_adult, "bank": load_bank}


def load(name: str, path) -> Dataset:
    try:
        loader = LOADERS[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(LOADERS)}") from None
    return loader(path)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    seed: int


def split(n_or_dataset, seed: int, train_fraction: float = 0.5, val_fraction: float = 0.2) -> SplitSpec:
    """Random, unstratified train/validation/test partition.

    Half of the instances go to training (of which ``val_fraction`` is held
    out for validation), the rest to test.
    """
    n = n_or_dataset.n_instances if isinstance(n_or_dataset, Dataset) else int(n_or_dataset)
    if n < 10:
        raise ValueError(f"need at least 10 instances to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_fit = int(np.floor(n * train_fraction + 0.5))
    n_val = int(np.floor(n_fit * val_fraction + 0.5))
    fit, test = perm[:n_fit], perm[n_fit:]
    return SplitSpec(
        train_idx=np.sort(fit[n_val:]), val_idx=np.sort(fit[:n_val]), test_idx=np.sort(test), seed=seed
    )


# ---------------------------------------------------------------------------
# Preferential sampling
# ---------------------------------------------------------------------------

COMMUNITIES = {
    "s+": (1, 1),
    "s-": (1, 0),
    "sbar+": (0, 1),
    "sbar-": (0, 0),
}


def preferential_k(v: int, l: int, d: int) -> int:
    """``|v| * |l| / |D|`` rounded to the nearest integer (half up), at least 0."""
    if d <= 0:
        return 0
    return max(0, int(np.floor(v * l / d + 0.5)))


@dataclass(frozen=True)
class SamplingPlan:
    k: dict[str, int]
    duplicated: np.ndarray
    removed: np.ndarray


def plan_preferential_sample(
    y, s, scores, row_ids=None, rule: str = "expected", k: Mapping[str, int] | None = None
) -> SamplingPlan:
    """Choose which positions to duplicate and remove.

    Per community the number of moved instances is either ``k`` (if given),
    or derived from the expected size ``|v|*|l|/|D|``:

    * ``rule="expected"`` (default): the expected size itself, rounded;
    * ``rule="difference"``: ``|expected - observed|``, rounded, a gentler
      variant that moves far fewer rows.

    Positive communities duplicate, negative communities drop, their
    instances closest to the 0.5 boundary; ties go to the smaller row id.
    Counts are capped at the community size.
    """
    y = np.asarray(y).astype(int)
    s = np.asarray(s).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    if not (len(y) == len(s) == len(scores)):
        raise ValueError("y, s and scores must have equal length")
    if np.any((scores < 0) | (scores > 1)) or not np.isfinite(scores).all():
        raise ValueError("scores must lie in [0, 1]")
    if rule not in ("difference", "expected"):
        raise ValueError(f"unknown rule {rule!r}")
    row_ids = np.arange(len(y)) if row_ids is None else np.asarray(row_ids)
    n = len(y)
    dist = np.abs(scores - 0.5)
    ks, dup, rem = {}, [], []
    for name, (g, c) in COMMUNITIES.items():
        members = np.flatnonzero((s == g) & (y == c))
        if members.size == 0:
            warnings.warn(f"community {name} is empty; skipped", DataWarning, stacklevel=2)
            ks[name] = 0
            continue
        if k is not None:
            kk = int(k.get(name, 0))
        else:
            v = int(np.sum(s == g))
            l = int(np.sum(y == c))
            if rule == "expected":
                kk = preferential_k(v, l, n)
            else:
                kk = max(0, int(np.floor(abs(v * l / n - members.size) + 0.5)))
        kk = min(kk, members.size)
        ks[name] = kk
        order = members[np.lexsort((row_ids[members], dist[members]))]
        (dup if c == 1 else rem).append(order[:kk])
    return SamplingPlan(ks, _sorted_union(dup), _sorted_union(rem))


def _sorted_union(parts) -> np.ndarray:
    return np.sort(np.concatenate(parts)) if parts else np.array([], dtype=int)


def preferential_sample(
    train: Dataset, scores, rule: str = "expected", k: Mapping[str, int] | None = None
) -> tuple[Dataset, SamplingPlan]:
    """Resample ``train`` around the current decision boundary.

    Returns the modified dataset (kept rows in original order followed by
    the duplicated copies) and the plan that produced it.
    """
    plan = plan_preferential_sample(train.y, train.s, scores, train.row_ids, rule=rule, k=k)
    keep = np.setdiff1d(np.arange(train.n_instances), plan.removed)
    idx = np.concatenate([keep, plan.duplicated])
    logger.info("preferential sampling: k=%s, %d -> %d rows", plan.k, train.n_instances, idx.size)
    return train.subset(idx), plan


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return str(int(f)) if f.is_integer() and abs(f) < 2**53 else repr(f)
    return str(v)


def write_cache(ds: Dataset, path) -> str:
    """Write the canonical text cache; returns its sha256.

    Layout: a magic/version line, one JSON header line (schema, metadata),
    then a CSV table of ``row_id, y, s`` and the cleaned raw attributes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "name": ds.name,
        "protected": ds.protected,
        "schema": [a.to_dict() for a in ds.schema],
        "columns": list(ds.raw.columns),
        "n_instances": ds.n_instances,
    }
    buf = io.StringIO()
    buf.write(f"{CACHE_MAGIC} v{CACHE_VERSION}\n")
    buf.write("#" + json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
    cols = list(ds.raw.columns)
    buf.write(",".join(["row_id", "y", "s"] + cols) + "\n")
    values = ds.raw.to_numpy(dtype=object)
    for i in range(ds.n_instances):
        fields = [str(int(ds.row_ids[i])), str(int(ds.y[i])), str(int(ds.s[i]))]
        fields.extend(_fmt(v) for v in values[i])
        buf.write(",".join(fields) + "\n")
    data = buf.getvalue().encode("utf-8")
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_cache(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        magic = fh.readline().strip()
        if not magic.startswith(CACHE_MAGIC):
            raise SchemaError(f"{path} is not a dataset cache")
        version = int(magic.split("v")[-1])
        if version != CACHE_VERSION:
            raise SchemaError(f"unsupported cache version {version}")
        header = json.loads(fh.readline()[1:])
        table = pd.read_csv(fh, dtype=str, keep_default_na=False)
    schema = tuple(AttributeSchema.from_dict(a) for a in header["schema"])
    raw = table[header["columns"]].copy()
    for a in schema:
        if a.kind == NUMERICAL:
            raw[a.name] = pd.to_numeric(raw[a.name])
    return Dataset(
        name=header["name"],
        schema=schema,
        X=encode(raw, schema),
        y=table["y"].astype(np.int8).to_numpy(),
        s=table["s"].astype(np.int8).to_numpy(),
        row_ids=table["row_id"].astype(np.int64).to_numpy(),
        raw=raw,
        protected=header.get("protected", ""),
    )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
