"""Loan record ingestion and the desk-scale synthetic fallback.

Expected file schema (delimited text with a header; see README): numeric
columns ``int_rate`` (percent, '%' suffix tolerated), ``term`` (months),
``dti``, ``pub_rec``, ``annual_inc``, ``emp_length`` (years); bookkeeping
columns ``loan_status``, ``installment``, ``last_pymnt_amnt``; any extra
categorical columns are one-hot encoded; remaining columns that leak
post-origination information are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

NUMERIC_FEATURES = ("int_rate", "term", "dti", "pub_rec", "annual_inc", "emp_length")
SHORT_NAMES = ("rate", "term", "dti", "rec", "inc", "emp")
STATUS_COLUMN = "loan_status"
RESOLVED = {"Fully Paid": 1.0, "Charged Off": 0.0, "Default": 0.0}
BOOKKEEPING = ("installment", "last_pymnt_amnt")
POST_INCEPTION = (
    "last_pymnt_amnt",
    "installment",
    "total_pymnt",
    "total_rec_prncp",
    "total_rec_int",
    "recoveries",
    "collection_recovery_fee",
    "out_prncp",
)
LUMP_SUM_MULTIPLE = 5.0


@dataclass
class LoanTable:
    x: np.ndarray                 # (n, d) standardized numerics + one-hot categoricals
    y: np.ndarray                 # (n,) 1 = paid in full
    feature_names: list[str]

    def __len__(self) -> int:
        return len(self.y)

    def numeric_block(self) -> np.ndarray:
        """The six standardized named numerics, in SHORT_NAMES order."""
        idx = [self.feature_names.index(n) for n in NUMERIC_FEATURES]
        return self.x[:, idx]


@dataclass
class IngestReport:
    train: LoanTable
    test: LoanTable
    rows_read: int
    rows_unresolved: int
    rows_lump_sum: int
    rows_skipped: int


def ingest_loans(path, seed: int = 0, test_fraction: float = 0.2) -> IngestReport:
    """Load, filter, encode and standardize a loan file.

    Keeps only resolved loans, drops lump-sum payoffs (a single payment of
    at least five times the installment counts), one-hot encodes the
    non-numeric extra columns, and standardizes numerics using train-split
    statistics only.
    """
    df = pd.read_csv(path)
    required = [STATUS_COLUMN, *BOOKKEEPING, *NUMERIC_FEATURES]
    for col in required:
        if col not in df.columns:
            raise ValueError(f"missing mandatory column {col!r}")
    rows_read = len(df)

    resolved = df[df[STATUS_COLUMN].isin(RESOLVED)].copy()
    rows_unresolved = rows_read - len(resolved)
    resolved["__y"] = resolved[STATUS_COLUMN].map(RESOLVED)

    if resolved["int_rate"].dtype == object:
        resolved["int_rate"] = resolved["int_rate"].astype(str).str.rstrip("%")
    skipped = 0
    for col in NUMERIC_FEATURES + BOOKKEEPING:
        resolved[col] = pd.to_numeric(resolved[col], errors="coerce")
    bad = resolved[list(NUMERIC_FEATURES + BOOKKEEPING)].isna().any(axis=1)
    skipped = int(bad.sum())
    resolved = resolved[~bad]

    lump = (resolved["__y"] == 1.0) & (
        resolved["last_pymnt_amnt"] >= LUMP_SUM_MULTIPLE * resolved["installment"]
    )
    rows_lump_sum = int(lump.sum())
    resolved = resolved[~lump]

    y = resolved["__y"].to_numpy(dtype=np.float64)
    numerics = resolved[list(NUMERIC_FEATURES)].to_numpy(dtype=np.float64)
    drop_cols = {STATUS_COLUMN, "__y", *NUMERIC_FEATURES, *POST_INCEPTION}
    categorical = [c for c in resolved.columns if c not in drop_cols]
    if categorical:
        onehot = pd.get_dummies(resolved[categorical].astype(str), prefix=categorical)
        extra = onehot.to_numpy(dtype=np.float64)
        extra_names = list(onehot.columns)
    else:
        extra = np.empty((len(resolved), 0))
        extra_names = []

    n = len(y)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    test_idx, train_idx = order[:n_test], order[n_test:]

    mean = numerics[train_idx].mean(axis=0)
    std = numerics[train_idx].std(axis=0)
    std[std == 0] = 1.0
    numerics = (numerics - mean) / std

    x = np.hstack([numerics, extra])
    names = list(NUMERIC_FEATURES) + extra_names
    return IngestReport(
        train=LoanTable(x[train_idx], y[train_idx], names),
        test=LoanTable(x[test_idx], y[test_idx], names),
        rows_read=rows_read,
        rows_unresolved=rows_unresolved,
        rows_lump_sum=rows_lump_sum,
        rows_skipped=skipped,
    )


# ----------------------------------------------------------------------
# synthetic fallback
# ----------------------------------------------------------------------
# One latent credit-quality factor drives all six features; the outcome is a
# logistic in the standardized features.  SYNTH_BETA's scale is calibrated so
# a logistic regression on large samples scores ~= 0.73.
SYNTH_LOADINGS = np.array([0.70, 0.50, 0.45, 0.35, -0.40, -0.25])
SYNTH_BETA = np.array([-0.85, -0.45, -0.40, -0.30, 0.45, 0.25]) * 1.35


def synth_loans(n: int, seed: int = 0, test_fraction: float = 0.2) -> IngestReport:
    """Generate standardized synthetic loans with the documented coefficients."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    quality = rng.normal(size=(n, 1))
    noise_scale = np.sqrt(1.0 - SYNTH_LOADINGS**2)
    x = quality * SYNTH_LOADINGS + rng.normal(size=(n, 6)) * noise_scale
    logits = x @ SYNTH_BETA
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits))).astype(np.float64)

    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    test_idx, train_idx = order[:n_test], order[n_test:]
    names = list(NUMERIC_FEATURES)
    return IngestReport(
        train=LoanTable(x[train_idx], y[train_idx], names),
        test=LoanTable(x[test_idx], y[test_idx], names),
        rows_read=n,
        rows_unresolved=0,
        rows_lump_sum=0,
        rows_skipped=0,
    )
