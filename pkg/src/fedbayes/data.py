"""UCI Adult ingestion, train/test splitting and the inhomogeneous partitioner.

The partitioner splits ``M`` clients into a "small" half and a "large" half.
``rho`` controls the size imbalance and ``kappa`` the class imbalance of the
small clients; the large clients share whatever is left of each class.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from fedbayes.exceptions import AdultParseError, PartitionError
from fedbayes.privacy import delta_for_client

__all__ = [
    "ADULT_COLUMNS",
    "CONTINUOUS",
    "CATEGORICAL",
    "DISTRIBUTIONS",
    "Dataset",
    "PartitionSpec",
    "load_adult",
    "load_adult_dir",
    "find_adult_dir",
    "split_train_test",
    "partition",
    "partition_sizes",
    "shard_summary",
    "write_manifest",
    "synthetic_logistic",
]

ADULT_COLUMNS = (
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
)
CONTINUOUS = ("age", "fnlwgt", "education-num", "capital-gain", "capital-loss", "hours-per-week")
CATEGORICAL = (
    "workclass", "education", "marital-status", "occupation",
    "relationship", "race", "sex", "native-country",
)

# Named (rho, kappa) settings of the published distribution table.
DISTRIBUTIONS = {
    "A": (0.0, 0.0),
    "B": (0.9, 0.95),
    "C": (0.7, -3.0),
    "D": (0.6, -1.5),
}

_MISSING = "?"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Design matrix with bias column and labels in {-1, +1}."""

    x: np.ndarray
    t: np.ndarray
    feature_names: tuple = ()

    def __len__(self):
        return self.t.size

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.t[idx], self.feature_names)

    @property
    def positive_fraction(self) -> float:
        return float(np.mean(self.t == 1)) if len(self) else float("nan")


def _read_rows(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("|"):
                continue
            fields = [f.strip() for f in stripped.split(",")]
            if len(fields) != len(ADULT_COLUMNS):
                raise AdultParseError(
                    f"expected {len(ADULT_COLUMNS)} fields, found {len(fields)}", lineno
                )
            label = fields[-1].rstrip(".")
            if label not in (">50K", "<=50K"):
                raise AdultParseError(f"unrecognised income label {fields[-1]!r}", lineno)
            fields[-1] = label
            for name in CONTINUOUS:
                value = fields[ADULT_COLUMNS.index(name)]
                if value != _MISSING:
                    try:
                        float(value)
                    except ValueError:
                        raise AdultParseError(f"non-numeric {name} {value!r}", lineno) from None
            rows.append(fields)
    return rows


def load_adult(*paths, missing: str = "drop", standardize_rows=None):
    """Parse UCI Adult files into a :class:`Dataset`.

    Continuous columns are z-scored, categorical columns one-hot encoded (the
    category vocabulary is taken from all given files) and a trailing bias
    column of ones appended. ``>50K`` maps to +1, everything else to -1.

    Args:
        *paths: one or more files in ``adult.data`` / ``adult.test`` format.
        missing: ``"drop"`` removes rows containing ``?``; ``"category"``
            treats ``?`` in a categorical column as its own level (rows
            missing a continuous value, or every feature, are still dropped).
        standardize_rows: optional index array; z-score statistics are
            computed on these rows only (pass the training indices to avoid
            leaking test statistics). Defaults to all rows.

    Raises:
        AdultParseError: on a malformed row, reporting the line number.
    """
    rows = _load_rows(paths, missing)
    return _encode(rows, standardize_rows)


def _load_rows(paths, missing):
    if missing not in ("drop", "category"):
        raise ValueError("missing must be 'drop' or 'category'")
    rows = []
    for path in paths:
        rows.extend(_read_rows(path))
    cont_idx = [ADULT_COLUMNS.index(name) for name in CONTINUOUS]
    if missing == "drop":
        rows = [r for r in rows if _MISSING not in r]
    else:
        # '?' is kept as a level of categorical columns only
        rows = [r for r in rows
                if not all(v == _MISSING for v in r[:-1])
                and all(r[i] != _MISSING for i in cont_idx)]
    if not rows:
        raise AdultParseError("no usable rows")
    return rows


def _encode(rows, standardize_rows=None):
    cols = list(zip(*rows))
    continuous = np.array(
        [[float(v) for v in cols[ADULT_COLUMNS.index(name)]] for name in CONTINUOUS]
    ).T
    stat_rows = continuous if standardize_rows is None else continuous[standardize_rows]
    mean = stat_rows.mean(axis=0)
    std = stat_rows.std(axis=0)
    std[std == 0] = 1.0
    blocks = [(continuous - mean) / std]
    names = list(CONTINUOUS)
    for name in CATEGORICAL:
        values = np.array(cols[ADULT_COLUMNS.index(name)])
        vocab = sorted(set(values))
        blocks.append((values[:, None] == np.array(vocab)[None, :]).astype(np.float64))
        names.extend(f"{name}={v}" for v in vocab)
    blocks.append(np.ones((len(rows), 1)))
    names.append("bias")
    x = np.hstack(blocks)
    t = np.where(np.array(cols[-1]) == ">50K", 1, -1).astype(np.int8)
    return Dataset(x, t, tuple(names))


def find_adult_dir(path=None) -> Path:
    """Locate a directory holding ``adult.data`` and ``adult.test``.

    Tries ``path``, then ``$FEDBAYES_DATA_DIR``, then ``./data``, each also
    with an ``adult/`` subdirectory.
    """
    candidates = []
    if path is not None:
        candidates.extend([Path(path), Path(path) / "adult"])
    env = os.environ.get("FEDBAYES_DATA_DIR")
    if env:
        candidates.extend([Path(env), Path(env) / "adult"])
    candidates.extend([Path("data"), Path("data") / "adult"])
    for cand in candidates:
        if (cand / "adult.data").is_file() and (cand / "adult.test").is_file():
            return cand
    raise FileNotFoundError(
        "could not find adult.data/adult.test; pass a path or set FEDBAYES_DATA_DIR"
    )


def load_adult_dir(path=None, missing: str = "category", seed: int = 0, train_fraction: float = 0.8):
    """Load both Adult files, merge them and return a seeded ``(train, test)`` split.

    Standardisation statistics come from the training rows only.
    """
    root = find_adult_dir(path)
    files = (root / "adult.data", root / "adult.test")
    rows = _load_rows(files, missing)
    train_idx, test_idx = _split_indices(len(rows), train_fraction, seed)
    full = _encode(rows, standardize_rows=train_idx)
    return full.subset(train_idx), full.subset(test_idx)


def _split_indices(n, fraction, seed):
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(fraction * n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_train_test(data: Dataset, fraction: float = 0.8, seed: int = 0):
    """Shuffled, disjoint split; the training part has ``ceil(fraction * n)`` rows."""
    train_idx, test_idx = _split_indices(len(data), fraction, seed)
    return data.subset(train_idx), data.subset(test_idx)


@dataclass(frozen=True)
class PartitionSpec:
    """Parameters of the small/large client split.

    ``lambda_major`` is the majority-class fraction of the data being
    distributed; leave it ``None`` to measure it from the data.
    """

    m_clients: int = 10
    rho: float = 0.0
    kappa: float = 0.0
    lambda_major: float | None = None
    n_total_override: int | None = None

    def __post_init__(self):
        if self.m_clients < 2 or self.m_clients % 2:
            raise ValueError("m_clients must be a positive even number")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")

    @classmethod
    def named(cls, name: str, **kwargs) -> "PartitionSpec":
        rho, kappa = DISTRIBUTIONS[name.upper()]
        return cls(rho=rho, kappa=kappa, **kwargs)


def partition_sizes(n_total: int, m_clients: int, rho: float) -> tuple[int, int]:
    """Target ``(N_small, N_large)``."""
    base = n_total / m_clients
    # round before flooring so products like 3907.4 * 1.9 land on the intended integer
    n_small = math.floor(round(base * (1 - rho), 9))
    n_large = math.floor(round(base * (1 + rho), 9))
    return n_small, n_large


def partition(train: Dataset, spec: PartitionSpec, rng) -> list[np.ndarray]:
    """Split training indices into ``spec.m_clients`` shards.

    The first half of the returned shards are the small clients.

    Returns:
        A list of sorted index arrays into ``train``.

    Raises:
        PartitionError: if a client class target is outside [0, 1] or the data
            holds too few examples of some class.
    """
    rng = np.random.default_rng(rng)
    t = np.asarray(train.t)
    pos = np.flatnonzero(t == 1)
    neg = np.flatnonzero(t != 1)
    n_data = t.size
    if pos.size * 2 > n_data:
        major, minor = pos, neg
    else:
        major, minor = neg, pos
    lam = spec.lambda_major if spec.lambda_major is not None else major.size / n_data
    n_total = spec.n_total_override if spec.n_total_override is not None else n_data
    half = spec.m_clients // 2
    n_small, n_large = partition_sizes(n_total, spec.m_clients, spec.rho)
    if n_small <= 0:
        raise PartitionError(f"rho={spec.rho} leaves small clients empty")

    lam_small = lam + (1 - lam) * spec.kappa
    if not 0 <= lam_small <= 1:
        raise PartitionError(
            f"kappa={spec.kappa} gives a small-client majority fraction of {lam_small:.3f}"
        )
    small_major = int(round(lam_small * n_small))
    small_minor = n_small - small_major
    rem_major = major.size - half * small_major
    rem_minor = minor.size - half * small_minor
    if rem_major < 0 or rem_minor < 0:
        raise PartitionError("not enough examples of one class for the small clients")
    rem_total = rem_major + rem_minor
    if rem_total < half * n_large:
        raise PartitionError(
            f"{rem_total} examples remain but the large clients need {half * n_large}"
        )
    large_minor = int(round(n_large * rem_minor / rem_total))
    large_major = n_large - large_minor
    if half * large_minor > rem_minor or half * large_major > rem_major:
        raise PartitionError("not enough examples of one class for the large clients")

    major = rng.permutation(major)
    minor = rng.permutation(minor)
    shards = []
    i_maj = i_min = 0
    for n_maj, n_min in [(small_major, small_minor)] * half + [(large_major, large_minor)] * half:
        idx = np.concatenate([major[i_maj:i_maj + n_maj], minor[i_min:i_min + n_min]])
        i_maj += n_maj
        i_min += n_min
        shards.append(np.sort(idx))
    return shards


def shard_summary(train: Dataset, shards) -> list[dict]:
    """Per-shard size, positive fraction and the delta each client would use."""
    out = []
    for m, idx in enumerate(shards):
        labels = train.t[idx]
        out.append({
            "client": m,
            "group": "small" if m < len(shards) // 2 else "large",
            "n": int(len(idx)),
            "positive_fraction": float(np.mean(labels == 1)) if len(idx) else float("nan"),
            "delta": delta_for_client(len(idx)) if len(idx) >= 2 else None,
        })
    return out


def write_manifest(path, train: Dataset, shards, spec: PartitionSpec, extra=None) -> dict:
    """Write a JSON manifest of shard indices and summaries."""
    manifest = {
        "spec": {
            "m_clients": spec.m_clients, "rho": spec.rho, "kappa": spec.kappa,
            "lambda_major": spec.lambda_major, "n_total_override": spec.n_total_override,
        },
        "n_train": len(train),
        "shards": [
            dict(summary, indices=[int(i) for i in idx])
            for summary, idx in zip(shard_summary(train, shards), shards)
        ],
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest


def synthetic_logistic(d: int, n: int, true_w, rng, bias: bool = False) -> Dataset:
    """Draw ``x ~ N(0, I)`` and ``t = +1`` with probability ``sigmoid(w.x)``.

    With ``bias=True`` the last feature is replaced by a constant 1.
    """
    rng = np.random.default_rng(rng)
    true_w = np.asarray(true_w, dtype=np.float64)
    if true_w.shape != (d,):
        raise ValueError("true_w must have length d")
    x = rng.standard_normal((n, d))
    if bias:
        x[:, -1] = 1.0
    p = expit(x @ true_w)
    t = np.where(rng.random(n) < p, 1, -1).astype(np.int8)
    return Dataset(x, t)
