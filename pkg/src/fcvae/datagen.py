"""Semi-synthetic benchmark data: covariates in, every factual and counterfactual draw out.

The pipeline mirrors the IHDP recipe: optionally drop treated rows from one
sensitive group, drop the covariates most correlated with the confounder,
standardise, pull out the confounder ``Z`` and sensitive attribute ``A``,
then sample outcome surfaces for all four ``(t, a)`` and treatments for both
``a``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffcore import NoiseStream

BUNDLE_FIXED_COLUMNS = ("a", "t_factual", "y_factual", "y_t0_a0", "y_t1_a0", "y_t0_a1",
                        "y_t1_a1", "t_a0", "t_a1", "z_hidden")


class DataError(ValueError):
    """Bad covariate input or generation failure."""


@dataclass
class CovariateTable:
    names: list
    values: np.ndarray
    kinds: list
    source: str = "loaded"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise DataError("values must be an n x len(names) matrix")
        if len(self.kinds) != len(self.names):
            raise DataError("one kind per column required")
        if not np.all(np.isfinite(self.values)):
            raise DataError("covariates contain missing or non-finite values")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def column(self, name) -> np.ndarray:
        return self.values[:, self._index(name)]

    def _index(self, name) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"column {name!r} not in table") from None

    def select_rows(self, mask) -> "CovariateTable":
        return replace(self, values=self.values[np.asarray(mask)])

    def drop(self, names) -> "CovariateTable":
        keep = [i for i, c in enumerate(self.names) if c not in set(names)]
        return CovariateTable([self.names[i] for i in keep], self.values[:, keep],
                              [self.kinds[i] for i in keep], self.source)


def _kind(col: np.ndarray) -> str:
    return "binary" if set(np.unique(col)).issubset({0.0, 1.0}) else "continuous"


@dataclass
class GenConfig:
    beta_a: float = 6.0
    omega: float = -11.0
    alpha0: float = 0.7
    alpha1: float = 0.4
    zeta: float = 0.1
    w_fill: float = 0.5
    beta_values: tuple = (0.0, 0.1, 0.2, 0.3, 0.4)
    beta_probs_continuous: tuple = (0.5, 0.125, 0.125, 0.125, 0.125)
    beta_probs_binary: tuple = (0.6, 0.1, 0.1, 0.1, 0.1)
    beta_z_values: tuple = (0.4, 0.6)
    beta_z_probs: tuple = (0.5, 0.5)
    features_to_remove: int = 0
    apply_step1_filter: bool = False
    confounder_column: str = "bw"
    sensitive_column: str = "nonwhite"
    treatment_column: str = "treat"
    filter_value: float = 1.0
    seed: int = 0
    max_exp_mean: float = 1e12

    def __post_init__(self):
        for name in ("beta_probs_continuous", "beta_probs_binary", "beta_z_probs"):
            probs = getattr(self, name)
            if abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                raise DataError(f"{name} must be a probability vector")
        if len(self.beta_probs_continuous) != len(self.beta_values) or \
                len(self.beta_probs_binary) != len(self.beta_values) or \
                len(self.beta_z_probs) != len(self.beta_z_values):
            raise DataError("categorical values and probabilities differ in length")
        if not (0 <= self.alpha0 <= 1 and 0 <= self.alpha1 <= 1):
            raise DataError("alpha0 and alpha1 must lie in [0, 1]")
        if self.features_to_remove not in (0, 1, 2):
            raise DataError("features_to_remove must be 0, 1 or 2")


@dataclass
class DatasetBundle:
    """Covariates plus ground truth for every intervention.

    ``y_cf[i, t, a]`` is row ``i``'s outcome under do(T=t, A=a) and
    ``t_cf[i, a]`` its treatment under do(A=a).
    """

    x: np.ndarray
    a: np.ndarray
    z_hidden: np.ndarray
    t_factual: np.ndarray
    y_factual: np.ndarray
    y_cf: np.ndarray
    t_cf: np.ndarray
    feature_names: list = field(default_factory=list)
    removed: list = field(default_factory=list)
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "DatasetBundle":
        idx = np.asarray(idx)
        return replace(self, x=self.x[idx], a=self.a[idx], z_hidden=self.z_hidden[idx],
                       t_factual=self.t_factual[idx], y_factual=self.y_factual[idx],
                       y_cf=self.y_cf[idx], t_cf=self.t_cf[idx])

    def equals(self, other: "DatasetBundle") -> bool:
        arrays = ("x", "a", "z_hidden", "t_factual", "y_factual", "y_cf", "t_cf", "beta")
        return (all(np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays)
                and self.feature_names == other.feature_names and self.removed == other.removed)


def clip(x, m, M):
    if m > M:
        raise ValueError(f"clip bounds reversed: {m} > {M}")
    return np.minimum(np.maximum(x, m), M) if np.ndim(x) else min(max(x, m), M)


# ---------------------------------------------------------------- covariates

def load_covariates_csv(path) -> CovariateTable:
    """Read a header + numeric-cells CSV; binary iff a column's values are all 0/1."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
            parsed = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    raise DataError(f"{path}: row {i} has a blank cell in column {name!r}")
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {i} column {name!r}: non-numeric cell {cell!r}") from None
            rows.append(parsed)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return CovariateTable(header, values, [_kind(values[:, j]) for j in range(len(header))], "loaded")


@dataclass
class ConfounderProfile:
    """How the synthetic confounder relates to the other columns."""

    confounder_noise: float = 0.1
    proxy_corrs: tuple = (0.8, 0.5)
    sensitive_corr: float = -0.3
    sensitive_rate: float = 0.4


def synth_covariates(n, d_continuous, d_binary, profile: ConfounderProfile | None = None,
                     noise: NoiseStream | None = None) -> CovariateTable:
    """IHDP-shaped stand-in covariates driven by one latent factor.

    Columns: ``bw`` (confounder = factor + small noise), ``proxy_1``/``proxy_2``
    with descending correlation to the factor, independent continuous
    ``cont_k`` and thresholded-Gaussian ``bin_k``, and a binary ``nonwhite``
    sensitive column mildly correlated with the factor.
    """
    if n < 10:
        raise DataError("n must be at least 10")
    if d_continuous < 3:
        raise DataError("need >= 3 continuous columns (confounder and two proxies)")
    profile = profile or ConfounderProfile()
    noise = noise or NoiseStream(0, "covariates")
    rng = noise.generator()
    factor = rng.standard_normal(n)
    cols, names, kinds = [], [], []

    cols.append(3.0 + 0.6 * (factor + profile.confounder_noise * rng.standard_normal(n)))
    names.append("bw")
    for k, r in enumerate(profile.proxy_corrs, start=1):
        cols.append(r * factor + math.sqrt(1.0 - r * r) * rng.standard_normal(n))
        names.append(f"proxy_{k}")
    for k in range(3, d_continuous):
        cols.append(rng.standard_normal(n) * (1.0 + 0.25 * k) + 0.5 * k)
        names.append(f"cont_{k}")
    kinds += ["continuous"] * d_continuous
    rates = np.linspace(0.1, 0.5, d_binary) if d_binary > 1 else np.full(d_binary, 0.3)
    for k in range(d_binary):
        g = rng.standard_normal(n)
        cols.append((g > np.quantile(g, 1.0 - rates[k])).astype(np.float64))
        names.append(f"bin_{k}")
        kinds.append("binary")
    s = profile.sensitive_corr
    latent = s * factor + math.sqrt(1.0 - s * s) * rng.standard_normal(n)
    cols.append((latent > np.quantile(latent, 1.0 - profile.sensitive_rate)).astype(np.float64))
    names.append("nonwhite")
    kinds.append("binary")
    return CovariateTable(names, np.column_stack(cols), kinds, "synthetic")


def normalize(table: CovariateTable, columns=None) -> CovariateTable:
    """Standardise ``columns`` (default all) to mean 0, population sd 1."""
    columns = table.names if columns is None else list(columns)
    values = table.values.copy()
    for name in columns:
        j = table._index(name)
        col = values[:, j]
        sd = col.std()
        if not sd > 0:
            raise DataError(f"column {name!r} is constant; cannot normalize")
        values[:, j] = (col - col.mean()) / sd
    return replace(table, values=values)


def most_correlated(table: CovariateTable, target: str, candidates, k: int) -> list:
    """The ``k`` candidates with the largest absolute Pearson correlation with ``target``."""
    z = table.column(target)
    scored = []
    for name in candidates:
        col = table.column(name)
        if col.std() == 0:
            continue
        scored.append((-abs(float(np.corrcoef(z, col)[0, 1])), name))
    return [name for _, name in sorted(scored)[:k]]


# ---------------------------------------------------------------- generation

def sample_beta(kinds, config: GenConfig, noise: NoiseStream) -> np.ndarray:
    """One coefficient per X column (by kind) followed by the coefficient for Z."""
    rng = noise.generator()
    vals = np.asarray(config.beta_values)
    beta = np.empty(len(kinds) + 1)
    for j, kind in enumerate(kinds):
        probs = config.beta_probs_binary if kind == "binary" else config.beta_probs_continuous
        beta[j] = rng.choice(vals, p=probs)
    beta[-1] = rng.choice(np.asarray(config.beta_z_values), p=config.beta_z_probs)
    return beta


def outcome_means(x, z, beta, config: GenConfig) -> np.ndarray:
    """Noise-free surfaces, shape ``(n, 2, 2)`` indexed ``[row, t, a]``."""
    xz = np.column_stack([np.asarray(x, dtype=np.float64).reshape(len(z), -1), z])
    lin = xz @ beta
    expo = np.exp((xz + config.w_fill) @ beta)
    bad = np.flatnonzero(~np.isfinite(expo) | (expo > config.max_exp_mean))
    if bad.size:
        raise DataError(f"exponential outcome mean overflows at row {int(bad[0])}")
    means = np.empty((len(z), 2, 2))
    means[:, 0, 0] = expo
    means[:, 1, 0] = lin - config.omega
    means[:, 0, 1] = expo + config.beta_a
    means[:, 1, 1] = lin - config.omega + config.beta_a
    return means


def generate_outcomes(x, z, beta, config: GenConfig, noise: NoiseStream) -> np.ndarray:
    means = outcome_means(x, z, beta, config)
    return means + noise.normal(means.shape)


def treatment_probs(z, config: GenConfig) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.column_stack([clip(config.alpha0 + config.zeta * z, 0.0, 1.0),
                            clip(config.alpha1 + config.zeta * z, 0.0, 1.0)])


def generate_treatments(z, config: GenConfig, noise: NoiseStream) -> np.ndarray:
    """Bits ``t_cf[i, a]`` drawn independently per row and per ``a``."""
    p = treatment_probs(z, config)
    return (noise.uniform(p.shape) < p).astype(np.int64)


def generate_ihdp(table: CovariateTable, config: GenConfig, noise: NoiseStream | None = None) -> DatasetBundle:
    noise = noise or NoiseStream(config.seed, "datagen")
    for name in (config.confounder_column, config.sensitive_column):
        if name not in table.names:
            raise DataError(f"designated column {name!r} missing from covariates")
    if config.apply_step1_filter:
        if config.treatment_column not in table.names:
            raise DataError(f"designated column {config.treatment_column!r} missing from covariates")
        drop_rows = (table.column(config.sensitive_column) == config.filter_value) & \
                    (table.column(config.treatment_column) == 1)
        table = table.select_rows(~drop_rows)
    if config.treatment_column in table.names:
        table = table.drop([config.treatment_column])

    a = table.column(config.sensitive_column)
    if not set(np.unique(a)).issubset({0.0, 1.0}):
        raise DataError(f"sensitive column {config.sensitive_column!r} must be binary")
    designated = {config.confounder_column, config.sensitive_column}
    candidates = [c for c in table.names if c not in designated]
    removed = most_correlated(table, config.confounder_column, candidates, config.features_to_remove)

    # Outcomes come from the full feature set; removal only hides columns from X,
    # so Z, A and every surface are identical across removal settings.
    table = normalize(table, candidates + [config.confounder_column])
    z = table.column(config.confounder_column)
    x_full = table.values[:, [table._index(c) for c in candidates]]
    kinds = [table.kinds[table._index(c)] for c in candidates]
    beta = sample_beta(kinds, config, noise.child("beta"))
    y_cf = generate_outcomes(x_full, z, beta, config, noise.child("outcomes"))
    t_cf = generate_treatments(z, config, noise.child("treatments"))

    features = [c for c in candidates if c not in removed]
    x = x_full[:, [candidates.index(c) for c in features]]
    a_bits = a.astype(np.int64)
    rows = np.arange(len(z))
    t_f = t_cf[rows, a_bits]
    y_f = y_cf[rows, t_f, a_bits]
    return DatasetBundle(x=x, a=a_bits, z_hidden=z, t_factual=t_f, y_factual=y_f, y_cf=y_cf,
                         t_cf=t_cf, feature_names=features, removed=removed, beta=beta)


# ---------------------------------------------------------------- bundle files

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_bundle_csv(bundle: DatasetBundle, path) -> None:
    """Fixed-schema CSV plus a ``.meta.json`` sidecar with names, removals and beta."""
    path = Path(path)
    header = [f"x_{j}" for j in range(bundle.d)] + list(BUNDLE_FIXED_COLUMNS)
    lines = [",".join(header)]
    for i in range(bundle.n):
        cells = [_fmt(v) for v in bundle.x[i]]
        cells += [str(int(bundle.a[i])), str(int(bundle.t_factual[i])), _fmt(bundle.y_factual[i])]
        cells += [_fmt(bundle.y_cf[i, t, a]) for a in (0, 1) for t in (0, 1)]
        cells += [str(int(bundle.t_cf[i, 0])), str(int(bundle.t_cf[i, 1])), _fmt(bundle.z_hidden[i])]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    meta = {"feature_names": bundle.feature_names, "removed": bundle.removed,
            "beta": [_fmt(b) for b in bundle.beta]}
    _meta_path(path).write_text(json.dumps(meta, indent=1) + "\n")


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def read_bundle_csv(path) -> DatasetBundle:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    for col in BUNDLE_FIXED_COLUMNS:
        if col not in header:
            raise DataError(f"{path}: bundle schema mismatch, missing column {col!r}")
    x_cols = [h for h in header if h.startswith("x_")]
    expected = [f"x_{j}" for j in range(len(x_cols))]
    if x_cols != expected:
        raise DataError(f"{path}: covariate columns must be x_0..x_{len(x_cols) - 1} in order")
    data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64).reshape(len(rows), len(header))
    col = {h: data[:, j] for j, h in enumerate(header)}
    x = data[:, [header.index(h) for h in x_cols]]
    y_cf = np.empty((len(rows), 2, 2))
    for t in (0, 1):
        for a in (0, 1):
            y_cf[:, t, a] = col[f"y_t{t}_a{a}"]
    meta = {"feature_names": [], "removed": [], "beta": []}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text())
    return DatasetBundle(
        x=x, a=col["a"].astype(np.int64), z_hidden=col["z_hidden"],
        t_factual=col["t_factual"].astype(np.int64), y_factual=col["y_factual"], y_cf=y_cf,
        t_cf=np.column_stack([col["t_a0"], col["t_a1"]]).astype(np.int64),
        feature_names=list(meta["feature_names"]), removed=list(meta["removed"]),
        beta=np.array([float(b) for b in meta["beta"]], dtype=np.float64),
    )
