"""Experiment orchestration: configuration, training with early stopping, seed sweeps, reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datagen import (
    ConfounderProfile,
    DataError,
    DatasetBundle,
    GenConfig,
    generate_ihdp,
    load_covariates_csv,
    synth_covariates,
)
from .diffcore import AdamState, NoiseStream, adam_step, no_grad
from .effects import estimate_effects
from .evaluate import METRIC_NAMES, MetricsRow, encoder_kl_metric, metrics_row
from .models import MODEL_KINDS, Architecture, build_model, mul, training_loss

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class DataSection:
    source: str = "synthetic"
    covariates: str = ""
    covariate_seed: int = 0
    n: int = 750
    d_continuous: int = 6
    d_binary: int = 19
    features_removed: tuple = (0, 1, 2)
    apply_step1_filter: bool = False
    confounder_column: str = "bw"
    sensitive_column: str = "nonwhite"
    treatment_column: str = "treat"
    filter_value: float = 1.0
    beta_a: float = 6.0
    omega: float = -11.0
    alpha0: float = 0.7
    alpha1: float = 0.4
    zeta: float = 0.1
    w_fill: float = 0.5


@dataclass
class TrainSection:
    models: tuple = MODEL_KINDS
    n_seeds: int = 50
    first_seed: int = 0
    lr: float = 0.001
    patience: int = 10
    max_epochs: int = 1000
    batch_size: int = 32
    validation_fraction: float = 0.3
    n_samples: int = 10
    workers: int = 1


@dataclass
class ModelSection:
    d_z: int = 10
    heteroscedastic: bool = True
    x_log_std: float = 0.0
    y_kind: str = "continuous"


@dataclass
class EvalSection:
    n_posterior_samples: int = 10
    reencode_flipped_a: bool = False
    ay_mode: str = "mixture"
    split: str = "all"


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        t = self.train
        if t.n_seeds < 1:
            raise ConfigError("train.n_seeds must be >= 1")
        if not 0 < t.validation_fraction < 1:
            raise ConfigError("train.validation_fraction must lie strictly between 0 and 1")
        if t.patience < 1 or t.max_epochs < 1 or t.n_samples < 1 or t.batch_size < 0 or t.workers < 1:
            raise ConfigError("train.patience, max_epochs, n_samples, workers must be >= 1; batch_size >= 0")
        bad = [m for m in t.models if m not in MODEL_KINDS]
        if bad or not t.models:
            raise ConfigError(f"train.models must be a non-empty subset of {MODEL_KINDS}; got {bad}")
        if any(r not in (0, 1, 2) for r in self.data.features_removed) or not self.data.features_removed:
            raise ConfigError("data.features_removed must be a non-empty subset of {0, 1, 2}")
        if self.data.source not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        if self.data.source == "csv" and not self.data.covariates:
            raise ConfigError("data.covariates is required when data.source = csv")
        if self.eval.ay_mode not in ("mixture", "plugin"):
            raise ConfigError("eval.ay_mode must be 'mixture' or 'plugin'")
        if self.eval.split not in ("all", "validation"):
            raise ConfigError("eval.split must be 'all' or 'validation'")
        if self.model.y_kind not in ("continuous", "binary"):
            raise ConfigError("model.y_kind must be 'continuous' or 'binary'")
        try:
            self.gen_config(self.data.features_removed[0], 0)
        except DataError as exc:
            raise ConfigError(f"data.*: {exc}") from None

    def gen_config(self, removed: int, seed: int) -> GenConfig:
        d = self.data
        return GenConfig(beta_a=d.beta_a, omega=d.omega, alpha0=d.alpha0, alpha1=d.alpha1,
                         zeta=d.zeta, w_fill=d.w_fill, features_to_remove=removed,
                         apply_step1_filter=d.apply_step1_filter,
                         confounder_column=d.confounder_column, sensitive_column=d.sensitive_column,
                         treatment_column=d.treatment_column, filter_value=d.filter_value, seed=seed)

    def architecture(self) -> Architecture:
        m = self.model
        return Architecture(d_z=m.d_z, heteroscedastic=m.heteroscedastic, x_log_std=m.x_log_std,
                            y_kind=m.y_kind)

    def as_pairs(self) -> list:
        out = []
        for section in ("data", "train", "model", "eval"):
            for f in fields(getattr(self, section)):
                v = getattr(getattr(self, section), f.name)
                out.append((f"{section}.{f.name}", _render(v)))
        return out

    def digest(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in self.as_pairs())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Flat ``section.key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    cfg = base or ExperimentConfig()
    sections = {"data": asdict(cfg.data), "train": asdict(cfg.train),
                "model": asdict(cfg.model), "eval": asdict(cfg.eval)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in sections or name not in sections[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sections[section][name] = _coerce(value, sections[section][name], key)
    return ExperimentConfig(DataSection(**sections["data"]), TrainSection(**sections["train"]),
                            ModelSection(**sections["model"]), EvalSection(**sections["eval"]))


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------- data

_TABLE_CACHE: dict = {}


def covariate_table(config: ExperimentConfig):
    d = config.data
    key = (d.source, d.covariates, d.covariate_seed, d.n, d.d_continuous, d.d_binary)
    if key not in _TABLE_CACHE:
        if d.source == "csv":
            _TABLE_CACHE[key] = load_covariates_csv(d.covariates)
        else:
            _TABLE_CACHE[key] = synth_covariates(d.n, d.d_continuous, d.d_binary, ConfounderProfile(),
                                                 NoiseStream(d.covariate_seed, "covariates"))
    return _TABLE_CACHE[key]


def make_bundle(config: ExperimentConfig, seed: int, removed: int) -> DatasetBundle:
    return generate_ihdp(covariate_table(config), config.gen_config(removed, seed),
                         NoiseStream(seed, "data"))


def split_indices(n: int, fraction: float, noise: NoiseStream):
    perm = noise.generator().permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# ---------------------------------------------------------------- training

class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        """Record one epoch's validation objective (higher is better); True means stop."""
        self.epoch += 1
        if value > self.best:
            self.best, self.best_epoch = value, self.epoch
        return self.epoch - self.best_epoch >= self.patience


def early_stopping_trace(trace, patience: int):
    """``(stop_epoch, best_epoch)`` (1-based) the rule yields on a validation trace."""
    es = EarlyStopping(patience)
    for v in trace:
        if es.update(v):
            break
    return es.epoch, es.best_epoch


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    model: str
    removed: int
    train_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    init_val: float = math.nan  # validation objective before the first update
    metrics: MetricsRow | None = None
    duration: float = 0.0
    failed: bool = False
    error: str = ""


def objective(params, x, a, t, y, n_samples, noise):
    """Per-row objective to maximise: ELBO for latent models, minus the baseline loss otherwise."""
    return mul(training_loss(params, x, a, t, y, n_samples, noise), -1.0)


def train(kind: str, bundle: DatasetBundle, config: ExperimentConfig, noise: NoiseStream,
          train_idx=None, val_idx=None, seed=0, removed=0):
    """Fit one model with Adam and validation early stopping.

    Returns ``(params, record)`` where ``params`` hold the best-validation
    epoch's weights.
    """
    tc = config.train
    if train_idx is None or val_idx is None:
        train_idx, val_idx = split_indices(bundle.n, tc.validation_fraction, noise.child("split"))
    tr, va = bundle.subset(train_idx), bundle.subset(val_idx)
    params = build_model(kind, bundle.d, noise.child("init"), config.architecture(),
                         a=tr.a, y=tr.y_factual)
    record = RunRecord(config.digest(), seed, kind, removed)
    start = time.perf_counter()
    shapes = [a.shape for a in params.copy_arrays()]
    # one flat vector keeps the Adam update to a handful of array ops per step
    state = AdamState.for_params([np.concatenate([a.ravel() for a in params.copy_arrays()])], lr=tc.lr)
    best = params.copy_arrays()
    stopper = EarlyStopping(tc.patience)
    batch = tc.batch_size or tr.n
    val_noise = noise.child("validation")
    with no_grad():
        record.init_val = float(objective(params, va.x, va.a, va.t_factual, va.y_factual,
                                          tc.n_samples, val_noise).data)
    step = 0
    for epoch in range(tc.max_epochs):
        order = noise.child("shuffle").at(epoch).generator().permutation(tr.n) if batch < tr.n \
            else np.arange(tr.n)
        total = 0.0
        for lo in range(0, tr.n, batch):
            idx = order[lo:lo + batch]
            obj = objective(params, tr.x[idx], tr.a[idx], tr.t_factual[idx], tr.y_factual[idx],
                            tc.n_samples, noise.child("posterior").at(step))
            step += 1
            value = float(obj.data)
            if not math.isfinite(value):
                return _abort(params, best, record, start, f"non-finite training objective at epoch {epoch + 1}")
            total += value * len(idx)
            leaves = params.parameters()
            for p in leaves:
                p.grad = None
            mul(obj, -1.0).backward()
            flat_g = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
                                     for p in leaves])
            (flat,), state = adam_step([np.concatenate([p.data.ravel() for p in leaves])], [flat_g], state)
            params.set_parameters(_unflatten(flat, shapes))
        with no_grad():
            val = float(objective(params, va.x, va.a, va.t_factual, va.y_factual,
                                  tc.n_samples, val_noise).data)
        if not math.isfinite(val):
            return _abort(params, best, record, start, f"non-finite validation objective at epoch {epoch + 1}")
        record.train_trace.append(total / tr.n)
        record.val_trace.append(val)
        improved_before = stopper.best_epoch
        stop = stopper.update(val)
        if stopper.best_epoch != improved_before:
            best = params.copy_arrays()
        if stop:
            break
    params.set_parameters(best)
    record.stop_epoch, record.best_epoch = stopper.epoch, stopper.best_epoch
    record.duration = time.perf_counter() - start
    return params, record


def _unflatten(flat, shapes):
    out, lo = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(flat[lo:lo + size].reshape(shape))
        lo += size
    return out


def _abort(params, best, record, start, msg):
    params.set_parameters(best)
    record.failed, record.error = True, msg
    record.stop_epoch = len(record.val_trace)
    record.duration = time.perf_counter() - start
    log.warning("%s seed %d: %s", record.model, record.seed, msg)
    return params, record


# ---------------------------------------------------------------- seeds

def evaluate_model(params, bundle: DatasetBundle, config: ExperimentConfig, seed: int, removed: int,
                   noise: NoiseStream) -> MetricsRow:
    ec = config.eval
    est = estimate_effects(params, bundle, ec.n_posterior_samples, noise,
                           reencode=ec.reencode_flipped_a, ay_mode=ec.ay_mode)
    kl = encoder_kl_metric(params, bundle) if params.variational else None
    return metrics_row(seed, params.kind, removed, est, bundle, kl)


def run_single_seed(config: ExperimentConfig, seed: int) -> list:
    """Train and score every configured model on every removal setting for one master seed."""
    records = []
    for removed in config.data.features_removed:
        try:
            bundle = make_bundle(config, seed, removed)
        except DataError as exc:
            for kind in config.train.models:
                records.append(RunRecord(config.digest(), seed, kind, removed, failed=True,
                                         error=f"data generation failed: {exc}"))
            continue
        split = split_indices(bundle.n, config.train.validation_fraction,
                              NoiseStream(seed, f"split/{removed}"))
        eval_bundle = bundle.subset(split[1]) if config.eval.split == "validation" else bundle
        for kind in config.train.models:
            noise = NoiseStream(seed, f"model/{removed}/{kind}")
            params, rec = train(kind, bundle, config, noise, *split, seed=seed, removed=removed)
            if not rec.failed:
                try:
                    rec.metrics = evaluate_model(params, eval_bundle, config, seed, removed,
                                                 NoiseStream(seed, f"eval/{removed}/{kind}"))
                except ValueError as exc:
                    rec.failed, rec.error = True, f"evaluation failed: {exc}"
            records.append(rec)
    return records


def _run_seed_job(args):
    config, seed = args
    return run_single_seed(config, seed)


def sweep(config: ExperimentConfig, progress=None) -> list:
    """All seeds' run records, ordered by seed regardless of worker count."""
    seeds = list(range(config.train.first_seed, config.train.first_seed + config.train.n_seeds))
    jobs = [(config, s) for s in seeds]
    if config.train.workers > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(config.train.workers) as pool:
            results = pool.map(_run_seed_job, jobs, chunksize=1)
    else:
        results = []
        for job in jobs:
            results.append(_run_seed_job(job))
            if progress:
                progress(job[1], results[-1])
    by_seed = dict(zip(seeds, results))
    return [rec for s in sorted(by_seed) for rec in by_seed[s]]


# ---------------------------------------------------------------- aggregation

@dataclass
class CellStats:
    mean: float
    se: float | None
    n: int


@dataclass
class AggregateReport:
    cells: dict = field(default_factory=dict)  # (metric, model, removed) -> CellStats

    def models(self):
        present = {k[1] for k in self.cells}
        return [m for m in MODEL_KINDS if m in present] + sorted(present - set(MODEL_KINDS))

    def removed(self):
        return sorted({k[2] for k in self.cells})

    def metrics(self):
        present = {k[0] for k in self.cells}
        return [m for m in METRIC_NAMES if m in present]


def aggregate(rows) -> AggregateReport:
    """Mean and standard error (sample sd / sqrt(n)) per metric, model and removal setting."""
    groups: dict = {}
    for r in sorted(rows, key=lambda r: (r.model, r.removed, r.seed)):
        for metric in METRIC_NAMES:
            v = getattr(r, metric)
            if v is not None:
                groups.setdefault((metric, r.model, r.removed), []).append(v)
    report = AggregateReport()
    for key in sorted(groups):
        vals = np.array(groups[key], dtype=np.float64)
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None
        report.cells[key] = CellStats(float(vals.mean()), se, len(vals))
    return report


def format_cell(mean: float, se: float | None) -> str:
    """``mean`` to 3 significant digits and ``se`` to the same decimal place."""
    if mean == 0 or not math.isfinite(mean):
        decimals = 2
    else:
        decimals = max(0, 2 - int(math.floor(math.log10(abs(mean)))))
    text = f"{mean:.{decimals}f}"
    if se is None:
        return f"{text} ± n/a"
    return f"{text} ± {se:.{decimals}f}"


REPORT_CSV_COLUMNS = ("metric", "model", "removed", "mean", "se", "n")


def emit_report(report: AggregateReport, fmt: str, path) -> Path:
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_CSV_COLUMNS)
            for (metric, model, removed), c in sorted(report.cells.items()):
                w.writerow([metric, model, removed, format(c.mean, ".17g"),
                            "" if c.se is None else format(c.se, ".17g"), c.n])
        return path
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = []
    removed = report.removed()
    for metric in report.metrics():
        lines += [f"## {metric}", "",
                  "| model | " + " | ".join(f"{r} removed" for r in removed) + " |",
                  "|---" * (len(removed) + 1) + "|"]
        for model in report.models():
            cells = []
            for r in removed:
                c = report.cells.get((metric, model, r))
                cells.append("" if c is None else format_cell(c.mean, c.se))
            if any(cells):
                lines.append(f"| {model} | " + " | ".join(cells) + " |")
        lines.append("")
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_report_csv(path) -> AggregateReport:
    report = AggregateReport()
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            report.cells[(rec["metric"], rec["model"], int(rec["removed"]))] = CellStats(
                float(rec["mean"]), float(rec["se"]) if rec["se"] else None, int(rec["n"]))
    return report


def write_outputs(records, out_dir) -> dict:
    """Metrics rows, aggregate tables and (if any) the failure manifest."""
    from .evaluate import write_metrics_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.metrics for r in records if not r.failed and r.metrics is not None]
    failures = [{"seed": r.seed, "model": r.model, "removed": r.removed, "error": r.error}
                for r in records if r.failed]
    write_metrics_csv(rows, out / "metrics.csv")
    report = aggregate(rows)
    emit_report(report, "csv", out / "report.csv")
    emit_report(report, "markdown", out / "report.md")
    paths = {"metrics": out / "metrics.csv", "report_csv": out / "report.csv",
             "report_md": out / "report.md"}
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=1) + "\n")
        paths["failures"] = out / "failures.json"
    runs = [{"seed": r.seed, "model": r.model, "removed": r.removed, "stop_epoch": r.stop_epoch,
             "best_epoch": r.best_epoch, "failed": r.failed, "duration_s": round(r.duration, 3)}
            for r in records]
    (out / "runs.json").write_text(json.dumps(runs, indent=1) + "\n")
    return paths
