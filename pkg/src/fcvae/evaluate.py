"""Effect-estimation error, treatment policies and the encoder KL diagnostic."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .datagen import DatasetBundle
from .diffcore import gaussian_kl_to_standard, no_grad
from .effects import EffectEstimates, predict_outcomes
from .models import infer_posterior

METRIC_NAMES = ("pehe_at", "pehe_ty", "pehe_ay", "regret", "acc_gap", "encoder_kl")


def pehe(estimated, truth) -> float:
    """Root mean squared error between per-row estimated and true effects."""
    est = np.asarray(estimated, dtype=np.float64).ravel()
    tru = np.asarray(truth, dtype=np.float64).ravel()
    if est.size == 0:
        raise ValueError("pehe of an empty set")
    if est.shape != tru.shape:
        raise ValueError(f"length mismatch: {est.size} estimates vs {tru.size} truths")
    return float(np.sqrt(np.mean((est - tru) ** 2)))


def argmax_policy(y0, y1) -> np.ndarray:
    """Treat iff the t=1 outcome is strictly larger; ties go to t=0."""
    return (np.asarray(y1) > np.asarray(y0)).astype(np.int64)


def optimal_policy(bundle: DatasetBundle) -> np.ndarray:
    rows = np.arange(bundle.n)
    return argmax_policy(bundle.y_cf[rows, 0, bundle.a], bundle.y_cf[rows, 1, bundle.a])


def policy_from_predictions(y_hat) -> np.ndarray:
    y_hat = np.asarray(y_hat)
    return argmax_policy(y_hat[:, 0], y_hat[:, 1])


def policy_from_model(params, bundle: DatasetBundle, n_samples=10, noise=None) -> np.ndarray:
    return policy_from_predictions(predict_outcomes(params, bundle.x, bundle.a, n_samples, noise))


def policy_value(policy, bundle: DatasetBundle) -> float:
    policy = np.asarray(policy, dtype=np.int64)
    return float(np.mean(bundle.y_cf[np.arange(bundle.n), policy, bundle.a]))


def regret(policy, bundle: DatasetBundle) -> float:
    # the per-row optimum can never be beaten, so clamp away round-off
    return max(0.0, policy_value(optimal_policy(bundle), bundle) - policy_value(policy, bundle))


@dataclass
class PolicyEval:
    policy: np.ndarray
    value: float
    optimal_value: float
    accuracy: float
    accuracy_by_group: tuple

    @property
    def regret(self) -> float:
        return max(0.0, self.optimal_value - self.value)

    @property
    def accuracy_gap(self) -> float:
        return abs(self.accuracy_by_group[1] - self.accuracy_by_group[0])


class EmptySubgroup(ValueError):
    pass


def _group_accuracy(policy, bundle):
    hit = np.asarray(policy) == optimal_policy(bundle)
    counts = [int(np.sum(bundle.a == g)) for g in (0, 1)]
    if min(counts) == 0:
        raise EmptySubgroup(f"accuracy gap needs both groups; sizes A=0: {counts[0]}, A=1: {counts[1]}")
    return float(hit.mean()), tuple(float(hit[bundle.a == g].mean()) for g in (0, 1))


def accuracy_gap(policy, bundle: DatasetBundle) -> float:
    _, (acc0, acc1) = _group_accuracy(policy, bundle)
    return abs(acc1 - acc0)


def evaluate_policy(policy, bundle: DatasetBundle) -> PolicyEval:
    acc, groups = _group_accuracy(policy, bundle)
    return PolicyEval(np.asarray(policy), policy_value(policy, bundle),
                      policy_value(optimal_policy(bundle), bundle), acc, groups)


def encoder_kl_metric(params, bundle: DatasetBundle) -> float:
    """Mean closed-form KL(q(Z | .) || N(0, I)) over rows."""
    if not params.variational:
        raise TypeError(f"{params.kind} has no encoder; encoder KL is undefined")
    with no_grad():
        mean, log_std = infer_posterior(params, bundle.x, bundle.a)
    return float(np.mean(gaussian_kl_to_standard(mean.data, log_std.data)))


@dataclass
class MetricsRow:
    seed: int
    model: str
    removed: int
    pehe_at: float
    pehe_ty: float
    pehe_ay: float
    regret: float
    acc_gap: float
    encoder_kl: float | None = None

    def __post_init__(self):
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if v is None:
                continue
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name}={v} must be finite and non-negative")
        if self.acc_gap > 1:
            raise ValueError("acc_gap must lie in [0, 1]")


def metrics_row(seed, model_name, removed, est: EffectEstimates, bundle: DatasetBundle,
                encoder_kl=None) -> MetricsRow:
    policy = policy_from_predictions(est.y_hat)
    pe = evaluate_policy(policy, bundle)
    return MetricsRow(
        seed=int(seed), model=model_name, removed=int(removed),
        pehe_at=pehe(est.ie_at_hat, est.ie_at_true), pehe_ty=pehe(est.ie_ty_hat, est.ie_ty_true),
        pehe_ay=pehe(est.ie_ay_hat, est.ie_ay_true), regret=pe.regret, acc_gap=pe.accuracy_gap,
        encoder_kl=encoder_kl,
    )


METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRow))


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_metrics_csv(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([_cell(getattr(r, c)) for c in METRICS_COLUMNS])


def read_metrics_csv(path) -> list:
    out = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            missing = [c for c in METRICS_COLUMNS if c not in rec]
            if missing:
                raise ValueError(f"{path}: missing columns {missing}")
            out.append(MetricsRow(
                seed=int(rec["seed"]), model=rec["model"], removed=int(rec["removed"]),
                **{k: float(rec[k]) for k in METRIC_NAMES if k != "encoder_kl"},
                encoder_kl=float(rec["encoder_kl"]) if rec["encoder_kl"] != "" else None,
            ))
    return out
