"""Per-phone ambient temperature estimation: a 9-feature network with parallel
value and uncertainty heads, trained on the Gaussian negative log likelihood.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import nn
from .data import NormStats, PhoneDataset, Sample, feature_matrix, label_vector, normalize_matrix
from .nn import SIGMA_FLOOR

SERIAL_FORMAT = "phonetemp-estimator-v1"


class TrainingError(RuntimeError):
    """Training diverged (non-finite or exploding loss)."""


@dataclass(frozen=True)
class Answer:
    """One device's temperature estimate and its uncertainty, both in degC."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.sigma)):
            raise ValueError("answer values must be finite")
        if self.sigma < SIGMA_FLOOR:
            raise ValueError(f"sigma must be >= {SIGMA_FLOOR}")


@dataclass
class EstimatorModel:
    """Trained per-phone estimator: parameters, input normalizer, identity."""

    params: nn.ParamVector
    norm: NormStats
    phone_id: str
    trace: list[tuple[int, float, float]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        expected = nn.network_layout(nn.estimator_network())
        if self.params.layout != expected:
            raise ValueError("parameter layout does not match the estimator shape")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    patience: int = 20
    holdout_fraction: float = 0.2
    max_epochs: int = 200
    seed: int = 0


_NET = nn.estimator_network()


def predict_batch(model: EstimatorModel, samples) -> tuple[np.ndarray, np.ndarray]:
    """(mu, sigma) arrays for a sequence of samples."""
    x = normalize_matrix(feature_matrix(samples), model.norm)
    mu, sigma = nn.predict_gaussian(_NET, model.params, x)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise nn.NumericalError("non-finite prediction")
    return mu, sigma


def predict(model: EstimatorModel, sample: Sample) -> Answer:
    """Deterministic (mu, sigma) answer for one observation."""
    mu, sigma = predict_batch(model, [sample])
    return Answer(float(mu[0]), float(sigma[0]))


def train(
    dataset: PhoneDataset,
    config: TrainConfig = TrainConfig(),
    norm: NormStats | None = None,
) -> EstimatorModel:
    """Train one phone's estimator with Adam and holdout early stopping.

    A holdout slice of the training data picks the stopping point; the
    returned model carries the parameters with the best holdout NLL and a
    (epoch, train NLL, holdout NLL) trace. `norm` defaults to stats fitted
    on this dataset; pipelines pass shared contributor-training stats.
    """
    if len(dataset) < 50:
        raise ValueError("need at least 50 samples to train an estimator")
    if norm is None:
        from .data import fit_normalizer

        norm = fit_normalizer(dataset)

    x_all = normalize_matrix(feature_matrix(dataset.samples), norm)
    y_all = label_vector(dataset.samples)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(dataset))
    n_hold = max(int(round(config.holdout_fraction * len(dataset))), 1)
    hold_idx, fit_idx = perm[:n_hold], perm[n_hold:]
    x_fit, y_fit = x_all[fit_idx], y_all[fit_idx]
    x_hold, y_hold = x_all[hold_idx], y_all[hold_idx]

    params = nn.init_params(_NET, config.seed)
    state = nn.make_adam(config.lr, params.layout)

    def holdout_nll(p):
        return nn.network_loss(_NET, p, x_hold, y_hold)

    best = params
    best_nll = holdout_nll(params)
    trace = [(0, nn.network_loss(_NET, params, x_fit, y_fit), best_nll)]
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        if stale >= config.patience:
            break
        order = rng.permutation(len(fit_idx))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            grads = nn.backward(_NET, params, x_fit[batch], y_fit[batch])
            params, state = nn.adam_step(state, params, grads)
        train_nll = nn.network_loss(_NET, params, x_fit, y_fit)
        hold_nll = holdout_nll(params)
        trace.append((epoch, train_nll, hold_nll))
        if not (np.isfinite(train_nll) and np.isfinite(hold_nll)) or train_nll > 1e6:
            raise TrainingError(f"diverged at epoch {epoch} (train NLL {train_nll})")
        if hold_nll < best_nll:
            best, best_nll, stale = params, hold_nll, 0
        else:
            stale += 1

    return EstimatorModel(best, norm, dataset.phone_id, trace=trace)


def evaluate_mae(model: EstimatorModel, dataset: PhoneDataset) -> float:
    """Mean absolute error of the value head over a dataset, in degC."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    mu, _ = predict_batch(model, dataset.samples)
    return float(np.mean(np.abs(mu - label_vector(dataset.samples))))


def uncertainty_bias_correlation(model: EstimatorModel, dataset: PhoneDataset):
    """Spearman rank correlation between predicted sigma and |mu - label|.

    Returns (coefficient, degenerate_flag); a zero-variance rank input
    (e.g. constant sigma) yields (0.0, True).
    """
    if len(dataset) < 30:
        raise ValueError("need at least 30 samples")
    mu, sigma = predict_batch(model, dataset.samples)
    bias = np.abs(mu - label_vector(dataset.samples))
    if np.ptp(sigma) == 0.0 or np.ptp(bias) == 0.0:
        return 0.0, True
    rho = spearmanr(sigma, bias).statistic
    return float(rho), False


def _hex_list(arr) -> list[str]:
    return [float(v).hex() for v in np.asarray(arr, dtype=np.float64).ravel()]


def _from_hex(values) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values])


def save_model(model: EstimatorModel, path) -> None:
    """Serialize to a self-describing JSON record with exact float round-trip."""
    record = {
        "format": SERIAL_FORMAT,
        "phone_id": model.phone_id,
        "sigma_floor": SIGMA_FLOOR.hex(),
        "layout": [[name, list(shape)] for name, shape in model.params.layout.entries],
        "params": _hex_list(model.params.values),
        "norm_mean": _hex_list(model.norm.mean),
        "norm_std": _hex_list(model.norm.std),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=1))


def load_model(path) -> EstimatorModel:
    record = json.loads(Path(path).read_text())
    if record.get("format") != SERIAL_FORMAT:
        raise ValueError(f"{path}: not a {SERIAL_FORMAT} record")
    layout = nn.Layout(tuple((name, tuple(shape)) for name, shape in record["layout"]))
    params = nn.ParamVector(_from_hex(record["params"]), layout)
    norm = NormStats(_from_hex(record["norm_mean"]), _from_hex(record["norm_std"]))
    return EstimatorModel(params, norm, record["phone_id"])
