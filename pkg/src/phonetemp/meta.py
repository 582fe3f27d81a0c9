"""Meta-task construction, first-order MAML meta-training/validation, and the
pre-training / direct-training few-shot baselines.

The inner loop adapts a copy of the shared initialization with plain SGD on
each task's support loss; the meta step applies the sum of query-set
gradients evaluated at the adapted parameters (the first-order
approximation). Tasks in a batch are processed with stacked per-task
parameter tensors so a 400-task batch is a handful of einsum calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import nn
from .data import NormStats, PhoneDataset, Sample, feature_matrix, label_vector, normalize_matrix
from .estimator import TrainConfig, TrainingError
from .nn import SIGMA_FLOOR, softplus

_NET = nn.estimator_network()


@dataclass(frozen=True)
class Task:
    """Support and query samples drawn from a single phone."""

    phone_id: str
    support: tuple[Sample, ...]
    query: tuple[Sample, ...]

    def __post_init__(self):
        if not self.support or not self.query:
            raise ValueError("support and query sets must be non-empty")
        overlap = set(map(id, self.support)) & set(map(id, self.query))
        if overlap:
            raise ValueError("support and query sets must be disjoint")


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 0.001        # task-level learning rate
    beta: float = 0.01          # meta learning rate
    n_batch: int = 400          # tasks per meta step
    s1: int = 5                 # inner-loop steps during meta-training
    s2: int = 20                # fine-tune steps at validation / deployment
    meta_optimizer: str = "adam"  # or "sgd"
    k_spt: int = 5
    k_qry: int = 15
    seed: int = 0
    max_epochs: int = 200
    patience: int = 20
    second_order: bool = False  # reserved; only the first-order path exists

    def __post_init__(self):
        if min(self.alpha, self.beta) <= 0.0:
            raise ValueError("learning rates must be positive")
        if min(self.n_batch, self.s2, self.k_spt, self.k_qry) < 1 or self.s1 < 0:
            raise ValueError("counts must be positive (s1 may be 0)")
        if self.meta_optimizer not in ("sgd", "adam"):
            raise ValueError("meta optimizer must be sgd or adam")


def build_task_set(
    datasets: list[PhoneDataset],
    k_spt: int,
    k_qry: int,
    n_tasks: int,
    seed: int,
) -> list[Task]:
    """Sample tasks: a uniformly chosen phone, k_spt + k_qry distinct rows."""
    need = k_spt + k_qry
    for ds in datasets:
        if len(ds) < need:
            raise ValueError(f"phone {ds.phone_id!r} has fewer than {need} samples")
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n_tasks):
        ds = datasets[int(rng.integers(len(datasets)))]
        rows = rng.choice(len(ds), size=need, replace=False)
        samples = [ds.samples[i] for i in rows]
        tasks.append(Task(ds.phone_id, tuple(samples[:k_spt]), tuple(samples[k_spt:])))
    return tasks


@dataclass(frozen=True)
class _TaskArrays:
    """Normalized feature/label tensors for a uniform-size task list."""

    sx: np.ndarray  # (T, k_spt, 9)
    sy: np.ndarray  # (T, k_spt)
    qx: np.ndarray  # (T, k_qry, 9)
    qy: np.ndarray  # (T, k_qry)


def _task_arrays(tasks, norm: NormStats) -> _TaskArrays:
    k_spt = len(tasks[0].support)
    k_qry = len(tasks[0].query)
    for t in tasks:
        if len(t.support) != k_spt or len(t.query) != k_qry:
            raise ValueError("tasks in a set must share support/query sizes")
    sx = np.stack([normalize_matrix(feature_matrix(t.support), norm) for t in tasks])
    sy = np.stack([label_vector(t.support) for t in tasks])
    qx = np.stack([normalize_matrix(feature_matrix(t.query), norm) for t in tasks])
    qy = np.stack([label_vector(t.query) for t in tasks])
    return _TaskArrays(sx, sy, qx, qy)


def _stack_params(params: nn.ParamVector, count: int) -> dict[str, np.ndarray]:
    return {
        name: np.repeat(params.tensor(name)[None, ...], count, axis=0)
        for name, _ in params.layout.entries
    }


def _forward_stacked(stacked: dict[str, np.ndarray], x: np.ndarray):
    """Taped forward with per-task parameters; x is (T, n, in_dim)."""
    acts, pre = [x], []
    h = x
    for layer in _NET.layers:
        z = np.einsum("tij,tnj->tni", stacked[f"{layer.name}.W"], h)
        z += stacked[f"{layer.name}.b"][:, None, :]
        pre.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(h)
    outs = []
    for head in _NET.heads:
        z = np.einsum("tij,tnj->tni", stacked[f"{head.name}.W"], h)
        z += stacked[f"{head.name}.b"][:, None, :]
        outs.append(z)  # estimator heads are identity
    y = np.concatenate(outs, axis=2)
    return acts, pre, y


def _grads_stacked(stacked, x, y_true):
    """Per-task gradients of the per-task mean NLL; returns (grads, losses)."""
    acts, pre, y = _forward_stacked(stacked, x)
    n = x.shape[1]
    mu, sraw = y[..., 0], y[..., 1]
    sigma = softplus(sraw) + SIGMA_FLOOR
    resid = mu - y_true
    losses = np.mean(
        0.5 * np.log(2.0 * np.pi) + np.log(sigma) + resid**2 / (2.0 * sigma**2), axis=1
    )
    d_mu = resid / sigma**2 / n
    d_sraw = (1.0 / sigma - resid**2 / sigma**3) / n * expit(sraw)
    dy = np.stack([d_mu, d_sraw], axis=2)

    grads = {}
    h_last = acts[-1]
    dh = np.zeros_like(h_last)
    col = 0
    for head in _NET.heads:
        dz = dy[:, :, col : col + head.out_dim]
        col += head.out_dim
        grads[f"{head.name}.W"] = np.einsum("tni,tnj->tij", dz, h_last)
        grads[f"{head.name}.b"] = dz.sum(axis=1)
        dh += np.einsum("tni,tij->tnj", dz, stacked[f"{head.name}.W"])
    for i in range(len(_NET.layers) - 1, -1, -1):
        layer = _NET.layers[i]
        dz = dh * (pre[i] > 0.0) if layer.activation == "relu" else dh
        grads[f"{layer.name}.W"] = np.einsum("tni,tnj->tij", dz, acts[i])
        grads[f"{layer.name}.b"] = dz.sum(axis=1)
        dh = np.einsum("tni,tij->tnj", dz, stacked[f"{layer.name}.W"])
    return grads, losses


def _adapt_stacked(stacked, sx, sy, alpha: float, steps: int):
    for _ in range(steps):
        grads, _ = _grads_stacked(stacked, sx, sy)
        stacked = {name: stacked[name] - alpha * grads[name] for name in stacked}
    return stacked


def _flatten_task_grads(grads, layout: nn.Layout) -> np.ndarray:
    """(T, layout.size) matrix from per-task gradient tensors."""
    count = next(iter(grads.values())).shape[0]
    flat = np.empty((count, layout.size))
    for name, _ in layout.entries:
        flat[:, layout.slices[name]] = grads[name].reshape(count, -1)
    return flat


def _batch_gradient_arrays(
    params: nn.ParamVector, arrays: _TaskArrays, alpha: float, s1: int
) -> nn.GradientVector:
    stacked = _stack_params(params, arrays.sx.shape[0])
    stacked = _adapt_stacked(stacked, arrays.sx, arrays.sy, alpha, s1)
    grads, _ = _grads_stacked(stacked, arrays.qx, arrays.qy)
    total = _flatten_task_grads(grads, params.layout).sum(axis=0)
    return nn.GradientVector(total, params.layout)


def meta_batch_gradient(
    params: nn.ParamVector, tasks: list[Task], config: MetaConfig, norm: NormStats
) -> nn.GradientVector:
    """Sum over tasks of the query gradient at the task-adapted parameters.

    This is the quantity a meta step (or a federated client) contributes:
    each task copies the shared parameters, runs s1 inner SGD steps on its
    support loss, and evaluates the query-loss gradient there. The shared
    parameters are never mutated.
    """
    return _batch_gradient_arrays(
        params, _task_arrays(tasks, norm), config.alpha, config.s1
    )


def maml_adapt(
    params: nn.ParamVector, support, alpha: float, steps: int, norm: NormStats
) -> nn.ParamVector:
    """Fine-tune a copy of the parameters with full-batch SGD on the support
    set; the original parameters are untouched."""
    if len(support) == 0:
        raise ValueError("support set is empty")
    x = normalize_matrix(feature_matrix(support), norm)
    y = label_vector(support)
    adapted = params
    for _ in range(steps):
        grads = nn.backward(_NET, adapted, x, y)
        adapted = nn.sgd_step(adapted, grads, alpha)
    return adapted


def query_mae(params: nn.ParamVector, samples, norm: NormStats) -> float:
    x = normalize_matrix(feature_matrix(samples), norm)
    mu, _ = nn.predict_gaussian(_NET, params, x)
    return float(np.mean(np.abs(mu - label_vector(samples))))


def _validate_arrays(params: nn.ParamVector, arrays: _TaskArrays, alpha, s2) -> float:
    stacked = _stack_params(params, arrays.sx.shape[0])
    stacked = _adapt_stacked(stacked, arrays.sx, arrays.sy, alpha, s2)
    _, _, y = _forward_stacked(stacked, arrays.qx)
    per_task = np.mean(np.abs(y[..., 0] - arrays.qy), axis=1)
    return float(np.mean(per_task))


def meta_validate(
    params: nn.ParamVector, tasks: list[Task], alpha: float, s2: int, norm: NormStats
) -> float:
    """Mean over tasks of the query MAE after s2 adaptation steps."""
    if not tasks:
        raise ValueError("no validation tasks")
    return _validate_arrays(params, _task_arrays(tasks, norm), alpha, s2)


def maml_train(
    tasks: list[Task],
    init_params: nn.ParamVector,
    config: MetaConfig,
    norm: NormStats,
    val_tasks: list[Task] | None = None,
) -> nn.ParamVector:
    """Meta-train the shared initialization over shuffled task batches.

    Each epoch walks the task set in seeded shuffled order, one meta step per
    batch of n_batch tasks (the final short batch included). With a
    validation task set, training early-stops on meta-validation MAE with the
    configured patience and returns the best parameters seen.
    """
    if not tasks:
        raise ValueError("no training tasks")
    if config.second_order:
        raise NotImplementedError("second-order meta-gradients are not implemented")
    params = init_params
    if config.meta_optimizer == "adam":
        state = nn.make_adam(config.beta, params.layout)
    else:
        state = nn.make_sgd(config.beta)
    rng = np.random.default_rng(config.seed)
    arrays = _task_arrays(tasks, norm)
    val_arrays = _task_arrays(val_tasks, norm) if val_tasks else None

    best = params
    best_mae = (
        _validate_arrays(params, val_arrays, config.alpha, config.s2)
        if val_tasks
        else np.inf
    )
    stale = 0
    for _ in range(config.max_epochs):
        if val_tasks and stale >= config.patience:
            break
        order = rng.permutation(len(tasks))
        for start in range(0, len(order), config.n_batch):
            idx = order[start : start + config.n_batch]
            batch = _TaskArrays(
                arrays.sx[idx], arrays.sy[idx], arrays.qx[idx], arrays.qy[idx]
            )
            grad = _batch_gradient_arrays(params, batch, config.alpha, config.s1)
            if not np.all(np.isfinite(grad.values)):
                raise TrainingError("meta gradient diverged")
            params, state = nn.optimizer_step(state, params, grad)
        if val_tasks:
            mae = _validate_arrays(params, val_arrays, config.alpha, config.s2)
            if not np.isfinite(mae) or mae > 1e6:
                raise TrainingError("meta-validation diverged")
            if mae < best_mae:
                best, best_mae, stale = params, mae, 0
            else:
                stale += 1
        else:
            best = params
    return best


def pretrain_baseline(
    contributor_train: list[PhoneDataset],
    config: TrainConfig,
    norm: NormStats,
) -> nn.ParamVector:
    """Conventional pooled training over all contributor training data."""
    from .estimator import train

    merged = PhoneDataset(
        "pooled", [s for ds in contributor_train for s in ds.samples]
    )
    return train(merged, config, norm=norm).params


def direct_train_baseline(
    support, config: MetaConfig, norm: NormStats, seed: int
) -> nn.ParamVector:
    """Train from fresh seeded parameters using only the given samples."""
    fresh = nn.init_params(_NET, seed)
    return maml_adapt(fresh, support, config.alpha, config.s2, norm)
