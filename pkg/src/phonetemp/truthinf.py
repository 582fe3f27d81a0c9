"""Truth inference over groups of (mu, sigma) answers: the learned pairwise
fold aggregator plus classical baselines (mean, weighted average, clustered
majority voting, PM-style truth discovery, and discretized D&S / ZC
adaptations).

The D&S and ZC variants are best-effort numeric adaptations of algorithms
originally defined for categorical tasks; their exact numeric form is a
documented reconstruction, not a reference implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import nn
from .estimator import Answer, TrainingError
from .nn import SIGMA_FLOOR, softplus

_NET = nn.aggregator_network()

SERIAL_FORMAT = "phonetemp-aggregator-v1"


@dataclass
class AggregatorModel:
    """Learned pairwise aggregator; sigma output uses the estimator's positivity map."""

    params: nn.ParamVector

    def __post_init__(self):
        if self.params.layout != nn.network_layout(_NET):
            raise ValueError("parameter layout does not match the aggregator shape")


@dataclass
class AnswerGroup:
    """Answers about one shared quantity, with sources and (optionally) truth."""

    answers: list[Answer]
    phone_ids: list[str]
    true_label: float | None = None

    def __post_init__(self):
        if not 1 <= len(self.answers) <= 6:
            raise ValueError("a group holds between 1 and 6 answers")
        if len(self.phone_ids) != len(self.answers):
            raise ValueError("one phone id per answer")
        if len(set(self.phone_ids)) != len(self.phone_ids):
            raise ValueError("phone ids must be distinct")

    def __len__(self) -> int:
        return len(self.answers)


def agg_pair(model: AggregatorModel, a: Answer, b: Answer) -> Answer:
    """Combine two answers into one through the aggregator network."""
    x = np.array([a.mu, a.sigma, b.mu, b.sigma])
    mu, sigma = nn.predict_gaussian(_NET, model.params, x)
    return Answer(float(mu), float(sigma))


def sorted_answers(answers) -> list[Answer]:
    """Fold order: ascending (sigma, mu) — most confident answers first."""
    return sorted(answers, key=lambda ans: (ans.sigma, ans.mu))


def cbts_fold(model: AggregatorModel, group: AnswerGroup) -> Answer:
    """Left-fold the group's sorted answers through agg_pair.

    A single answer passes through unchanged; a group of k answers costs
    exactly k - 1 agg_pair calls.
    """
    if len(group) == 0:
        raise ValueError("cannot fold an empty group")
    ordered = sorted_answers(group.answers)
    current = ordered[0]
    for nxt in ordered[1:]:
        current = agg_pair(model, current, nxt)
    return current


def _group_arrays(groups) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Bucket groups by size k -> (answers (B,k,2) sorted, labels (B,), indices)."""
    buckets: dict[int, list[int]] = {}
    for i, g in enumerate(groups):
        buckets.setdefault(len(g), []).append(i)
    out = {}
    for k, idxs in buckets.items():
        arr = np.empty((len(idxs), k, 2))
        labels = np.empty(len(idxs))
        for row, i in enumerate(idxs):
            g = groups[i]
            for j, ans in enumerate(sorted_answers(g.answers)):
                arr[row, j, 0] = ans.mu
                arr[row, j, 1] = ans.sigma
            labels[row] = g.true_label if g.true_label is not None else np.nan
        out[k] = (arr, labels, np.array(idxs))
    return out


def _fold_forward(params: nn.ParamVector, answers: np.ndarray):
    """Batched fold over (B, k, 2) pre-sorted answers; keeps tapes for backprop."""
    b, k, _ = answers.shape
    current = answers[:, 0, :]
    tapes = []
    for j in range(1, k):
        x = np.concatenate([current, answers[:, j, :]], axis=1)
        acts, pre, head_pre, y = nn._tape_forward(_NET, params, x)
        sraw = y[:, 1]
        current = np.stack([y[:, 0], softplus(sraw) + SIGMA_FLOOR], axis=1)
        tapes.append((x, acts, pre, head_pre, sraw))
    return current, tapes


def _fold_backward(params: nn.ParamVector, tapes, d_mu, d_sigma) -> np.ndarray:
    """Backprop d(loss)/d(final mu, sigma) through the fold chain.

    Gradients flow into every aggregator application and into the running
    answer; gradients w.r.t. the raw input answers are discarded (the
    estimators are frozen during aggregator training).
    """
    layout = params.layout
    tens = params.tensors()
    total = np.zeros(layout.size)
    for x, acts, pre, head_pre, sraw in reversed(tapes):
        d_sraw = d_sigma * expit(sraw)
        dy = np.stack([d_mu, d_sraw], axis=1)
        head = _NET.heads[0]
        dz = dy
        flat = np.zeros(layout.size)
        flat[layout.slices[f"{head.name}.W"]] = (dz.T @ acts[-1]).ravel()
        flat[layout.slices[f"{head.name}.b"]] = dz.sum(axis=0)
        dh = dz @ tens[f"{head.name}.W"]
        for i in range(len(_NET.layers) - 1, -1, -1):
            layer = _NET.layers[i]
            dz = dh * (pre[i] > 0.0) if layer.activation == "relu" else dh
            flat[layout.slices[f"{layer.name}.W"]] += (dz.T @ acts[i]).ravel()
            flat[layout.slices[f"{layer.name}.b"]] += dz.sum(axis=0)
            dh = dz @ tens[f"{layer.name}.W"]
        total += flat
        d_mu, d_sigma = dh[:, 0], dh[:, 1]
    return total


def fold_batch(model: AggregatorModel, groups) -> np.ndarray:
    """cbts_fold over many groups at once; returns the folded mu per group."""
    result = np.empty(len(groups))
    for k, (answers, _, idxs) in _group_arrays(groups).items():
        if k == 1:
            result[idxs] = answers[:, 0, 0]
        else:
            final, _ = _fold_forward(model.params, answers)
            result[idxs] = final[:, 0]
    return result


@dataclass(frozen=True)
class CbtsTrainConfig:
    lr: float = 1e-3
    patience: int = 20
    batch_groups: int = 64
    max_epochs: int = 400
    seed: int = 0


def _group_set_nll(params: nn.ParamVector, buckets) -> float:
    total, count = 0.0, 0
    for k, (answers, labels, _) in buckets.items():
        if k == 1:
            mu, sigma = answers[:, 0, 0], answers[:, 0, 1]
        else:
            final, _ = _fold_forward(params, answers)
            mu, sigma = final[:, 0], final[:, 1]
        total += float(np.sum(nn.gaussian_nll(mu, sigma, labels)))
        count += len(labels)
    return total / count


def cbts_train(
    train_groups,
    val_groups,
    config: CbtsTrainConfig = CbtsTrainConfig(),
) -> AggregatorModel:
    """Train the aggregator on labeled answer groups.

    The loss is the Gaussian NLL of the final folded answer against the
    group's true label, backpropagated through the whole fold chain; early
    stopping watches the validation group NLL with the configured patience.
    """
    for g in train_groups:
        if g.true_label is None:
            raise ValueError("training groups must carry true labels")
    params = nn.init_params(_NET, config.seed)
    state = nn.make_adam(config.lr, params.layout)
    rng = np.random.default_rng(config.seed)
    train_groups = list(train_groups)
    val_buckets = _group_arrays(val_groups)

    best = params
    best_nll = _group_set_nll(params, val_buckets)
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        if stale >= config.patience:
            break
        order = rng.permutation(len(train_groups))
        for start in range(0, len(order), config.batch_groups):
            batch = [train_groups[i] for i in order[start : start + config.batch_groups]]
            buckets = _group_arrays(batch)
            grad = np.zeros(params.layout.size)
            n_batch = len(batch)
            for k, (answers, labels, _) in buckets.items():
                if k == 1:
                    continue  # nothing to learn from a pass-through
                final, tapes = _fold_forward(params, answers)
                mu, sigma = final[:, 0], final[:, 1]
                d_mu, d_sigma = nn.gaussian_nll_grad(mu, sigma, labels)
                grad += _fold_backward(
                    params, tapes, np.atleast_1d(d_mu) / n_batch, np.atleast_1d(d_sigma) / n_batch
                )
            params, state = nn.adam_step(
                state, params, nn.GradientVector(grad, params.layout)
            )
        val_nll = _group_set_nll(params, val_buckets)
        if not np.isfinite(val_nll) or val_nll > 1e6:
            raise TrainingError(f"aggregator diverged at epoch {epoch}")
        if val_nll < best_nll:
            best, best_nll, stale = params, val_nll, 0
        else:
            stale += 1
    return AggregatorModel(best)


def save_aggregator(model: AggregatorModel, path) -> None:
    record = {
        "format": SERIAL_FORMAT,
        "layout": [[name, list(shape)] for name, shape in model.params.layout.entries],
        "params": [float(v).hex() for v in model.params.values],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=1))


def load_aggregator(path) -> AggregatorModel:
    record = json.loads(Path(path).read_text())
    if record.get("format") != SERIAL_FORMAT:
        raise ValueError(f"{path}: not a {SERIAL_FORMAT} record")
    layout = nn.Layout(tuple((name, tuple(shape)) for name, shape in record["layout"]))
    values = np.array([float.fromhex(v) for v in record["params"]])
    return AggregatorModel(nn.ParamVector(values, layout))


# --- classical baselines ---------------------------------------------------


def mean_infer(answers) -> float:
    """Arithmetic mean of the answer values."""
    if len(answers) == 0:
        raise ValueError("no answers")
    return float(np.mean([a.mu for a in answers]))


def compute_wa_weights(train_maes: dict[str, float]) -> dict[str, float]:
    """Inverse-error weights W_n = (1/E_n) / sum_i (1/E_i)."""
    if any(e <= 0.0 for e in train_maes.values()):
        raise ValueError("training errors must be positive")
    inv = {pid: 1.0 / e for pid, e in train_maes.items()}
    total = sum(inv.values())
    return {pid: v / total for pid, v in inv.items()}


def weighted_average(answers, phone_ids, weights: dict[str, float]) -> float:
    """Weighted mean of answer values, weights renormalized over present phones."""
    if len(answers) == 0:
        raise ValueError("no answers")
    w = np.array([weights[pid] for pid in phone_ids])
    mu = np.array([a.mu for a in answers])
    return float(np.dot(w, mu) / np.sum(w))


def _cluster_cost(values: np.ndarray, lo: int, hi: int) -> float:
    """Within-cluster sum of squares for sorted values[lo:hi]."""
    seg = values[lo:hi]
    return float(np.sum((seg - seg.mean()) ** 2))


def _best_partition(values: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Minimum-SSE partition of sorted values into k contiguous segments.

    Ties pick the lexicographically smallest boundary tuple, so the dynamic
    program agrees exactly with boundary-order enumeration.
    """
    n = len(values)
    # cost[m][i] = best cost of splitting values[i:] into m segments
    INF = float("inf")
    cost = [[INF] * (n + 1) for _ in range(k + 1)]
    cost[0][n] = 0.0
    for m in range(1, k + 1):
        for i in range(n - 1, -1, -1):
            for j in range(i + 1, n + 1):
                c = _cluster_cost(values, i, j) + cost[m - 1][j]
                if c < cost[m][i]:
                    cost[m][i] = c
    # reconstruct lexicographically: the smallest j reproducing the stored
    # minimum exists because the fill loop computed the identical expression
    segments = []
    i = 0
    for m in range(k, 0, -1):
        for j in range(i + 1, n + 1):
            if _cluster_cost(values, i, j) + cost[m - 1][j] == cost[m][i]:
                segments.append((i, j))
                i = j
                break
    return segments


def mv_infer(answers, k_clusters: int) -> float:
    """Majority voting by exact 1-D clustering: mean of the largest cluster.

    Fewer answers than clusters fall back to the plain mean. Cluster-size
    ties break toward the smaller within-cluster variance, then the smaller
    mean.
    """
    if len(answers) == 0:
        raise ValueError("no answers")
    mu = np.sort(np.array([a.mu for a in answers], dtype=np.float64))
    if len(mu) < k_clusters:
        return float(mu.mean())
    segments = _best_partition(mu, k_clusters)
    best = None
    for lo, hi in segments:
        size = hi - lo
        seg = mu[lo:hi]
        key = (-size, _cluster_cost(mu, lo, hi) / size, float(seg.mean()))
        if best is None or key < best[0]:
            best = (key, float(seg.mean()))
    return best[1]


def _answer_matrix(groups):
    """(mu matrix (G, P) with NaN gaps, phone order) from a list of AnswerGroups."""
    phones = []
    for g in groups:
        for pid in g.phone_ids:
            if pid not in phones:
                phones.append(pid)
    mat = np.full((len(groups), len(phones)), np.nan)
    col = {pid: i for i, pid in enumerate(phones)}
    for gi, g in enumerate(groups):
        for ans, pid in zip(g.answers, g.phone_ids):
            mat[gi, col[pid]] = ans.mu
    return mat, phones


def pm_infer(groups, max_iters: int = 100, tol: float = 1e-6, return_weights: bool = False):
    """Iterative truth discovery: alternate per-group weighted means and
    log-scaled per-phone reliability weights until truths stabilize."""
    if len(groups) == 0:
        raise ValueError("no groups")
    mat, phones = _answer_matrix(groups)
    present = ~np.isnan(mat)
    filled = np.where(present, mat, 0.0)
    truths = np.array([mean_infer(g.answers) for g in groups])
    weights = np.full(len(phones), 1.0 / len(phones))
    for _ in range(max_iters):
        sq = (filled - truths[:, None]) ** 2 * present
        per_phone = sq.sum(axis=0)
        total = per_phone.sum()
        if total <= 0.0:
            break  # perfect agreement: truths are already the fixed point
        weights = np.maximum(-np.log(per_phone / total), 1e-6)
        weights = weights / weights.sum()
        new_truths = (filled * weights[None, :] * present).sum(axis=1) / (
            present * weights[None, :]
        ).sum(axis=1)
        delta = float(np.max(np.abs(new_truths - truths)))
        truths = new_truths
        if delta < tol:
            break
    if return_weights:
        return truths, dict(zip(phones, weights))
    return truths


def ds_infer(groups, n_bins: int = 20, max_iters: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Discretized Dawid–Skene: equal-width bins over the observed answer
    range, classical confusion-matrix EM, posterior-mode bin center."""
    if len(groups) == 0:
        raise ValueError("no groups")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    mat, phones = _answer_matrix(groups)
    present = ~np.isnan(mat)
    values = mat[present]
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:  # degenerate zero-width range: every answer identical
        return np.array([mean_infer(g.answers) for g in groups])
    centers = lo + (hi - lo) * (np.arange(n_bins) + 0.5) / n_bins
    safe = np.where(present, mat, lo)
    bins = np.clip(((safe - lo) / (hi - lo) * n_bins).astype(int), 0, n_bins - 1)

    n_groups, n_phones = mat.shape
    # posterior over the truth bin per group, initialised from answer counts
    post = np.full((n_groups, n_bins), 1e-12)
    for pi in range(n_phones):
        rows = np.where(present[:, pi])[0]
        np.add.at(post, (rows, bins[rows, pi]), 1.0)
    post /= post.sum(axis=1, keepdims=True)

    smoothing = 0.01
    for _ in range(max_iters):
        prior = post.sum(axis=0) + smoothing
        prior /= prior.sum()
        confusion = np.full((n_phones, n_bins, n_bins), smoothing)
        for pi in range(n_phones):
            rows = np.where(present[:, pi])[0]
            np.add.at(confusion[pi].T, bins[rows, pi], post[rows])
        confusion /= confusion.sum(axis=2, keepdims=True)

        log_post = np.tile(np.log(prior), (n_groups, 1))
        for pi in range(n_phones):
            rows = np.where(present[:, pi])[0]
            log_post[rows] += np.log(confusion[pi, :, bins[rows, pi]].T).T
        log_post -= log_post.max(axis=1, keepdims=True)
        new_post = np.exp(log_post)
        new_post /= new_post.sum(axis=1, keepdims=True)
        delta = float(np.max(np.abs(new_post - post)))
        post = new_post
        if delta < tol:
            break
    return centers[np.argmax(post, axis=1)]


def zc_infer(
    groups,
    support_radius: float = 0.5,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> np.ndarray:
    """Scalar-reliability EM: an answer supports the candidate truth when it
    lies within the support radius; truths are reliability-weighted means."""
    if len(groups) == 0:
        raise ValueError("no groups")
    mat, phones = _answer_matrix(groups)
    present = ~np.isnan(mat)
    filled = np.where(present, mat, 0.0)
    truths = np.array([mean_infer(g.answers) for g in groups])
    reliability = np.full(len(phones), 0.8)
    for _ in range(max_iters):
        supports = (np.abs(filled - truths[:, None]) < support_radius) & present
        counts = present.sum(axis=0)
        reliability = (supports.sum(axis=0) + 1.0) / (counts + 2.0)
        new_truths = (filled * reliability[None, :] * present).sum(axis=1) / (
            present * reliability[None, :]
        ).sum(axis=1)
        delta = float(np.max(np.abs(new_truths - truths)))
        truths = new_truths
        if delta < tol:
            break
    return truths
