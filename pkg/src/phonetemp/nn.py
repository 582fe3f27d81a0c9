"""Dense-network math for the two fixed model shapes used in the toolkit.

All training math is float64 numpy. A network is a short stack of dense
layers (the trunk) plus parallel dense heads whose outputs are concatenated;
parameters live in a single flat vector with a named layout so optimizers,
meta-learning, and encrypted gradient aggregation can treat them as plain
vectors. Differentiation is reverse-mode over this fixed topology, not a
general autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.special import expit

SIGMA_FLOOR = 1e-3
_HALF_LOG_2PI = 0.5 * float(np.log(2.0 * np.pi))

_ACTIVATIONS = ("relu", "identity")
_LOSSES = ("gaussian", "squared_error")


class LayoutError(ValueError):
    """Shape or layout contract violation."""


class NumericalError(FloatingPointError):
    """Non-finite value produced inside a network evaluation."""


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class Dense:
    """One fully connected layer: out = act(W @ x + b)."""

    name: str
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim < 0 or self.out_dim <= 0:
            raise ValueError("layer dimensions must be positive")


@dataclass(frozen=True)
class Network:
    """Fixed-topology graph: sequential trunk, parallel heads, one loss kind.

    Head outputs are concatenated in declaration order. For the "gaussian"
    loss the concatenated output must be 2-dimensional (mu, raw sigma); the
    raw sigma is mapped through softplus + SIGMA_FLOOR inside the loss.
    """

    layers: tuple[Dense, ...]
    heads: tuple[Dense, ...] = ()
    loss: str = "gaussian"

    def __post_init__(self):
        if self.loss not in _LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        dims = [l.in_dim for l in self.layers] + (
            [self.layers[-1].out_dim] if self.layers else []
        )
        for prev, layer in zip(self.layers, self.layers[1:]):
            if layer.in_dim != prev.out_dim:
                raise LayoutError(
                    f"layer {layer.name!r} expects {layer.in_dim} inputs, "
                    f"{prev.name!r} produces {prev.out_dim}"
                )
        trunk_out = self.layers[-1].out_dim if self.layers else None
        for head in self.heads:
            if trunk_out is not None and head.in_dim != trunk_out:
                raise LayoutError(
                    f"head {head.name!r} expects {head.in_dim} inputs, trunk "
                    f"produces {trunk_out}"
                )
        expected = {"gaussian": 2, "squared_error": 1}[self.loss]
        if self.layers or self.heads:
            if self.out_dim != expected:
                raise LayoutError(
                    f"{self.loss} loss needs {expected} outputs, network "
                    f"produces {self.out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim if self.layers else 0

    @property
    def out_dim(self) -> int:
        if self.heads:
            return sum(h.out_dim for h in self.heads)
        return self.layers[-1].out_dim if self.layers else 0

    @property
    def all_layers(self) -> tuple[Dense, ...]:
        return self.layers + self.heads


def estimator_network() -> Network:
    """9 state features -> 32 -> 16 trunk with parallel mu and sigma heads."""
    return Network(
        layers=(Dense("embed1", 9, 32, "relu"), Dense("embed2", 32, 16, "relu")),
        heads=(Dense("mu_head", 16, 1), Dense("sigma_head", 16, 1)),
        loss="gaussian",
    )


def aggregator_network() -> Network:
    """Pairwise answer aggregator: (mu_i, sigma_i, mu_j, sigma_j) -> (mu, sigma)."""
    return Network(
        layers=(Dense("embed", 4, 16, "relu"),),
        heads=(Dense("out", 16, 2),),
        loss="gaussian",
    )


@dataclass(frozen=True)
class Layout:
    """Ordered (name, shape) descriptors addressing a flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @cached_property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.entries)

    @cached_property
    def slices(self) -> dict[str, slice]:
        out, offset = {}, 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = slice(offset, offset + n)
            offset += n
        return out

    def shape_of(self, name: str) -> tuple[int, ...]:
        for entry_name, shape in self.entries:
            if entry_name == name:
                return shape
        raise KeyError(name)


def network_layout(net: Network) -> Layout:
    entries = []
    for layer in net.all_layers:
        entries.append((f"{layer.name}.W", (layer.out_dim, layer.in_dim)))
        entries.append((f"{layer.name}.b", (layer.out_dim,)))
    return Layout(tuple(entries))


def _as_flat(values, layout: Layout) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64).ravel())
    if arr.size != layout.size:
        raise LayoutError(f"expected {layout.size} values, got {arr.size}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector plus its named layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        object.__setattr__(self, "values", _as_flat(self.values, self.layout))

    def tensor(self, name: str) -> np.ndarray:
        return self.values[self.layout.slices[name]].reshape(self.layout.shape_of(name))

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: self.tensor(name) for name, _ in self.layout.entries}


@dataclass(frozen=True)
class GradientVector:
    """Loss gradient aligned element-for-element to a ParamVector layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        object.__setattr__(self, "values", _as_flat(self.values, self.layout))

    def tensor(self, name: str) -> np.ndarray:
        return self.values[self.layout.slices[name]].reshape(self.layout.shape_of(name))


def _check_same_layout(a, b):
    if a.layout != b.layout:
        raise LayoutError("mismatched parameter layouts")


def init_params(net: Network, seed: int) -> ParamVector:
    """Seeded uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)] per layer."""
    rng = np.random.default_rng(seed)
    layout = network_layout(net)
    flat = np.empty(layout.size)
    for layer in net.all_layers:
        bound = np.sqrt(1.0 / max(layer.in_dim, 1))
        w = rng.uniform(-bound, bound, size=(layer.out_dim, layer.in_dim))
        b = rng.uniform(-bound, bound, size=layer.out_dim)
        flat[layout.slices[f"{layer.name}.W"]] = w.ravel()
        flat[layout.slices[f"{layer.name}.b"]] = b
    return ParamVector(flat, layout)


def dense_forward(x, weights, bias, activation: str) -> np.ndarray:
    """out[i] = act(sum_j W[i][j] * x[j] + b[i]) for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise LayoutError(
            f"input of length {x.shape[-1] if x.ndim else 0} does not match "
            f"weight matrix inner dimension {weights.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise LayoutError("bias length does not match weight matrix rows")
    z = x @ weights.T + bias
    out = np.maximum(z, 0.0) if activation == "relu" else z
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite dense layer output")
    return out


def _batched(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise LayoutError(f"expected a vector or a batch matrix, got ndim={x.ndim}")


def _tape_forward(net: Network, params: ParamVector, x: np.ndarray):
    """Run the trunk and heads, keeping pre-activations for the backward pass."""
    t = params.tensors()
    acts = [x]
    pre = []
    h = x
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in net.layers:
            z = h @ t[f"{layer.name}.W"].T + t[f"{layer.name}.b"]
            if not np.all(np.isfinite(z)):
                raise NumericalError(f"non-finite output in layer {layer.name!r}")
            pre.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
            acts.append(h)
        head_pre = []
        outs = []
        for head in net.heads:
            z = h @ t[f"{head.name}.W"].T + t[f"{head.name}.b"]
            if not np.all(np.isfinite(z)):
                raise NumericalError(f"non-finite output in head {head.name!r}")
            head_pre.append(z)
            outs.append(np.maximum(z, 0.0) if head.activation == "relu" else z)
    y = np.concatenate(outs, axis=1) if outs else h
    return acts, pre, head_pre, y


def forward(net: Network, params: ParamVector, x) -> np.ndarray:
    """Raw network outputs; accepts a single vector or a batch matrix."""
    xb, single = _batched(x)
    *_, y = _tape_forward(net, params, xb)
    return y[0] if single else y


def predict_gaussian(net: Network, params: ParamVector, x):
    """(mu, sigma) with sigma mapped through softplus + SIGMA_FLOOR."""
    y = forward(net, params, x)
    mu = y[..., 0]
    sigma = softplus(y[..., 1]) + SIGMA_FLOOR
    return mu, sigma


def gaussian_nll(mu, sigma, target):
    """Negative log density of `target` under Normal(mu, sigma), in nats."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive")
    out = _HALF_LOG_2PI + np.log(sigma) + (target - mu) ** 2 / (2.0 * sigma**2)
    return float(out) if out.ndim == 0 else out


def gaussian_nll_grad(mu, sigma, target):
    """Analytic (d/dmu, d/dsigma) of gaussian_nll."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive")
    d_mu = (mu - target) / sigma**2
    d_sigma = 1.0 / sigma - (target - mu) ** 2 / sigma**3
    if d_mu.ndim == 0:
        return float(d_mu), float(d_sigma)
    return d_mu, d_sigma


def _loss_and_output_grad(net: Network, y: np.ndarray, target: np.ndarray):
    """Mean loss over the batch and its gradient w.r.t. the raw outputs."""
    n = y.shape[0]
    if net.loss == "gaussian":
        mu, sraw = y[:, 0], y[:, 1]
        sigma = softplus(sraw) + SIGMA_FLOOR
        resid = mu - target
        loss = float(np.mean(_HALF_LOG_2PI + np.log(sigma) + resid**2 / (2.0 * sigma**2)))
        d_mu = resid / sigma**2 / n
        d_sigma = (1.0 / sigma - resid**2 / sigma**3) / n
        d_sraw = d_sigma * expit(sraw)
        dy = np.stack([d_mu, d_sraw], axis=1)
    else:
        out = y[:, 0]
        resid = out - target
        loss = float(np.mean(resid**2))
        dy = (2.0 * resid / n)[:, None]
    return loss, dy


def network_loss(net: Network, params: ParamVector, x, target) -> float:
    """Mean training loss of the network on a batch (or single example)."""
    xb, _ = _batched(x)
    t = np.atleast_1d(np.asarray(target, dtype=np.float64))
    *_, y = _tape_forward(net, params, xb)
    loss, _ = _loss_and_output_grad(net, y, t)
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss


def backward(net: Network, params: ParamVector, x, target, *, want_input_grad=False):
    """Reverse-mode gradient of the mean loss w.r.t. every parameter.

    Returns a GradientVector; with want_input_grad=True also returns the
    gradient w.r.t. the input batch (used to chain aggregator folds).
    """
    xb, _ = _batched(x)
    t = np.atleast_1d(np.asarray(target, dtype=np.float64))
    tens = params.tensors()
    acts, pre, head_pre, y = _tape_forward(net, params, xb)
    _, dy = _loss_and_output_grad(net, y, t)

    layout = params.layout
    flat = np.zeros(layout.size)
    h_last = acts[-1]
    dh = np.zeros_like(h_last)
    col = 0
    for i, head in enumerate(net.heads):
        dz = dy[:, col : col + head.out_dim]
        col += head.out_dim
        if head.activation == "relu":
            dz = dz * (head_pre[i] > 0.0)
        flat[layout.slices[f"{head.name}.W"]] = (dz.T @ h_last).ravel()
        flat[layout.slices[f"{head.name}.b"]] = dz.sum(axis=0)
        dh += dz @ tens[f"{head.name}.W"]
    if not net.heads:
        dh = dy

    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = dh * (pre[i] > 0.0) if layer.activation == "relu" else dh
        flat[layout.slices[f"{layer.name}.W"]] = (dz.T @ acts[i]).ravel()
        flat[layout.slices[f"{layer.name}.b"]] = dz.sum(axis=0)
        dh = dz @ tens[f"{layer.name}.W"]

    grad = GradientVector(flat, layout)
    if want_input_grad:
        return grad, dh
    return grad


def sgd_step(params: ParamVector, grads: GradientVector, lr: float) -> ParamVector:
    """params - lr * grads, element-wise. lr may be 0 (identity)."""
    _check_same_layout(params, grads)
    if lr < 0.0:
        raise ValueError("learning rate must be nonnegative")
    return ParamVector(params.values - lr * grads.values, params.layout)


@dataclass(frozen=True)
class OptimizerState:
    """SGD or Adam state; Adam carries moment vectors matching the layout."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0.0:
            raise ValueError("learning rate must be nonnegative")
        if self.step < 0:
            raise ValueError("step counter must be nonnegative")


def make_sgd(lr: float) -> OptimizerState:
    return OptimizerState("sgd", lr)


def make_adam(lr: float, layout: Layout, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    return OptimizerState(
        "adam", lr, beta1, beta2, eps, 0, np.zeros(layout.size), np.zeros(layout.size)
    )


def adam_step(state: OptimizerState, params: ParamVector, grads: GradientVector):
    """One bias-corrected Adam update; returns (new params, new state)."""
    if state.kind != "adam":
        raise ValueError("adam_step requires an adam OptimizerState")
    _check_same_layout(params, grads)
    if state.m.shape != params.values.shape:
        raise LayoutError("optimizer moments do not match the parameter layout")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads.values
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads.values**2
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, step=t, m=m, v=v)
    return ParamVector(new_values, params.layout), new_state


def optimizer_step(state: OptimizerState, params: ParamVector, grads: GradientVector):
    """Apply one update with either kind; returns (new params, new state)."""
    if state.kind == "sgd":
        return sgd_step(params, grads, state.lr), state
    return adam_step(state, params, grads)


def grad_check(net: Network, params: ParamVector, x, target, h: float = 1e-6) -> float:
    """Max relative error of backward() vs central finite differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-8 <= h <= 1e-4):
        raise ValueError("h must lie in [1e-8, 1e-4]")
    if params.layout.size == 0:
        return 0.0
    analytic = backward(net, params, x, target).values
    worst = 0.0
    base = params.values.copy()
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        up = network_loss(net, ParamVector(bumped, params.layout), x, target)
        bumped[i] = base[i] - h
        down = network_loss(net, ParamVector(bumped, params.layout), x, target)
        numeric = (up - down) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
