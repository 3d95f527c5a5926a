"""MLPs, Gaussian policy heads and the two-headed distributional critic."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParamStore

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...] = (256, 256)
    output_dim: int = 1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"all MLP dimensions must be >= 1: {self}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]


def init_params(spec: MlpSpec, seed: int) -> ParamStore:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    sizes = spec.sizes
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.add(f"b{i}", np.zeros(fan_out))
    return store


def zero_params(spec: MlpSpec) -> ParamStore:
    store = init_params(spec, 0)
    for name in store:
        store[name] = np.zeros_like(store[name])
    return store


def mlp_forward(params: dict[str, Node], x: Node) -> Node:
    """ReLU hidden layers, linear output. ``params`` holds W0, b0, W1, b1, ..."""
    n_layers = len(params) // 2
    if not x.requires_grad and not any(p.requires_grad for p in params.values()):
        # nothing to differentiate: evaluate with plain numpy and return one constant node
        h = x.value
        for i in range(n_layers):
            h = h @ params[f"W{i}"].value + params[f"b{i}"].value
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return dc.Node(dc._check("mlp", h), op="const")
    return dc.mlp(x, [(params[f"W{i}"], params[f"b{i}"]) for i in range(n_layers)])


def _plain_forward(params, *inputs) -> np.ndarray | None:
    """Numpy evaluation on concat(inputs) when nothing needs a gradient, else None.

    Same checks and values as the graph path, without building nodes.
    """
    if not isinstance(params, ParamStore) or any(isinstance(x, Node) for x in inputs):
        return None
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    for a in arrays:
        if not np.isfinite(a).all():
            raise dc.NumericError("non-finite network input")
    try:
        h = arrays[0] if len(arrays) == 1 else np.concatenate(arrays, axis=-1)
    except ValueError as exc:
        raise dc.DimensionError(f"concat: {exc}") from None
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[f"W{i}"], params[f"b{i}"]
        if h.ndim not in (1, 2) or h.shape[-1] != w.shape[0]:
            raise dc.DimensionError(f"mlp layer {i}: shapes {h.shape}, {w.shape}, {b.shape} are incompatible")
        h = h @ w + b
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return dc._check("mlp", h)


def _as_nodes(params) -> dict[str, Node]:
    if isinstance(params, ParamStore):
        return params.nodes(trainable=False)
    return params


def _finite_input(x) -> Node:
    node = x if isinstance(x, Node) else dc.const(x)
    if not np.isfinite(node.value).all():
        raise dc.NumericError("non-finite network input")
    return node


@dataclass
class GaussianHead:
    mean: Node
    log_std: Node

    @property
    def std(self) -> Node:
        return dc.exp(self.log_std)

    def __len__(self) -> int:
        return self.mean.shape[-1]


def policy_forward(params, x, log_std_min: float = LOG_STD_MIN, log_std_max: float = LOG_STD_MAX) -> GaussianHead:
    """Diagonal Gaussian over actions; the output layer is split into (mean, log_std)."""
    plain = _plain_forward(params, x)
    if plain is not None:
        k = plain.shape[-1] // 2
        return GaussianHead(dc.const(plain[..., :k]), dc.const(np.clip(plain[..., k:], log_std_min, log_std_max)))
    out = mlp_forward(_as_nodes(params), _finite_input(x))
    k = out.shape[-1] // 2
    mean = dc.take_cols(out, 0, k)
    log_std = dc.clip(dc.take_cols(out, k, 2 * k), log_std_min, log_std_max)
    return GaussianHead(mean, log_std)


def sample_reparameterized(head: GaussianHead, noise) -> Node:
    """mean + noise * std; ``noise`` is a constant so no gradient reaches it."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != len(head):
        raise dc.DimensionError(f"noise length {noise.shape[-1]} != head length {len(head)}")
    return dc.add(head.mean, dc.mul(dc.const(noise), head.std))


@dataclass
class DistributionalCriticOutput:
    q_mean: Node
    sigma: Node
    raw_sigma: Node = field(repr=False, default=None)


def critic_forward(params, x, u, sigma_min: float = 1.0) -> DistributionalCriticOutput:
    """Two heads: column 0 is the Q mean, column 1 the raw sigma floored at ``sigma_min``."""
    plain = _plain_forward(params, x, u)
    if plain is not None:
        q, raw = (plain[:, 0], plain[:, 1]) if plain.ndim == 2 else (plain[0:1], plain[1:2])
        return DistributionalCriticOutput(dc.const(q), dc.const(np.clip(raw, sigma_min, np.inf)), dc.const(raw))
    xu = dc.concat([_finite_input(x), _finite_input(u)], axis=-1)
    out = mlp_forward(_as_nodes(params), xu)
    q_mean = dc.take_cols(out, 0, 1)
    raw = dc.take_cols(out, 1, 2)
    # hard floor: zero gradient at or below sigma_min
    sigma = dc.clip(raw, sigma_min, np.inf)
    if q_mean.value.ndim == 2:
        q_mean = dc.sum(q_mean, axis=-1)
        sigma = dc.sum(sigma, axis=-1)
    return DistributionalCriticOutput(q_mean, sigma, raw)


def cost_critic_forward(params, x, u) -> Node:
    plain = _plain_forward(params, x, u)
    if plain is not None:
        return dc.const(plain[:, 0] if plain.ndim == 2 else plain)
    xu = dc.concat([_finite_input(x), _finite_input(u)], axis=-1)
    out = mlp_forward(_as_nodes(params), xu)
    return dc.sum(out, axis=-1) if out.value.ndim == 2 else out
