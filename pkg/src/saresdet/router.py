"""Expert-selection router: descriptor -> logits -> tempered softmax -> top-k renormalization."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .spectral import band_masks, band_mean, is_power_of_two, log_magnitude
from .tensor import Module, Tensor, record


class RouterVariant(str, Enum):
    UNIFORM = "uniform"
    MLP = "mlp"
    FREQUENCY_ONLY = "frequency_only"
    SPATIAL_ONLY = "spatial_only"
    DUAL_BRANCH = "dual_branch"

    @classmethod
    def parse(cls, value: "str | RouterVariant") -> "RouterVariant":
        if isinstance(value, cls):
            return value
        aliases = {"dual": cls.DUAL_BRANCH, "freq": cls.FREQUENCY_ONLY, "spatial": cls.SPATIAL_ONLY}
        if value in aliases:
            return aliases[value]
        return cls(value)


@dataclass
class RouterDecision:
    """One routing decision per image.

    ``selected[i]`` lists the chosen experts in descending probability order and
    ``renorm[i]`` their renormalized weights. ``weights`` is the differentiable
    ``(N, E)`` version of ``renorm`` with zeros at unselected experts.
    """

    logits: np.ndarray
    probs: np.ndarray
    selected: np.ndarray
    renorm: np.ndarray
    weights: Tensor
    prob_tensor: Tensor | None = None

    @property
    def num_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.probs.shape, dtype=bool)
        np.put_along_axis(m, self.selected, True, axis=1)
        return m


def top_k(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lowest index."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def topk_renormalized(logits: Tensor, tau: float, selected: np.ndarray) -> Tensor:
    """Softmax of ``logits / tau`` restricted to ``selected``; zero elsewhere.

    Equal to ``pi_e / sum_{j in T} pi_j`` on the selected set.
    """
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, selected, True, axis=1)
    z = np.where(mask, logits.data / tau, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    w = (e / e.sum(axis=1, keepdims=True)).astype(logits.data.dtype)

    def backward(g):
        return ((w * (g - (g * w).sum(axis=1, keepdims=True))) / tau,)

    return record("topk_renormalized", w, (logits,), backward)


def gate(logits: Tensor, tau: float, k: int) -> RouterDecision:
    """Tempered softmax, top-k selection and renormalization over ``(N, E)`` logits."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    e = logits.shape[1]
    if not 1 <= k <= e:
        raise ValueError(f"k must satisfy 1 <= k <= E={e}, got {k}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    prob_tensor = T.softmax_with_temperature(logits, tau)
    probs = prob_tensor.data
    selected = top_k(probs, k)
    weights = topk_renormalized(logits, tau, selected)
    renorm = np.take_along_axis(weights.data, selected, axis=1)
    return RouterDecision(logits.data.copy(), probs, selected, renorm, weights, prob_tensor)


def uniform_decision(n: int, e: int) -> RouterDecision:
    probs = np.full((n, e), 1.0 / e)
    selected = np.tile(np.arange(e), (n, 1))
    weights = Tensor(np.full((n, e), 1.0 / e, dtype=T.get_dtype()))
    return RouterDecision(np.zeros((n, e)), probs, selected, probs.copy(), weights)


def descriptor_spatial(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """7x7 depthwise conv -> ReLU -> global average pool, as ``(N, C)``."""
    h = T.depthwise_conv2d(x, weight, bias, stride=1, padding=weight.shape[-1] // 2)
    return T.flatten(T.global_avg_pool(T.relu(h)))


def descriptor_frequency(x: Tensor) -> Tensor:
    """Mean log-magnitude in the low and high frequency halves, as ``(N, 2C)``."""
    h, w = x.shape[2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise T.ShapeError(f"frequency descriptor needs power-of-two H, W, got {(h, w)}")
    return band_mean(log_magnitude(x), band_masks(h, w, 2))


def descriptor_size(variant: RouterVariant, channels: int) -> int:
    return {
        RouterVariant.UNIFORM: 0,
        RouterVariant.MLP: channels,
        RouterVariant.FREQUENCY_ONLY: 2 * channels,
        RouterVariant.SPATIAL_ONLY: channels,
        RouterVariant.DUAL_BRANCH: 3 * channels,
    }[variant]


class Router(Module):
    def __init__(self, channels: int, num_experts: int, variant="dual_branch", k: int = 2,
                 tau: float = 1.0, rng: np.random.Generator | None = None, spatial_kernel: int = 7):
        rng = rng or np.random.default_rng(0)
        self.variant = RouterVariant.parse(variant)
        if not 1 <= k <= num_experts:
            raise ValueError(f"k must satisfy 1 <= k <= E={num_experts}, got {k}")
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.channels = channels
        self.num_experts = num_experts
        self.k = k
        self.tau = tau
        if self.variant in (RouterVariant.SPATIAL_ONLY, RouterVariant.DUAL_BRANCH):
            kk = spatial_kernel
            self.spatial_weight = T.init_uniform(rng, (channels, 1, kk, kk), kk * kk)
            self.spatial_bias = T.param(np.zeros(channels))
        d = descriptor_size(self.variant, channels)
        if d:
            self.w_r = T.init_uniform(rng, (num_experts, d), d)
            self.b_r = T.param(np.zeros(num_experts))

    def descriptor(self, x: Tensor) -> Tensor:
        v = self.variant
        if v is RouterVariant.MLP:
            return T.flatten(T.global_avg_pool(x))
        if v is RouterVariant.FREQUENCY_ONLY:
            return descriptor_frequency(x)
        if v is RouterVariant.SPATIAL_ONLY:
            return descriptor_spatial(x, self.spatial_weight, self.spatial_bias)
        if v is RouterVariant.DUAL_BRANCH:
            return T.concat([descriptor_frequency(x), descriptor_spatial(x, self.spatial_weight, self.spatial_bias)], axis=1)
        raise ValueError("uniform routing has no descriptor")

    def logits(self, x: Tensor) -> Tensor:
        return T.linear(self.descriptor(x), self.w_r, self.b_r)

    def __call__(self, x: Tensor) -> RouterDecision:
        if self.variant is RouterVariant.UNIFORM:
            return uniform_decision(x.shape[0], self.num_experts)
        return gate(self.logits(x), self.tau, self.k)


def route(x: Tensor, params: Router, variant=None, k: int | None = None, tau: float | None = None) -> RouterDecision:
    """Route ``x`` with ``params``; ``variant``/``k``/``tau`` override the router's own settings."""
    variant = RouterVariant.parse(variant) if variant is not None else params.variant
    k = params.k if k is None else k
    tau = params.tau if tau is None else tau
    if variant is RouterVariant.UNIFORM:
        return uniform_decision(x.shape[0], params.num_experts)
    if variant is not params.variant:
        raise ValueError(f"router parameters were built for {params.variant.value}, not {variant.value}")
    if not 1 <= k <= params.num_experts:
        raise ValueError(f"k must satisfy 1 <= k <= E={params.num_experts}, got {k}")
    return gate(params.logits(x), tau, k)


def importance_penalty(probs: Tensor) -> Tensor:
    """Squared coefficient of variation of per-expert importance (sum of probabilities over the batch)."""
    imp = probs.data.sum(axis=0)
    e = imp.size
    mu = imp.mean()
    var = ((imp - mu) ** 2).mean()
    out = np.asarray(var / (mu * mu + 1e-12)).reshape(1).astype(probs.data.dtype)

    def backward(g):
        dvar = 2.0 * (imp - mu) / e
        dmu = -2.0 * var / (mu ** 3 + 1e-12) / e
        dimp = dvar / (mu * mu + 1e-12) + dmu
        return (np.broadcast_to(g.reshape(()) * dimp, probs.shape),)

    return record("importance_penalty", out, (probs,), backward)


def routing_entropy(probs: np.ndarray) -> float:
    """Mean per-image entropy (nats) of the routing distribution."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-300, 1.0)
    return float(np.mean(-(p * np.log(p)).sum(axis=-1)))
