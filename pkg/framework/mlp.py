"""Dense ReLU networks with hand-derived reverse passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from scipy.special import expit
from scipy.stats import truncnorm

from framework.errors import ContractError, ShapeError
from framework.params import ParamVector
from models.config_models import MlpConfig

INIT_CLAMP_STDS = 2.0


@dataclass
class ForwardCache:
    config: MlpConfig
    params: ParamVector
    params_version: int
    layer_inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    dropout_masks: List[Optional[np.ndarray]] = field(default_factory=list)
    output: Optional[np.ndarray] = None


def check_layout(config: MlpConfig, params: ParamVector) -> None:
    dims = config.layer_dims
    if len(dims) != len(params.layers):
        raise ShapeError(f"config has {len(dims)} layers, parameters have {len(params.layers)}")
    for i, ((n_in, n_out), (w, _)) in enumerate(zip(dims, params.layers)):
        if w.shape != (n_in, n_out):
            raise ShapeError(f"expected weight {(n_in, n_out)}, got {w.shape}", i)


def mlp_forward(
    config: MlpConfig,
    params: ParamVector,
    x: np.ndarray,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    train_mode: bool = False,
) -> Tuple[np.ndarray, ForwardCache]:
    if not 0.0 <= dropout_rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match input_dim {config.input_dim}", 0)
    check_layout(config, params)
    use_dropout = train_mode and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ContractError("dropout in train mode needs a generator")

    cache = ForwardCache(config=config, params=params, params_version=params.version)
    last = len(params.layers) - 1
    h = x
    for i, (w, b) in enumerate(params.layers):
        cache.layer_inputs.append(h)
        a = h @ w + b
        cache.pre_activations.append(a)
        if i < last:
            h = np.maximum(a, 0.0)
            if use_dropout:
                mask = (rng.random(h.shape) >= dropout_rate) / (1.0 - dropout_rate)
                h = h * mask
                cache.dropout_masks.append(mask)
            else:
                cache.dropout_masks.append(None)
        elif config.output_activation == "sigmoid":
            h = expit(a)
        else:
            h = a
    cache.output = h
    return h, cache


def mlp_backward(
    cache: Optional[ForwardCache], output_gradient: np.ndarray
) -> Tuple[ParamVector, np.ndarray]:
    """Gradients of a scalar loss given dL/d(output) for the forward pass in `cache`."""
    if cache is None or cache.output is None:
        raise ContractError("backward pass needs the cache of a completed forward pass")
    if cache.params.version != cache.params_version:
        raise ContractError("forward cache is stale: parameters were updated after the forward pass")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(f"output gradient {g.shape} does not match output {cache.output.shape}")

    if cache.config.output_activation == "sigmoid":
        y = cache.output
        g = g * y * (1.0 - y)

    params = cache.params
    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        grads[i] = (cache.layer_inputs[i].T @ g, g.sum(axis=0))
        g = g @ w.T
        if i > 0:
            mask = cache.dropout_masks[i - 1]
            if mask is not None:
                g = g * mask
            g = g * (cache.pre_activations[i - 1] > 0.0)
    return ParamVector(grads), g


def init_params(
    config: MlpConfig,
    scheme: Literal["zero", "clamped_normal"],
    rng: Optional[np.random.Generator] = None,
) -> ParamVector:
    """Zero or clamped-normal weights (N(0, 1/n_in) truncated at two std); biases are zero."""
    if scheme == "zero":
        return ParamVector.zeros(config.layer_dims)
    if scheme != "clamped_normal":
        raise ContractError(f"unknown init scheme {scheme!r}")
    if rng is None:
        raise ContractError("clamped_normal init needs a generator")
    layers = []
    for n_in, n_out in config.layer_dims:
        std = 1.0 / np.sqrt(n_in)
        w = truncnorm.rvs(
            -INIT_CLAMP_STDS, INIT_CLAMP_STDS, loc=0.0, scale=std, size=(n_in, n_out), random_state=rng
        )
        layers.append((np.asarray(w, dtype=np.float64), np.zeros(n_out)))
    return ParamVector(layers)
