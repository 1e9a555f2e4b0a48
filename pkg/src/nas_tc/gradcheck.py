"""Finite-difference validation of analytic gradients.

Central differences at h=1e-5 in 64-bit; the loss is a fixed random
projection of the op output so every output element influences the scalar.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import ops as op_mod
from .autodiff import Parameter, Tensor

DEFAULT_H = 1e-5


def numerical_gradient(loss_fn: Callable[[], float], arr: np.ndarray,
                       h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of loss_fn w.r.t. arr, edited in place."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = loss_fn()
        flat[i] = orig - h
        f_minus = loss_fn()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the larger gradient magnitude."""
    diff = np.abs(analytic - numeric).max() if analytic.size else 0.0
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), 1e-6)
    return float(diff / scale)


def check_block(block: op_mod.Block, x0: np.ndarray,
                rng: np.random.Generator, h: float = DEFAULT_H) -> float:
    """Gradient error of a block w.r.t. its input and every parameter."""
    projection = rng.standard_normal(
        block(Tensor(x0), training=True).shape)

    leaves: list[np.ndarray] = [x0]
    params = list(block.parameters())
    leaves.extend(p.data for p in params)

    def loss_value() -> float:
        return ad.dot_const(block(Tensor(x0), training=True), projection).item()

    x = Tensor(x0, requires_grad=True)
    for p in params:
        p.zero_grad()
    loss = ad.dot_const(block(x, training=True), projection)
    loss.backward()
    analytic = [x.grad if x.grad is not None else np.zeros_like(x0)]
    analytic.extend(p.grad for p in params)

    worst = 0.0
    for arr, ana in zip(leaves, analytic):
        num = numerical_gradient(loss_value, arr, h)
        worst = max(worst, relative_error(ana, num))
    return worst


def check_mixed(channels: int, x0: np.ndarray, rng: np.random.Generator,
                h: float = DEFAULT_H, op_indices: list[int] | None = None) -> float:
    """Gradient error of the mixed edge op w.r.t. input, weights and alpha."""
    indices = op_indices if op_indices is not None else list(range(op_mod.NUM_OPS))
    alpha = Parameter(0.3 * rng.standard_normal(len(indices)), "alpha")
    blocks = [op_mod.build_op(op_mod.OP_SPECS[i], channels, affine=True,
                              rng=rng, name=f"mixed.op{i}") for i in indices]
    projection = rng.standard_normal(x0.shape)

    params = [alpha]
    for b in blocks:
        params.extend(b.parameters())

    def forward(x: Tensor) -> Tensor:
        return op_mod.mixed_forward(x, alpha, blocks, training=True)

    def loss_value() -> float:
        return ad.dot_const(forward(Tensor(x0)), projection).item()

    x = Tensor(x0, requires_grad=True)
    for p in params:
        p.zero_grad()
    ad.dot_const(forward(x), projection).backward()

    worst = relative_error(x.grad, numerical_gradient(loss_value, x0, h))
    for p in params:
        num = numerical_gradient(loss_value, p.data, h)
        worst = max(worst, relative_error(p.grad, num))
    return worst


def _random_input(rng: np.random.Generator, channels: int) -> np.ndarray:
    n = int(rng.integers(1, 3))
    t = int(rng.integers(4, 9))
    hh = int(rng.integers(1, 3))
    ww = int(rng.integers(1, 3))
    x = rng.standard_normal((n, channels, t, hh, ww))
    # keep values off the ReLU kink so finite differences stay two-sided
    return x + 0.05 * np.sign(x)


def run_suite(seed: int = 20240, cases: int = 20,
              h: float = DEFAULT_H) -> dict[str, float]:
    """Max relative gradient error per candidate op plus the mixed op."""
    results: dict[str, float] = {}
    for spec in op_mod.OP_SPECS:
        rng = np.random.default_rng([seed, op_mod.OP_INDEX[spec.name]])
        worst = 0.0
        for _ in range(cases):
            channels = int(rng.integers(2, 5))
            block = op_mod.build_op(spec, channels, affine=True, rng=rng,
                                    name=f"check.{spec.name}")
            worst = max(worst, check_block(block, _random_input(rng, channels), rng, h))
        results[spec.name] = worst
    rng = np.random.default_rng([seed, 999])
    worst = 0.0
    for _ in range(cases):
        channels = int(rng.integers(2, 4))
        worst = max(worst, check_mixed(channels, _random_input(rng, channels), rng, h))
    results["mixed"] = worst
    return results
