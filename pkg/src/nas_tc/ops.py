"""The nine candidate operations and the softmax-mixed edge operation.

Every candidate acts on the time axis only, stride 1, padded so T is
preserved.  Separable convs stack two ReLU -> depthwise -> pointwise -> BN
units; dilated convs use a single unit with dilation 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError


@dataclass(frozen=True)
class OpSpec:
    """One row of the search-space table."""
    name: str
    kernel: int | None          # temporal kernel length, None for non-convs
    dilation: int | None
    depthwise: bool             # conv groups == channels
    pad: tuple[int, int] | None  # per-side temporal padding


OP_SPECS: tuple[OpSpec, ...] = (
    OpSpec("identity", None, None, False, None),
    OpSpec("zero", None, None, False, None),
    OpSpec("avg_pool_2", 2, None, False, (1, 0)),
    OpSpec("max_pool_2", 2, None, False, (1, 0)),
    OpSpec("dil_conv_k3", 3, 2, True, (2, 2)),
    OpSpec("dil_conv_k5", 5, 2, True, (4, 4)),
    OpSpec("sep_conv_k3", 3, 1, True, (1, 1)),
    OpSpec("sep_conv_k5", 5, 1, True, (2, 2)),
    OpSpec("sep_conv_k7", 7, 1, True, (3, 3)),
)

OP_NAMES: tuple[str, ...] = tuple(s.name for s in OP_SPECS)
OP_INDEX: dict[str, int] = {s.name: i for i, s in enumerate(OP_SPECS)}
ZERO_INDEX = OP_INDEX["zero"]
NUM_OPS = len(OP_SPECS)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Block:
    """Base class for differentiable building blocks."""

    def parameters(self) -> Iterator[Parameter]:
        return iter(())

    def bn_states(self) -> Iterator[ad.BatchNormState]:
        return iter(())

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError


class Identity(Block):
    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return x


class Zero(Block):
    """All-zeros output; passes no gradient back to its input."""

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return Tensor(np.zeros_like(x.data))


class TemporalPool(Block):
    def __init__(self, kind: str):
        self.kind = kind

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.pool_t(x, self.kind, k=2, stride=1)


class ConvUnit(Block):
    """ReLU -> depthwise temporal conv -> pointwise 1x1 -> BatchNorm."""

    def __init__(self, channels: int, kernel: int, dilation: int,
                 pad: tuple[int, int], affine: bool,
                 rng: np.random.Generator, name: str):
        self.channels = channels
        self.kernel = kernel
        self.dilation = dilation
        self.pad = pad
        self.dw = Parameter(
            kaiming_uniform(rng, (channels, 1, kernel), fan_in=kernel),
            f"{name}.dw.weight")
        self.pw = Parameter(
            kaiming_uniform(rng, (channels, channels), fan_in=channels),
            f"{name}.pw.weight")
        self.bn_state = ad.BatchNormState(channels, name=f"{name}.bn")
        if affine:
            self.gamma = Parameter(np.ones(channels), f"{name}.bn.gamma")
            self.beta = Parameter(np.zeros(channels), f"{name}.bn.beta")
        else:
            self.gamma = None
            self.beta = None

    def parameters(self) -> Iterator[Parameter]:
        yield self.dw
        yield self.pw
        if self.gamma is not None:
            yield self.gamma
            yield self.beta

    def bn_states(self) -> Iterator[ad.BatchNormState]:
        yield self.bn_state

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ad.relu(x)
        h = ad.temporal_conv(h, self.dw, dilation=self.dilation,
                             groups=self.channels, pad=self.pad)
        h = ad.pointwise_conv(h, self.pw)
        return ad.batch_norm(h, self.gamma, self.beta, self.bn_state, training)


class SepConv(Block):
    """Two stacked depthwise-separable units, dilation 1."""

    def __init__(self, channels: int, kernel: int, pad: tuple[int, int],
                 affine: bool, rng: np.random.Generator, name: str):
        self.unit1 = ConvUnit(channels, kernel, 1, pad, affine, rng, f"{name}.unit1")
        self.unit2 = ConvUnit(channels, kernel, 1, pad, affine, rng, f"{name}.unit2")

    def parameters(self) -> Iterator[Parameter]:
        yield from self.unit1.parameters()
        yield from self.unit2.parameters()

    def bn_states(self) -> Iterator[ad.BatchNormState]:
        yield from self.unit1.bn_states()
        yield from self.unit2.bn_states()

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.unit2(self.unit1(x, training), training)


class DilConv(Block):
    """A single depthwise-separable unit with dilation 2."""

    def __init__(self, channels: int, kernel: int, pad: tuple[int, int],
                 affine: bool, rng: np.random.Generator, name: str):
        self.unit = ConvUnit(channels, kernel, 2, pad, affine, rng, f"{name}.unit")

    def parameters(self) -> Iterator[Parameter]:
        yield from self.unit.parameters()

    def bn_states(self) -> Iterator[ad.BatchNormState]:
        yield from self.unit.bn_states()

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.unit(x, training)


def build_op(spec: OpSpec, channels: int, *, affine: bool,
             rng: np.random.Generator, name: str) -> Block:
    """Instantiate one candidate operation for a given channel width."""
    if channels < 1:
        raise ConfigurationError(f"cannot build op for {channels} channels")
    if spec.name == "identity":
        return Identity()
    if spec.name == "zero":
        return Zero()
    if spec.name == "avg_pool_2":
        return TemporalPool("avg")
    if spec.name == "max_pool_2":
        return TemporalPool("max")
    if spec.name.startswith("sep_conv"):
        return SepConv(channels, spec.kernel, spec.pad, affine, rng, name)
    if spec.name.startswith("dil_conv"):
        return DilConv(channels, spec.kernel, spec.pad, affine, rng, name)
    raise ConfigurationError(f"unknown operation kind {spec.name!r}")


def mixed_forward(x: Tensor, alpha: Tensor, ops: list[Block],
                  training: bool) -> Tensor:
    """Softmax(alpha)-weighted sum of every candidate's output."""
    if len(ops) != alpha.size:
        raise ConfigurationError(
            f"{len(ops)} ops for alpha of length {alpha.size}")
    weights = ad.softmax_vec(alpha)
    outputs = [op(x, training) for op in ops]
    return ad.weighted_sum(outputs, weights)


class MixedOp(Block):
    """All nine candidates on one edge, blended by a shared alpha vector."""

    def __init__(self, channels: int, alpha: Parameter, *, affine: bool,
                 rng: np.random.Generator, name: str):
        if alpha.size != NUM_OPS:
            raise ConfigurationError(
                f"alpha of length {alpha.size}, expected {NUM_OPS}")
        self.alpha = alpha
        self.ops = [build_op(spec, channels, affine=affine, rng=rng,
                             name=f"{name}.op{i}_{spec.name}")
                    for i, spec in enumerate(OP_SPECS)]

    def parameters(self) -> Iterator[Parameter]:
        # alpha is owned by the cell architecture, not the op
        for op in self.ops:
            yield from op.parameters()

    def bn_states(self) -> Iterator[ad.BatchNormState]:
        for op in self.ops:
            yield from op.bn_states()

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return mixed_forward(x, self.alpha, self.ops, training)


def discretize_edge(alpha: np.ndarray) -> tuple[int, float]:
    """Strongest non-zero candidate on an edge and its softmax weight.

    Ties go to the lowest op index; the zero op never wins.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (NUM_OPS,):
        raise ConfigurationError(f"alpha shape {alpha.shape}, expected ({NUM_OPS},)")
    if not np.isfinite(alpha).all():
        raise ConfigurationError("non-finite alpha")
    probs = ad._softmax(alpha)
    masked = probs.copy()
    masked[ZERO_INDEX] = -1.0
    best = int(np.argmax(masked))  # argmax takes the first max: lowest index
    return best, float(probs[best])
