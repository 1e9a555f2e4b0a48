"""Cell template: two inputs, four intermediate nodes, concatenated output.

The relaxed form carries a mixed op on each of the 14 directed edges and is
what the architecture search trains; the discrete form keeps exactly two
(predecessor, op) pairs per node and is what gets deployed.  Node ids:
0 and 1 are the two cell inputs, 2..5 the intermediate nodes B0..B3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import ops as op_mod
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError, FormatError

NUM_INPUTS = 2
NUM_NODES = 4
GENOTYPE_VERSION = "nas-tc/1"

# edges (i -> j) ordered by target node then source: 2+3+4+5 = 14 of them
EDGES: tuple[tuple[int, int], ...] = tuple(
    (i, j) for j in range(NUM_INPUTS, NUM_INPUTS + NUM_NODES) for i in range(j))
NUM_EDGES = len(EDGES)
EDGE_INDEX: dict[tuple[int, int], int] = {e: k for k, e in enumerate(EDGES)}


class CellArch:
    """The trainable architecture weights: one alpha vector per edge."""

    def __init__(self, alphas: list[Parameter]):
        if len(alphas) != NUM_EDGES:
            raise ConfigurationError(
                f"{len(alphas)} edge alphas, expected {NUM_EDGES}")
        for a in alphas:
            if a.shape != (op_mod.NUM_OPS,):
                raise ConfigurationError(
                    f"alpha shape {a.shape}, expected ({op_mod.NUM_OPS},)")
        self.alphas = alphas

    @classmethod
    def initialize(cls, rng: np.random.Generator, sigma: float = 1e-3) -> "CellArch":
        """Near-uniform start: small Gaussian noise around zero."""
        return cls([Parameter(sigma * rng.standard_normal(op_mod.NUM_OPS),
                              f"arch.edge{k}_{i}_{j}.alpha")
                    for k, (i, j) in enumerate(EDGES)])

    @classmethod
    def from_values(cls, values) -> "CellArch":
        arr = np.asarray(values, dtype=float)
        if arr.shape != (NUM_EDGES, op_mod.NUM_OPS):
            raise ConfigurationError(
                f"alpha table shape {arr.shape}, expected "
                f"({NUM_EDGES}, {op_mod.NUM_OPS})")
        return cls([Parameter(arr[k], f"arch.edge{k}_{i}_{j}.alpha")
                    for k, (i, j) in enumerate(EDGES)])

    def values(self) -> np.ndarray:
        return np.stack([a.data for a in self.alphas])

    def parameters(self) -> Iterator[Parameter]:
        yield from self.alphas

    def alpha_for(self, i: int, j: int) -> Parameter:
        return self.alphas[EDGE_INDEX[(i, j)]]


@dataclass(frozen=True)
class Genotype:
    """Discretized cell: per node, exactly two (predecessor, op name) pairs."""

    nodes: tuple[tuple[tuple[int, str], tuple[int, str]], ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.nodes) != NUM_NODES:
            raise ConfigurationError(
                f"genotype has {len(self.nodes)} nodes, expected {NUM_NODES}")
        for pos, pairs in enumerate(self.nodes):
            node_id = NUM_INPUTS + pos
            if len(pairs) != 2:
                raise ConfigurationError(
                    f"node {pos} keeps {len(pairs)} ops, expected 2")
            for pred, op in pairs:
                if not 0 <= pred < node_id:
                    raise ConfigurationError(
                        f"node {pos} references node {pred}, "
                        f"must be an earlier node (< {node_id})")
                if op not in op_mod.OP_INDEX or op == "zero":
                    raise ConfigurationError(
                        f"node {pos} uses invalid op {op!r}")

    def op_names(self) -> list[str]:
        return [op for pairs in self.nodes for _, op in pairs]


def derive_genotype(arch: CellArch | np.ndarray, meta: dict | None = None) -> Genotype:
    """Keep, per node, the two strongest incoming edges with their argmax ops.

    Edge strength is the softmax weight of the edge's best non-zero op;
    ties rank the lower predecessor index first.
    """
    values = arch.values() if isinstance(arch, CellArch) else np.asarray(arch, float)
    nodes = []
    for pos in range(NUM_NODES):
        j = NUM_INPUTS + pos
        candidates = []
        for i in range(j):
            op_idx, strength = op_mod.discretize_edge(values[EDGE_INDEX[(i, j)]])
            candidates.append((-strength, i, op_idx))
        candidates.sort()  # strength descending, then predecessor ascending
        pairs = tuple((i, op_mod.OP_NAMES[op_idx])
                      for _, i, op_idx in candidates[:2])
        nodes.append(pairs)
    return Genotype(tuple(nodes), dict(meta or {}))


def random_genotype(rng: np.random.Generator, meta: dict | None = None) -> Genotype:
    """Uniform random genotype: per node, two distinct predecessors with
    uniform non-zero ops.  Baseline oracle for search efficacy."""
    eligible = [name for name in op_mod.OP_NAMES if name != "zero"]
    nodes = []
    for pos in range(NUM_NODES):
        j = NUM_INPUTS + pos
        preds = rng.choice(j, size=2, replace=False)
        pairs = tuple((int(p), eligible[int(rng.integers(len(eligible)))])
                      for p in preds)
        nodes.append(pairs)
    return Genotype(tuple(nodes), dict(meta or {}))


# A hand-written default genotype used by tests, the parameter audit and as
# a CLI fallback.  It is NOT the published searched cell (that structure is
# not recoverable); it mirrors the published kernel/dilation inventory
# (separable k3/k5/k7 plus dilated k3/k5) in a chained layout.
DEFAULT_GENOTYPE = Genotype(
    nodes=(
        ((0, "sep_conv_k3"), (1, "sep_conv_k5")),
        ((2, "sep_conv_k7"), (0, "max_pool_2")),
        ((3, "dil_conv_k3"), (1, "sep_conv_k3")),
        ((4, "dil_conv_k5"), (2, "identity")),
    ),
    meta={"source": "hand-written default, not a searched cell"},
)


def serialize_genotype(genotype: Genotype) -> str:
    doc = {
        "version": GENOTYPE_VERSION,
        "nodes": [[{"pred": pred, "op": op} for pred, op in pairs]
                  for pairs in genotype.nodes],
        "meta": genotype.meta,
    }
    return json.dumps(doc, indent=2) + "\n"


def parse_genotype(text: str) -> Genotype:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"genotype is not valid JSON: {e.msg}",
                          location=f"line {e.lineno}") from e
    if not isinstance(doc, dict):
        raise FormatError("genotype document must be an object", location="/")
    version = doc.get("version")
    if version is None:
        raise FormatError("missing version field", location="/version")
    if version != GENOTYPE_VERSION:
        raise FormatError(
            f"unsupported version {version!r}, expected {GENOTYPE_VERSION!r}",
            location="/version")
    nodes_doc = doc.get("nodes")
    if not isinstance(nodes_doc, list) or len(nodes_doc) != NUM_NODES:
        raise FormatError(f"nodes must be a list of {NUM_NODES} entries",
                          location="/nodes")
    nodes = []
    for pos, pairs_doc in enumerate(nodes_doc):
        node_id = NUM_INPUTS + pos
        if not isinstance(pairs_doc, list) or len(pairs_doc) != 2:
            raise FormatError("each node keeps exactly 2 ops",
                              location=f"/nodes/{pos}")
        pairs = []
        for slot, entry in enumerate(pairs_doc):
            loc = f"/nodes/{pos}/{slot}"
            if not isinstance(entry, dict):
                raise FormatError("edge entry must be an object", location=loc)
            pred = entry.get("pred")
            op = entry.get("op")
            if not isinstance(pred, int) or isinstance(pred, bool):
                raise FormatError("pred must be an integer", location=f"{loc}/pred")
            if not 0 <= pred < node_id:
                raise FormatError(
                    f"pred {pred} must reference an earlier node (< {node_id})",
                    location=f"{loc}/pred")
            if op not in op_mod.OP_INDEX:
                raise FormatError(f"unknown op name {op!r}", location=f"{loc}/op")
            if op == "zero":
                raise FormatError("zero is not a valid genotype op",
                                  location=f"{loc}/op")
            pairs.append((pred, op))
        nodes.append(tuple(pairs))
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise FormatError("meta must be an object", location="/meta")
    return Genotype(tuple(nodes), meta)


class _InputProjection(op_mod.Block):
    """ReLU -> pointwise -> BatchNorm reducing a cell input to the inner width."""

    def __init__(self, c_in: int, c_out: int, affine: bool,
                 rng: np.random.Generator, name: str):
        self.pw = Parameter(op_mod.kaiming_uniform(rng, (c_out, c_in), fan_in=c_in),
                            f"{name}.pw.weight")
        self.bn_state = ad.BatchNormState(c_out, name=f"{name}.bn")
        if affine:
            self.gamma = Parameter(np.ones(c_out), f"{name}.bn.gamma")
            self.beta = Parameter(np.zeros(c_out), f"{name}.bn.beta")
        else:
            self.gamma = None
            self.beta = None

    def parameters(self) -> Iterator[Parameter]:
        yield self.pw
        if self.gamma is not None:
            yield self.gamma
            yield self.beta

    def bn_states(self) -> Iterator[ad.BatchNormState]:
        yield self.bn_state

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ad.pointwise_conv(ad.relu(x), self.pw)
        return ad.batch_norm(h, self.gamma, self.beta, self.bn_state, training)


def _inner_width(c_prev1: int, m: int) -> int:
    c = c_prev1 // m
    if c < 1:
        raise ConfigurationError(
            f"input width {c_prev1} too small for channel reduction by {m}")
    return c


class _CellBase:
    """Shared input projections and output bookkeeping for both cell forms."""

    def __init__(self, c_prev2: int, c_prev1: int, m: int, affine: bool,
                 rng: np.random.Generator, name: str):
        self.inner = _inner_width(c_prev1, m)
        self.out_channels = NUM_NODES * self.inner
        self.proj = [
            _InputProjection(c_prev2, self.inner, affine, rng, f"{name}.proj0"),
            _InputProjection(c_prev1, self.inner, affine, rng, f"{name}.proj1"),
        ]

    def _check_inputs(self, x_prev2: Tensor, x_prev1: Tensor) -> None:
        a, b = x_prev2.shape, x_prev1.shape
        if a[0] != b[0] or a[2:] != b[2:]:
            raise ConfigurationError(
                f"cell inputs disagree outside channels: {a} vs {b}")


class RelaxedCell(_CellBase):
    """Search-time cell: every edge carries a mixed op; alphas are shared."""

    def __init__(self, c_prev2: int, c_prev1: int, arch: CellArch, *,
                 m: int = 3, affine: bool = False,
                 rng: np.random.Generator, name: str = "cell"):
        super().__init__(c_prev2, c_prev1, m, affine, rng, name)
        self.arch = arch
        self.edge_ops: dict[tuple[int, int], op_mod.MixedOp] = {}
        for (i, j) in EDGES:
            self.edge_ops[(i, j)] = op_mod.MixedOp(
                self.inner, arch.alpha_for(i, j), affine=affine, rng=rng,
                name=f"{name}.edge{i}_{j}")

    def parameters(self) -> Iterator[Parameter]:
        """Cell weights only; architecture alphas are reported by CellArch."""
        for p in self.proj:
            yield from p.parameters()
        for (i, j) in EDGES:
            yield from self.edge_ops[(i, j)].parameters()

    def bn_states(self) -> Iterator[ad.BatchNormState]:
        for p in self.proj:
            yield from p.bn_states()
        for (i, j) in EDGES:
            yield from self.edge_ops[(i, j)].bn_states()

    def __call__(self, x_prev2: Tensor, x_prev1: Tensor, training: bool) -> Tensor:
        self._check_inputs(x_prev2, x_prev1)
        states = [self.proj[0](x_prev2, training), self.proj[1](x_prev1, training)]
        for j in range(NUM_INPUTS, NUM_INPUTS + NUM_NODES):
            total = self.edge_ops[(0, j)](states[0], training)
            for i in range(1, j):
                total = ad.add(total, self.edge_ops[(i, j)](states[i], training))
            states.append(total)
        return ad.concat_channels(states[NUM_INPUTS:])


class DiscreteCell(_CellBase):
    """Deployed cell: each node sums exactly its two chosen ops."""

    def __init__(self, c_prev2: int, c_prev1: int, genotype: Genotype, *,
                 m: int = 3, affine: bool = True,
                 rng: np.random.Generator, name: str = "cell"):
        super().__init__(c_prev2, c_prev1, m, affine, rng, name)
        self.genotype = genotype
        self.node_ops: list[list[tuple[int, op_mod.Block]]] = []
        for pos, pairs in enumerate(genotype.nodes):
            built = []
            for slot, (pred, op_name) in enumerate(pairs):
                spec = op_mod.OP_SPECS[op_mod.OP_INDEX[op_name]]
                built.append((pred, op_mod.build_op(
                    spec, self.inner, affine=affine, rng=rng,
                    name=f"{name}.node{pos}.in{slot}_{op_name}")))
            self.node_ops.append(built)

    def parameters(self) -> Iterator[Parameter]:
        for p in self.proj:
            yield from p.parameters()
        for built in self.node_ops:
            for _, op in built:
                yield from op.parameters()

    def bn_states(self) -> Iterator[ad.BatchNormState]:
        for p in self.proj:
            yield from p.bn_states()
        for built in self.node_ops:
            for _, op in built:
                yield from op.bn_states()

    def __call__(self, x_prev2: Tensor, x_prev1: Tensor, training: bool) -> Tensor:
        self._check_inputs(x_prev2, x_prev1)
        states = [self.proj[0](x_prev2, training), self.proj[1](x_prev1, training)]
        for built in self.node_ops:
            (p0, op0), (p1, op1) = built
            states.append(ad.add(op0(states[p0], training),
                                 op1(states[p1], training)))
        return ad.concat_channels(states[NUM_INPUTS:])
