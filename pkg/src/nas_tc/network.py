"""NAS-TC layers and the full classifier network over backbone features.

A layer splits its input into channel groups, runs one cell per group,
concatenates, shuffles channels across groups and halves T with a stride-2
temporal max pool.  Cells take two inputs: the layer input and the input of
the layer before it (the first layer feeds the backbone feature to both);
the older input is max-pooled once so both agree on T.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import cell as cell_mod
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError, FormatError

WEIGHTS_MAGIC = b"NTCW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Dimensions and topology of the network over backbone features."""

    channels: int
    timesteps: int
    height: int = 7
    width: int = 7
    classes: int = 157
    layers: int = 3
    groups: int = 8
    hidden: int = 512
    task: str = "multi-label"
    dropout: float = 0.5
    scale_nodes: int = 4   # S: intermediate nodes per cell, fixed by the template
    scale_reduce: int = 3  # M: channel reduction at the cell inputs

    def validate(self) -> "NetworkConfig":
        if self.layers < 1:
            raise ConfigurationError("layers must be >= 1")
        if self.groups < 1:
            raise ConfigurationError("groups must be >= 1")
        if self.channels % self.groups != 0:
            raise ConfigurationError(
                f"channels {self.channels} not divisible by groups {self.groups}")
        if self.timesteps % (2 ** self.layers) != 0:
            raise ConfigurationError(
                f"timesteps {self.timesteps} not divisible by 2^{self.layers}")
        if self.scale_nodes != cell_mod.NUM_NODES:
            raise ConfigurationError(
                f"scale_nodes must equal the cell's {cell_mod.NUM_NODES} "
                "intermediate nodes")
        if self.channels // self.groups < self.scale_reduce:
            raise ConfigurationError(
                f"group width {self.channels // self.groups} smaller than "
                f"reduction factor {self.scale_reduce}")
        if self.task not in ("multi-label", "single-label"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout {self.dropout} outside [0, 1)")
        if min(self.channels, self.timesteps, self.height, self.width,
               self.classes, self.hidden) < 1:
            raise ConfigurationError("all dimensions must be positive")
        return self


def layer_out_channels(c_in: int, groups: int, m: int) -> int:
    """N * S * floor((C/N) / M): concat of per-group cell outputs."""
    return groups * cell_mod.NUM_NODES * ((c_in // groups) // m)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave channels across groups: c = i*(C/g)+j moves to j*g+i."""
    c = x.shape[1]
    if c % groups != 0:
        raise ConfigurationError(
            f"channels {c} not divisible by shuffle groups {groups}")
    per = c // groups
    perm = (np.arange(c).reshape(groups, per).T).ravel()
    return ad.permute_channels(x, perm)


class NasTcLayer:
    """Channel groups -> per-group cell -> shuffle -> stride-2 temporal max pool."""

    def __init__(self, c_prev2: int, c_prev1: int, cfg: NetworkConfig, *,
                 genotype: cell_mod.Genotype | None = None,
                 arch: cell_mod.CellArch | None = None,
                 affine: bool = True, rng: np.random.Generator,
                 name: str = "layer"):
        if (genotype is None) == (arch is None):
            raise ConfigurationError(
                "layer needs exactly one cell source: genotype or arch")
        n = cfg.groups
        if c_prev1 % n != 0 or c_prev2 % n != 0:
            raise ConfigurationError(
                f"layer inputs ({c_prev2}, {c_prev1}) not divisible by groups {n}")
        self.groups = n
        self.g_prev2 = c_prev2 // n
        self.g_prev1 = c_prev1 // n
        self.cells: list[cell_mod._CellBase] = []
        for g in range(n):
            if genotype is not None:
                c = cell_mod.DiscreteCell(
                    self.g_prev2, self.g_prev1, genotype, m=cfg.scale_reduce,
                    affine=affine, rng=rng, name=f"{name}.group{g}")
            else:
                c = cell_mod.RelaxedCell(
                    self.g_prev2, self.g_prev1, arch, m=cfg.scale_reduce,
                    affine=affine, rng=rng, name=f"{name}.group{g}")
            self.cells.append(c)
        self.out_channels = n * self.cells[0].out_channels

    def parameters(self) -> Iterator[Parameter]:
        for c in self.cells:
            yield from c.parameters()

    def bn_states(self) -> Iterator[ad.BatchNormState]:
        for c in self.cells:
            yield from c.bn_states()

    def __call__(self, x_prev2: Tensor, x_prev1: Tensor, training: bool) -> Tensor:
        # both inputs must already agree on T (the network pools the older one)
        if x_prev2.shape[2] != x_prev1.shape[2]:
            raise ConfigurationError(
                f"layer inputs disagree on T: {x_prev2.shape[2]} vs "
                f"{x_prev1.shape[2]}")
        outs = []
        for g, c in enumerate(self.cells):
            a = ad.slice_channels(x_prev2, g * self.g_prev2, (g + 1) * self.g_prev2)
            b = ad.slice_channels(x_prev1, g * self.g_prev1, (g + 1) * self.g_prev1)
            outs.append(c(a, b, training))
        merged = ad.concat_channels(outs)
        shuffled = channel_shuffle(merged, self.groups)
        return ad.pool_t(shuffled, "max", k=2, stride=2)


def layer_forward(x: Tensor, cfg: NetworkConfig, *,
                  genotype: cell_mod.Genotype | None = None,
                  arch: cell_mod.CellArch | None = None,
                  rng: np.random.Generator | None = None,
                  x_prev: Tensor | None = None,
                  training: bool = True) -> Tensor:
    """One standalone NAS-TC layer; both cell inputs default to ``x``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if genotype is None and arch is None:
        genotype = cell_mod.DEFAULT_GENOTYPE
    prev2 = x_prev if x_prev is not None else x
    layer = NasTcLayer(prev2.shape[1], x.shape[1], cfg, genotype=genotype,
                       arch=arch, rng=rng)
    return layer(prev2, x, training)


class Classifier:
    """Global average pool -> dense hidden -> ReLU -> dropout -> dense K."""

    def __init__(self, c_in: int, hidden: int, classes: int, dropout: float,
                 rng: np.random.Generator, name: str = "classifier"):
        self.dropout_p = dropout
        from .ops import kaiming_uniform
        self.w1 = Parameter(kaiming_uniform(rng, (c_in, hidden), fan_in=c_in),
                            f"{name}.fc1.weight")
        self.b1 = Parameter(rng.uniform(-1, 1, hidden) / np.sqrt(c_in),
                            f"{name}.fc1.bias")
        self.w2 = Parameter(kaiming_uniform(rng, (hidden, classes), fan_in=hidden),
                            f"{name}.fc2.weight")
        self.b2 = Parameter(rng.uniform(-1, 1, classes) / np.sqrt(hidden),
                            f"{name}.fc2.bias")

    def parameters(self) -> Iterator[Parameter]:
        yield self.w1
        yield self.b1
        yield self.w2
        yield self.b2

    def __call__(self, x: Tensor, training: bool,
                 rng: np.random.Generator) -> Tensor:
        h = ad.relu(ad.linear(ad.global_avg_pool(x), self.w1, self.b1))
        h = ad.dropout(h, self.dropout_p, rng, training)
        return ad.linear(h, self.w2, self.b2)


class Network:
    """Stacked NAS-TC layers plus the classification head."""

    def __init__(self, cfg: NetworkConfig, *,
                 genotype: cell_mod.Genotype | None = None,
                 arch: cell_mod.CellArch | None = None,
                 affine: bool = True, dropout: float | None = None,
                 seed: int = 0):
        self.cfg = cfg.validate()
        if (genotype is None) == (arch is None):
            raise ConfigurationError(
                "network needs exactly one cell source: genotype or arch")
        self.genotype = genotype
        self.arch = arch
        init_rng, self._dropout_rng = [
            np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
        self.layers: list[NasTcLayer] = []
        c_prev2, c_prev1 = cfg.channels, cfg.channels
        for k in range(cfg.layers):
            layer = NasTcLayer(c_prev2, c_prev1, cfg, genotype=genotype,
                               arch=arch, affine=affine, rng=init_rng,
                               name=f"layer{k}")
            self.layers.append(layer)
            c_prev2, c_prev1 = c_prev1, layer.out_channels
        self.classifier = Classifier(
            c_prev1, cfg.hidden, cfg.classes,
            cfg.dropout if dropout is None else dropout, init_rng)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend(self.classifier.parameters())
        return params

    def bn_states(self) -> list[ad.BatchNormState]:
        states: list[ad.BatchNormState] = []
        for layer in self.layers:
            states.extend(layer.bn_states())
        return states

    def forward(self, features: Tensor, training: bool = False) -> Tensor:
        cfg = self.cfg
        got = features.shape[1:]
        want = (cfg.channels, cfg.timesteps, cfg.height, cfg.width)
        if got != want:
            raise ConfigurationError(
                f"features shaped {got}, config expects {want}")
        prev2, prev1 = features, features
        for k, layer in enumerate(self.layers):
            a = prev2 if k == 0 else ad.pool_t(prev2, "max", k=2, stride=2)
            out = layer(a, prev1, training)
            prev2, prev1 = prev1, out
        return self.classifier(prev1, training, self._dropout_rng)

    def scores(self, logits: Tensor) -> np.ndarray:
        """Evaluation scores: per-class sigmoid for multi-label, softmax else."""
        if self.cfg.task == "multi-label":
            return ad._sigmoid(logits.data)
        return ad._softmax(logits.data, axis=1)

    def count_parameters(self) -> dict:
        """Exact trainable-scalar counts: per TC layer, classifier, total."""
        per_layer = [sum(p.size for p in layer.parameters())
                     for layer in self.layers]
        head = sum(p.size for p in self.classifier.parameters())
        return {"layers": per_layer, "tc_total": sum(per_layer),
                "classifier": head, "total": sum(per_layer) + head}


# ---------------------------------------------------------------------------
# NTCW weight files
# ---------------------------------------------------------------------------

def _named_tensors(network: Network) -> list[tuple[str, np.ndarray]]:
    """Trainable parameters plus BatchNorm running stats (needed for eval)."""
    records = [(p.name, p.data) for p in network.parameters()]
    for st in network.bn_states():
        records.append((f"{st.name}.running_mean", st.running_mean))
        records.append((f"{st.name}.running_var", st.running_var))
    return records


def save_weights(path: str, network: Network) -> None:
    """Flat binary: magic, version, then (name, shape, f32 values) records."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", WEIGHTS_VERSION))
        for name_str, data in _named_tensors(network):
            name = name_str.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f4").tobytes())


def read_weights(path: str) -> dict[str, np.ndarray]:
    """Parse an NTCW file into name -> float32 array (insertion ordered)."""
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(
                f"truncated weights file: needed {n} bytes for {what}, "
                f"have {len(blob) - off}", offset=off)
        piece = blob[off: off + n]
        off += n
        return piece

    if take(4, "magic") != WEIGHTS_MAGIC:
        raise FormatError("bad magic, not an NTCW weights file", offset=0)
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported NTCW version {version}", offset=4)
    out: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "shape rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(4 * count, f"values of {name}"), dtype="<f4")
        out[name] = values.reshape(shape)
    return out


def load_weights(path: str, network: Network) -> None:
    """Install weights by name; missing or unexpected names are errors."""
    stored = read_weights(path)
    slots: dict[str, tuple] = {p.name: (p, "data") for p in network.parameters()}
    for st in network.bn_states():
        slots[f"{st.name}.running_mean"] = (st, "running_mean")
        slots[f"{st.name}.running_var"] = (st, "running_var")
    missing = sorted(set(slots) - set(stored))
    extra = sorted(set(stored) - set(slots))
    if missing or extra:
        raise FormatError(
            f"weights do not match network: missing {missing[:3]}, "
            f"unexpected {extra[:3]}")
    for name, values in stored.items():
        obj, attr = slots[name]
        current = getattr(obj, attr)
        if tuple(values.shape) != current.shape:
            raise FormatError(
                f"parameter {name} shaped {values.shape}, "
                f"network expects {current.shape}")
        setattr(obj, attr, values.astype(ad.DTYPE))
