"""Heritable network description: node genes, lower-triangular adjacency, optimizer genes.

``adjacency[i][j]`` is true when node ``j`` feeds node ``i``; only ``j < i``
is legal, so every genome is acyclic by construction. Node 0 is the input;
the highest-indexed node is the output.

JSON layout (``schema_version`` 1)::

    {
      "schema_version": 1,
      "optimizer": {"kind": "Adam", "lr0": 0.01, "decay": 0.1},
      "nodes": [
        {"index": 0, "kind": "Input", "inputs": []},
        {"index": 1, "kind": "ConvBlock", "inputs": [0],
         "conv": {"channel_rule": "Double", "kernel": 3, "stride": 1,
                  "transposed": false, "separable": false, "weight_norm": false,
                  "bias": true, "activation": "ReLU", "norm": "BatchNorm"}},
        {"index": 2, "kind": "Add", "inputs": [0, 1], "resize_target": "Second"}
      ]
    }

The ``inputs`` lists mirror the "Input Node(s)" column of the evolved
architecture tables and carry the adjacency matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np

from .ops import ActivationKind, NormKind
from .optim import LR_RANGE, OptimizerKind, log_uniform

SCHEMA_VERSION = 1


class NodeKind(str, Enum):
    INPUT = "Input"
    CONV = "ConvBlock"
    MAXPOOL = "MaxPool2x2"
    UPSAMPLE = "UpsampleNN2x"
    CONCAT = "Concat"
    ADD = "Add"
    MUL = "Mul"

    @property
    def is_connective(self) -> bool:
        return self in (NodeKind.CONCAT, NodeKind.ADD, NodeKind.MUL)


PRIMITIVE_KINDS = tuple(k for k in NodeKind if k is not NodeKind.INPUT)
CONNECTIVE_KINDS = (NodeKind.CONCAT, NodeKind.ADD, NodeKind.MUL)


class ChannelRule(str, Enum):
    SAME = "Same"
    DOUBLE = "Double"
    HALF = "Half"
    QUADRUPLE = "Quadruple"
    QUARTER = "Quarter"
    THREE = "Three"
    THIRTY_TWO = "ThirtyTwo"

    def resolve(self, c_in: int) -> int:
        """Output channels for an input with ``c_in`` channels (divisions round up)."""
        if self is ChannelRule.SAME:
            return c_in
        if self is ChannelRule.DOUBLE:
            return 2 * c_in
        if self is ChannelRule.HALF:
            return max(1, -(-c_in // 2))
        if self is ChannelRule.QUADRUPLE:
            return 4 * c_in
        if self is ChannelRule.QUARTER:
            return max(1, -(-c_in // 4))
        if self is ChannelRule.THREE:
            return 3
        return 32


class ResizeTarget(str, Enum):
    FIRST = "First"
    SECOND = "Second"


KERNELS = (1, 3, 5)
STRIDES = (1, 2)
NORM_CHOICES = tuple(NormKind)
ACTIVATION_CHOICES = tuple(ActivationKind)


@dataclass(frozen=True)
class ConvGene:
    channel_rule: ChannelRule = ChannelRule.SAME
    kernel: int = 3
    stride: int = 1
    transposed: bool = False
    separable: bool = False
    weight_norm: bool = False
    bias: bool = True
    activation: ActivationKind = ActivationKind.NONE
    norm: NormKind = NormKind.NONE


@dataclass(frozen=True)
class NodeGene:
    kind: NodeKind
    conv: ConvGene | None = None
    resize_target: ResizeTarget | None = None

    @property
    def is_connective(self) -> bool:
        return NodeKind(self.kind).is_connective


INPUT_NODE = NodeGene(NodeKind.INPUT)


@dataclass(frozen=True)
class OptimizerGenes:
    kind: OptimizerKind = OptimizerKind.ADAM
    lr0: float = 1e-3
    decay: float = 0.0


Adjacency = tuple[tuple[bool, ...], ...]


@dataclass(frozen=True)
class Genome:
    nodes: tuple[NodeGene, ...]
    adjacency: Adjacency
    optimizer: OptimizerGenes = field(default_factory=OptimizerGenes)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def output(self) -> int:
        return len(self.nodes) - 1

    def predecessors(self, i: int) -> list[int]:
        return [j for j, on in enumerate(self.adjacency[i]) if on]

    def with_optimizer(self, opt: OptimizerGenes) -> Genome:
        return replace(self, optimizer=opt)

    @classmethod
    def from_edges(cls, nodes, inputs: list[list[int]], optimizer: OptimizerGenes | None = None) -> Genome:
        """Build from per-node predecessor lists (``inputs[i]`` feeds node ``i``)."""
        n = len(nodes)
        mat = [[False] * n for _ in range(n)]
        for i, preds in enumerate(inputs):
            for j in preds:
                mat[i][j] = True
        return cls(tuple(nodes), freeze_matrix(mat), optimizer or OptimizerGenes())


def freeze_matrix(mat) -> Adjacency:
    return tuple(tuple(bool(v) for v in row) for row in mat)


def required_arity(node: NodeGene, index: int) -> int:
    """Number of predecessors a node at ``index`` must have.

    A connective at index 1 can only draw from node 0, so it combines the
    input with itself through a single edge.
    """
    if node.kind is NodeKind.INPUT:
        return 0
    if node.is_connective:
        return 2 if index >= 2 else 1
    return 1


# ---------------------------------------------------------------------------
# random sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenomeConfig:
    min_nodes: int = 3
    max_nodes: int = 12
    lr_range: tuple[float, float] = LR_RANGE


def _choice(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def random_conv_gene(rng: np.random.Generator) -> ConvGene:
    return ConvGene(
        channel_rule=_choice(rng, tuple(ChannelRule)),
        kernel=_choice(rng, KERNELS),
        stride=_choice(rng, STRIDES),
        transposed=bool(rng.integers(2)),
        separable=bool(rng.integers(2)),
        weight_norm=bool(rng.integers(2)),
        bias=bool(rng.integers(2)),
        activation=_choice(rng, ACTIVATION_CHOICES),
        norm=_choice(rng, NORM_CHOICES),
    )


CONV_PROBABILITY = 0.5     # the other primitive kinds share the remainder equally


def random_node(rng: np.random.Generator, kind: NodeKind | None = None) -> NodeGene:
    if kind is None:
        others = tuple(k for k in PRIMITIVE_KINDS if k is not NodeKind.CONV)
        kind = NodeKind.CONV if rng.random() < CONV_PROBABILITY else _choice(rng, others)
    kind = NodeKind(kind)
    if kind is NodeKind.CONV:
        return NodeGene(kind, conv=random_conv_gene(rng))
    if kind.is_connective:
        return NodeGene(kind, resize_target=_choice(rng, tuple(ResizeTarget)))
    return NodeGene(kind)


def random_predecessors(rng: np.random.Generator, node: NodeGene, index: int) -> list[int]:
    k = required_arity(node, index)
    return sorted(int(j) for j in rng.choice(index, size=k, replace=False))


def random_optimizer(rng: np.random.Generator, config: GenomeConfig = GenomeConfig()) -> OptimizerGenes:
    return OptimizerGenes(
        kind=_choice(rng, tuple(OptimizerKind)),
        lr0=log_uniform(rng, *config.lr_range),
        decay=float(rng.uniform(0.0, 1.0)),
    )


def random_genome(config: GenomeConfig, rng: np.random.Generator) -> Genome:
    """Uniformly sampled genome, repaired and pruned."""
    from .variation import prune, repair

    n = int(rng.integers(config.min_nodes, config.max_nodes + 1))
    nodes = [INPUT_NODE]
    inputs: list[list[int]] = [[]]
    for i in range(1, n):
        node = random_node(rng)
        nodes.append(node)
        inputs.append(random_predecessors(rng, node, i))
    g = Genome.from_edges(nodes, inputs, random_optimizer(rng, config))
    return prune(repair(g))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate(g: Genome) -> list[str]:
    """All invariant violations of ``g``; an empty list means valid."""
    out: list[str] = []
    n = len(g.nodes)
    if n == 0:
        return ["input: genome has no nodes"]
    if len(g.adjacency) != n or any(len(row) != n for row in g.adjacency):
        return [f"shape: adjacency is not {n}x{n}"]

    for i in range(n):
        for j in range(i, n):
            if g.adjacency[i][j]:
                out.append(f"acyclicity: edge {j}->{i} is on or above the diagonal")

    for i, node in enumerate(g.nodes):
        if not isinstance(node, NodeGene):
            out.append(f"gene: node {i} is not a NodeGene")
            continue
        try:
            kind = NodeKind(node.kind)
        except ValueError:
            out.append(f"gene: node {i} has unknown kind {node.kind!r}")
            continue
        if (i == 0) != (kind is NodeKind.INPUT):
            out.append(f"input: node {i} kind {kind.value} (only node 0 may be, and must be, Input)")
        if i > 0:
            preds = [j for j in range(i) if g.adjacency[i][j]]
            need = required_arity(node, i)
            if len(preds) != need:
                out.append(f"arity: node {i} ({kind.value}) has {len(preds)} predecessors, needs {need}")
        if kind.is_connective:
            if node.resize_target not in tuple(ResizeTarget):
                out.append(f"resize_target: connective node {i} lacks a valid resize target")
        elif node.resize_target is not None:
            out.append(f"resize_target: non-connective node {i} carries a resize target")
        if kind is NodeKind.CONV:
            out.extend(_conv_violations(node.conv, i))
        elif node.conv is not None:
            out.append(f"gene: node {i} ({kind.value}) carries conv genes")

    out.extend(_optimizer_violations(g.optimizer))
    return out


def _conv_violations(c: ConvGene | None, i: int) -> list[str]:
    if not isinstance(c, ConvGene):
        return [f"gene: conv node {i} lacks conv genes"]
    bad = []
    if c.channel_rule not in tuple(ChannelRule):
        bad.append("channel_rule")
    if type(c.kernel) is not int or c.kernel not in KERNELS:
        bad.append("kernel")
    if type(c.stride) is not int or c.stride not in STRIDES:
        bad.append("stride")
    for name in ("transposed", "separable", "weight_norm", "bias"):
        if not isinstance(getattr(c, name), bool):
            bad.append(name)
    if c.activation not in ACTIVATION_CHOICES:
        bad.append("activation")
    if c.norm not in NORM_CHOICES:
        bad.append("norm")
    return [f"gene: conv node {i} has invalid {name}" for name in bad]


def _optimizer_violations(o: OptimizerGenes) -> list[str]:
    if not isinstance(o, OptimizerGenes):
        return ["optimizer: missing optimizer genes"]
    bad = []
    if o.kind not in tuple(OptimizerKind):
        bad.append(f"optimizer: unknown kind {o.kind!r}")
    lo, hi = LR_RANGE
    if not isinstance(o.lr0, (int, float)) or not lo <= o.lr0 <= hi:
        bad.append(f"optimizer: lr0 {o.lr0!r} outside [{lo}, {hi}]")
    if not isinstance(o.decay, (int, float)) or not 0.0 <= o.decay <= 1.0:
        bad.append(f"optimizer: decay {o.decay!r} outside [0, 1]")
    return bad


def is_valid(g: Genome) -> bool:
    return not validate(g)


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

class GenomeParseError(ValueError):
    """Malformed or invalid genome document; ``location`` says where."""

    def __init__(self, message: str, location: str = "$", violations: list[str] | None = None):
        super().__init__(f"{location}: {message}")
        self.location = location
        self.violations = violations or []


def to_dict(g: Genome) -> dict[str, Any]:
    nodes = []
    for i, node in enumerate(g.nodes):
        d: dict[str, Any] = {"index": i, "kind": NodeKind(node.kind).value,
                             "inputs": g.predecessors(i)}
        if node.conv is not None:
            c = node.conv
            d["conv"] = {
                "channel_rule": c.channel_rule.value, "kernel": c.kernel, "stride": c.stride,
                "transposed": c.transposed, "separable": c.separable,
                "weight_norm": c.weight_norm, "bias": c.bias,
                "activation": c.activation.value, "norm": c.norm.value,
            }
        if node.resize_target is not None:
            d["resize_target"] = node.resize_target.value
        nodes.append(d)
    o = g.optimizer
    return {
        "schema_version": SCHEMA_VERSION,
        "optimizer": {"kind": OptimizerKind(o.kind).value, "lr0": float(o.lr0), "decay": float(o.decay)},
        "nodes": nodes,
    }


def serialize(g: Genome) -> str:
    """Canonical JSON text; equal genomes give identical text."""
    return json.dumps(to_dict(g), sort_keys=True, indent=2) + "\n"


def _get(d: dict, key: str, loc: str, types):
    if not isinstance(d, dict):
        raise GenomeParseError("expected an object", loc)
    if key not in d:
        raise GenomeParseError(f"missing field {key!r}", loc)
    v = d[key]
    if not isinstance(v, types) or (isinstance(v, bool) and bool not in _as_tuple(types)):
        raise GenomeParseError(f"field has wrong type {type(v).__name__}", f"{loc}.{key}")
    return v


def _as_tuple(t):
    return t if isinstance(t, tuple) else (t,)


def _enum(cls, value, loc):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise GenomeParseError(f"{value!r} is not one of {choices}", loc) from None


def _finite(v: float, loc: str) -> float:
    v = float(v)
    if not math.isfinite(v):
        raise GenomeParseError("value is not finite", loc)
    return v


def from_dict(doc: Any) -> Genome:
    """Parse a genome document; raises :class:`GenomeParseError` on any defect."""
    if not isinstance(doc, dict):
        raise GenomeParseError("document must be a JSON object")
    _reject_extra(doc, {"schema_version", "optimizer", "nodes"}, "$")
    version = _get(doc, "schema_version", "$", int)
    if version != SCHEMA_VERSION:
        raise GenomeParseError(f"unsupported schema version {version}", "$.schema_version")
    od = _get(doc, "optimizer", "$", dict)
    _reject_extra(od, {"kind", "lr0", "decay"}, "$.optimizer")
    opt = OptimizerGenes(
        kind=_enum(OptimizerKind, _get(od, "kind", "$.optimizer", str), "$.optimizer.kind"),
        lr0=_finite(_get(od, "lr0", "$.optimizer", (int, float)), "$.optimizer.lr0"),
        decay=_finite(_get(od, "decay", "$.optimizer", (int, float)), "$.optimizer.decay"),
    )
    raw_nodes = _get(doc, "nodes", "$", list)
    if not raw_nodes:
        raise GenomeParseError("genome needs at least the input node", "$.nodes")
    nodes, inputs = [], []
    n = len(raw_nodes)
    for i, nd in enumerate(raw_nodes):
        loc = f"$.nodes[{i}]"
        idx = _get(nd, "index", loc, int)
        if idx != i:
            raise GenomeParseError(f"index {idx} out of sequence", f"{loc}.index")
        kind = _enum(NodeKind, _get(nd, "kind", loc, str), f"{loc}.kind")
        preds = _get(nd, "inputs", loc, list)
        for k, j in enumerate(preds):
            if not isinstance(j, int) or isinstance(j, bool) or not 0 <= j < n:
                raise GenomeParseError(f"input {j!r} is not a node index", f"{loc}.inputs[{k}]")
        if len(set(preds)) != len(preds):
            raise GenomeParseError("duplicate input", f"{loc}.inputs")
        conv = None
        if "conv" in nd:
            conv = _parse_conv(_get(nd, "conv", loc, dict), f"{loc}.conv")
        resize = None
        if "resize_target" in nd:
            resize = _enum(ResizeTarget, _get(nd, "resize_target", loc, str), f"{loc}.resize_target")
        _reject_extra(nd, {"index", "kind", "inputs", "conv", "resize_target"}, loc)
        nodes.append(NodeGene(kind, conv, resize))
        inputs.append(preds)
    g = Genome.from_edges(nodes, inputs, opt)
    problems = validate(g)
    if problems:
        raise GenomeParseError("; ".join(problems), "$", problems)
    return g


def _reject_extra(d: dict, allowed: set[str], loc: str) -> None:
    extra = set(d) - allowed
    if extra:
        raise GenomeParseError(f"unknown fields {sorted(extra)}", loc)


def _parse_conv(d: dict, loc: str) -> ConvGene:
    _reject_extra(d, {"channel_rule", "kernel", "stride", "transposed", "separable", "weight_norm",
                      "bias", "activation", "norm"}, loc)
    kernel = _get(d, "kernel", loc, int)
    stride = _get(d, "stride", loc, int)
    if kernel not in KERNELS:
        raise GenomeParseError(f"kernel {kernel} not in {KERNELS}", f"{loc}.kernel")
    if stride not in STRIDES:
        raise GenomeParseError(f"stride {stride} not in {STRIDES}", f"{loc}.stride")
    return ConvGene(
        channel_rule=_enum(ChannelRule, _get(d, "channel_rule", loc, str), f"{loc}.channel_rule"),
        kernel=kernel,
        stride=stride,
        transposed=_get(d, "transposed", loc, bool),
        separable=_get(d, "separable", loc, bool),
        weight_norm=_get(d, "weight_norm", loc, bool),
        bias=_get(d, "bias", loc, bool),
        activation=_enum(ActivationKind, _get(d, "activation", loc, str), f"{loc}.activation"),
        norm=_enum(NormKind, _get(d, "norm", loc, str), f"{loc}.norm"),
    )


def deserialize(text: str) -> Genome:
    if not text or not text.strip():
        raise GenomeParseError("empty document", "line 1 column 1")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise GenomeParseError(e.msg, f"line {e.lineno} column {e.colno}") from None
    return from_dict(doc)


def load(path) -> Genome:
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())


def save(g: Genome, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(g))


FIXTURES = ("superres", "denoise_gaussian", "compressive_sensing", "checkerboard")


def fixture_path(name: str):
    """Path of a bundled hand-encoded architecture (one of :data:`FIXTURES`)."""
    from importlib.resources import files

    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURES)}")
    return files("evonas") / "fixtures" / f"{name}.json"


def load_fixture(name: str) -> Genome:
    return deserialize(fixture_path(name).read_text(encoding="utf-8"))
