"""Discrete architectures: schema, JSON (de)serialization, the derived
encoder model, and analytic parameter/FLOP/activation counters.

A genotype fixes, per intermediate node of the repeated cell, exactly two
(source, operation) pairs. Node numbering matches the supernet DAG: 0 and 1
are the cell inputs (two layers back / previous layer), 2 is the first
intermediate node. The cell output is the sum of both intermediates, and
layer 1 receives the initial embedding on both inputs.

FLOP counting convention: one fused multiply-accumulate counts as one FLOP
(matching how the comparison models' figures are commonly reported), the
quadratic attention score/apply products are included, and layer norm, GELU
and softmax are charged 5 ops per element.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import GenotypeError, ShapeError
from .ops import EmbedParams, ModelDims, OpSpec, build_op, mlp_hidden_dim

SCHEMA_VERSION = 1
FLOPS_PER_MAC = 1
OPS_PER_ACT_ELEMENT = 5

NodePairs = tuple[tuple[int, OpSpec], ...]


@dataclass(frozen=True)
class Genotype:
    """A discretized architecture plus the dimensions it was searched at."""

    dims: ModelDims
    depth: int
    nodes: tuple[NodePairs, NodePairs]

    def __post_init__(self):
        if self.depth < 1:
            raise GenotypeError("genotype: depth must be >= 1")
        if len(self.nodes) != 2:
            raise GenotypeError("genotype: exactly two intermediate nodes required")
        for j, pairs in enumerate(self.nodes):
            node_id = 2 + j
            if len(pairs) != 2:
                raise GenotypeError(
                    f"genotype: node {node_id} must keep exactly 2 edges, got {len(pairs)}")
            for src, spec in pairs:
                if not 0 <= src < node_id:
                    raise GenotypeError(
                        f"genotype: node {node_id} has invalid source {src}")
                if spec.kind == "zero":
                    raise GenotypeError("genotype: zero op cannot be retained")

    def ops(self) -> list[OpSpec]:
        return [spec for pairs in self.nodes for _, spec in pairs]


def _canonical_pairs(pairs) -> NodePairs:
    return tuple(sorted(pairs, key=lambda p: (p[0], p[1].name)))


def make_genotype(dims: ModelDims, depth: int, node0, node1) -> Genotype:
    """Build a genotype with node pairs in canonical (source, op-name) order."""
    return Genotype(dims, depth, (_canonical_pairs(node0), _canonical_pairs(node1)))


def searched_encoder_genotype(dims: ModelDims, depth: int, heads: int = 12,
                              ratio: float = 0.5) -> Genotype:
    """The discovered encoder: n0 sums an MLP of each input; n1 sums
    attention over n0 with another MLP of the older input."""
    mlp = OpSpec("mlp", ratio=ratio)
    msa = OpSpec("msa", heads=heads)
    return make_genotype(dims, depth,
                         node0=[(0, mlp), (1, mlp)],
                         node1=[(2, msa), (0, mlp)])


def classic_encoder_genotype(dims: ModelDims, depth: int, heads: int = 12,
                             ratio: float = 4.0) -> Genotype:
    """The conventional attention-then-MLP encoder block expressed as a
    genotype (residuals become Identity edges); used for cost baselines."""
    msa = OpSpec("msa", heads=heads)
    mlp = OpSpec("mlp", ratio=ratio)
    ident = OpSpec("identity")
    return make_genotype(dims, depth,
                         node0=[(1, msa), (1, ident)],
                         node1=[(2, mlp), (2, ident)])


# -- JSON schema --------------------------------------------------------------


def genotype_to_json(g: Genotype) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "dims": {
            "embed": g.dims.dim,
            "patch": g.dims.patch,
            "image": g.dims.image,
            "depth": g.depth,
            "classes": g.dims.classes,
            "channels": g.dims.channels,
        },
        "nodes": [[{"src": src, "op": spec.to_json()} for src, spec in pairs]
                  for pairs in g.nodes],
    }


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise GenotypeError(f"{path}.{key}: missing required key")
    return doc[key]


def _check_keys(doc: dict, allowed: set[str], path: str):
    if not isinstance(doc, dict):
        raise GenotypeError(f"{path}: expected an object")
    for key in doc:
        if key not in allowed:
            raise GenotypeError(f"{path}.{key}: unknown key")


def genotype_from_json(doc: dict, path: str = "genotype") -> Genotype:
    _check_keys(doc, {"version", "dims", "nodes"}, path)
    version = _require(doc, "version", path)
    if version != SCHEMA_VERSION:
        raise GenotypeError(f"{path}.version: unsupported version {version!r}")
    dims_doc = _require(doc, "dims", path)
    _check_keys(dims_doc, {"embed", "patch", "image", "depth", "classes", "channels"},
                f"{path}.dims")
    for key in ("embed", "patch", "image", "depth", "classes"):
        value = _require(dims_doc, key, f"{path}.dims")
        if not isinstance(value, int) or value < 1:
            raise GenotypeError(f"{path}.dims.{key}: expected a positive integer")
    dims = ModelDims(dim=dims_doc["embed"], patch=dims_doc["patch"],
                     image=dims_doc["image"], classes=dims_doc["classes"],
                     channels=dims_doc.get("channels", 3))
    nodes_doc = _require(doc, "nodes", path)
    if not isinstance(nodes_doc, list) or len(nodes_doc) != 2:
        raise GenotypeError(f"{path}.nodes: expected a list of 2 node entries")
    nodes = []
    for j, pairs_doc in enumerate(nodes_doc):
        node_path = f"{path}.nodes[{j}]"
        if not isinstance(pairs_doc, list) or len(pairs_doc) != 2:
            raise GenotypeError(f"{node_path}: expected exactly 2 (src, op) pairs")
        pairs = []
        for i, pair_doc in enumerate(pairs_doc):
            pair_path = f"{node_path}[{i}]"
            _check_keys(pair_doc, {"src", "op"}, pair_path)
            src = _require(pair_doc, "src", pair_path)
            if not isinstance(src, int):
                raise GenotypeError(f"{pair_path}.src: expected an integer")
            try:
                spec = OpSpec.from_json(_require(pair_doc, "op", pair_path),
                                        f"{pair_path}.op")
            except Exception as exc:
                raise GenotypeError(str(exc)) from None
            pairs.append((src, spec))
        nodes.append(_canonical_pairs(pairs))
    try:
        return Genotype(dims, dims_doc["depth"], (nodes[0], nodes[1]))
    except GenotypeError:
        raise
    except Exception as exc:  # dims validation errors surface with path
        raise GenotypeError(f"{path}: {exc}") from None


def save_genotype(g: Genotype, path) -> None:
    Path(path).write_text(json.dumps(genotype_to_json(g), indent=2, sort_keys=True) + "\n")


def load_genotype(path) -> Genotype:
    p = Path(path)
    if not p.exists():
        raise GenotypeError(f"genotype: file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"genotype: invalid JSON in {p}: {exc}") from None
    return genotype_from_json(doc)


# -- the derived model ----------------------------------------------------------


class DerivedModel:
    """Discrete encoder built from a genotype; trains without token selection."""

    def __init__(self, genotype: Genotype, rng: np.random.Generator,
                 pre_norm: bool = True, final_norm: bool = True):
        self.genotype = genotype
        self.dims = genotype.dims
        self.pre_norm = pre_norm
        self.embed = EmbedParams(self.dims, rng, final_norm=final_norm)
        self.layers: list[list[list]] = []
        for _ in range(genotype.depth):
            per_node = []
            for pairs in genotype.nodes:
                per_node.append([(src, build_op(spec, self.dims.dim, rng, pre_norm))
                                 for src, spec in pairs])
            self.layers.append(per_node)

    def cell(self, layer: int, in0: Tensor, in1: Tensor) -> Tensor:
        if in0.shape != in1.shape:
            raise ShapeError(f"cell: input shapes {in0.shape} and {in1.shape} differ")
        values = [in0, in1]
        for node_ops in self.layers[layer]:
            total = None
            for src, op in node_ops:
                term = op.forward(values[src])
                total = term if total is None else total + term
            values.append(total)
        return values[2] + values[3]

    def forward(self, images) -> Tensor:
        z = self.embed.embed(images)
        prev2 = prev1 = z
        for layer in range(self.genotype.depth):
            out = self.cell(layer, prev2, prev1)
            prev2, prev1 = prev1, out
        return self.embed.classify(prev1)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"embed.{n}": p for n, p in self.embed.named_parameters().items()}
        for layer, per_node in enumerate(self.layers):
            for j, node_ops in enumerate(per_node):
                for i, (src, op) in enumerate(node_ops):
                    for pname, p in op.named_parameters().items():
                        out[f"layers.{layer}.n{j}.{i}.{op.spec.name}.{pname}"] = p
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters().items()}

    @classmethod
    def from_supernet(cls, sup, genotype: Genotype) -> "DerivedModel":
        """Instantiate the genotype reusing the supernet's trained banks.

        Embedding/head parameters are copied verbatim; each kept (edge, op)
        pair copies the matching candidate bank of the matching supernet edge.
        """
        from .supernet import CELL_EDGES  # local import avoids a cycle

        if sup.num_layers != genotype.depth:
            raise GenotypeError(
                f"from_supernet: supernet depth {sup.num_layers} != genotype depth "
                f"{genotype.depth}")
        model = cls(genotype, np.random.default_rng(0),
                    pre_norm=sup.pre_norm,
                    final_norm=sup.embed.final_g is not None)
        for name, p in model.embed.named_parameters().items():
            p.data = sup.embed.named_parameters()[name].data.copy()
        edge_of = {pair: idx for idx, pair in enumerate(CELL_EDGES)}
        for layer, per_node in enumerate(model.layers):
            for j, node_ops in enumerate(per_node):
                target = 2 + j
                for src, op in node_ops:
                    edge = edge_of[(src, target)]
                    k = sup.candidates.index(op.spec)
                    source_op = sup.cells[layer][edge].ops[k]
                    src_params = source_op.named_parameters()
                    for pname, p in op.named_parameters().items():
                        p.data = src_params[pname].data.copy()
        return model


def init_derived(genotype: Genotype, seed: int, pre_norm: bool = True,
                 final_norm: bool = True) -> DerivedModel:
    return DerivedModel(genotype, np.random.default_rng(seed),
                        pre_norm=pre_norm, final_norm=final_norm)


# -- analytic cost counters ---------------------------------------------------------


@dataclass
class CostReport:
    """Closed-form cost summary; counts are exact integers."""

    params: int
    flops: int
    peak_activation: int
    params_overhead: int
    flops_overhead: int
    per_layer_params: list[int] = field(default_factory=list)
    per_layer_flops: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "params": self.params,
            "flops": self.flops,
            "peak_activation": self.peak_activation,
            "params_overhead": self.params_overhead,
            "flops_overhead": self.flops_overhead,
            "per_layer_params": self.per_layer_params,
            "per_layer_flops": self.per_layer_flops,
        }

    def table(self) -> str:
        lines = [
            f"{'parameters':<18}{self.params:>16,}",
            f"{'flops/image':<18}{self.flops:>16,}",
            f"{'peak activation':<18}{self.peak_activation:>16,}",
            f"{'embed+head params':<18}{self.params_overhead:>16,}",
        ]
        for i, (p, f) in enumerate(zip(self.per_layer_params, self.per_layer_flops)):
            lines.append(f"layer {i:<12}{p:>16,}{f:>16,}")
        return "\n".join(lines)


def _op_param_count(spec: OpSpec, dim: int, pre_norm: bool) -> int:
    norm = 2 * dim if pre_norm else 0
    if spec.kind == "msa":
        return 4 * dim * dim + dim + norm
    if spec.kind == "mlp":
        hidden = mlp_hidden_dim(spec.ratio, dim)
        return 2 * dim * hidden + hidden + dim + norm
    return 0


def _op_flop_count(spec: OpSpec, dim: int, tokens: int, pre_norm: bool) -> int:
    """MACs (x1) plus activation elements (x5) for one op application."""
    norm_elems = tokens * dim if pre_norm else 0
    if spec.kind == "msa":
        macs = 4 * tokens * dim * dim + 2 * tokens * tokens * dim
        softmax_elems = spec.heads * tokens * tokens
        return macs * FLOPS_PER_MAC + OPS_PER_ACT_ELEMENT * (norm_elems + softmax_elems)
    if spec.kind == "mlp":
        hidden = mlp_hidden_dim(spec.ratio, dim)
        macs = 2 * tokens * dim * hidden
        return macs * FLOPS_PER_MAC + OPS_PER_ACT_ELEMENT * (norm_elems + tokens * hidden)
    return 0


def _op_peak_activation(spec: OpSpec, dim: int, tokens: int) -> int:
    if spec.kind == "msa":
        return max(spec.heads * tokens * tokens, tokens * dim)
    if spec.kind == "mlp":
        return tokens * max(dim, mlp_hidden_dim(spec.ratio, dim))
    return tokens * dim


def cost_report(g: Genotype, pre_norm: bool = True, final_norm: bool = True) -> CostReport:
    d = g.dims.dim
    n = g.dims.n_patches
    tokens = n + 1
    patch_in = g.dims.patch * g.dims.patch * g.dims.channels

    layer_params = sum(_op_param_count(spec, d, pre_norm) for spec in g.ops())
    params_overhead = (patch_in * d + d          # patch projection + bias
                       + tokens * d              # position table
                       + d                       # class token
                       + d * g.dims.classes + g.dims.classes)  # head + bias
    if final_norm:
        params_overhead += 2 * d

    layer_flops = sum(_op_flop_count(spec, d, tokens, pre_norm) for spec in g.ops())
    flops_overhead = n * patch_in * d * FLOPS_PER_MAC + d * g.dims.classes * FLOPS_PER_MAC
    if final_norm:
        flops_overhead += OPS_PER_ACT_ELEMENT * d  # class row only

    peak = max([tokens * d, n * patch_in]
               + [_op_peak_activation(spec, d, tokens) for spec in g.ops()])

    return CostReport(
        params=layer_params * g.depth + params_overhead,
        flops=layer_flops * g.depth + flops_overhead,
        peak_activation=peak,
        params_overhead=params_overhead,
        flops_overhead=flops_overhead,
        per_layer_params=[layer_params] * g.depth,
        per_layer_flops=[layer_flops] * g.depth,
    )


def count_params(g: Genotype, pre_norm: bool = True, final_norm: bool = True) -> int:
    return cost_report(g, pre_norm, final_norm).params


def count_flops(g: Genotype, pre_norm: bool = True, final_norm: bool = True) -> int:
    return cost_report(g, pre_norm, final_norm).flops
