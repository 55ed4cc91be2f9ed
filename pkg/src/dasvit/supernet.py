"""The continuous-relaxation search network.

Each encoder layer is one cell over a fixed five-edge DAG:

    inputs:        in0 (two layers back), in1 (previous layer)
    intermediates: n0 = e0(in0) + e1(in1)
                   n1 = e2(in0) + e3(in1) + e4(n0)
    output:        n0 + n1

Every edge is a mixed edge: the softmax-weighted sum of all candidate
operations, each with its own parameter bank (no sharing between edges).
Architecture logits default to one table shared by all layers; a per-layer
table is available behind `shared_alpha=False`.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .ops import EmbedParams, ModelDims, OpSpec, build_op
from .selector import Selector

#: (source, target) pairs; nodes 0/1 are the cell inputs, 2/3 intermediates.
CELL_EDGES: tuple[tuple[int, int], ...] = ((0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
NUM_EDGES = len(CELL_EDGES)
INTERMEDIATE_NODES = (2, 3)


class AlphaTable:
    """Architecture logits indexed by (layer, edge, candidate).

    With `shared=True` a single layer row is stored and reused by every
    supernet layer. Softmax over the candidate axis yields mixture weights.
    """

    def __init__(self, candidates: list[OpSpec], layers: int,
                 rng: np.random.Generator, init_std: float = 1e-3,
                 shared: bool = True):
        if not candidates:
            raise ConfigError("AlphaTable: empty candidate list")
        rows = 1 if shared else layers
        self.candidates = list(candidates)
        self.shared = shared
        logits = init_std * rng.standard_normal((rows, NUM_EDGES, len(candidates)))
        self.logits = ad.parameter(logits.astype(ad.default_dtype()), "alpha.logits")

    @property
    def rows(self) -> int:
        return self.logits.shape[0]

    def row_for_layer(self, layer: int) -> int:
        return 0 if self.shared else layer

    def weights(self) -> np.ndarray:
        """Softmax weights as float64, shape (rows, edges, candidates)."""
        logits = self.logits.data.astype(np.float64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def edge_weights(self, layer: int, edge: int) -> Tensor:
        """Differentiable softmax weights for one (layer, edge) slot."""
        return ad.softmax(self.logits[self.row_for_layer(layer), edge])

    def candidate_index(self, spec: OpSpec) -> int:
        return self.candidates.index(spec)


def mixed_edge_forward(x: Tensor, ops: list, weights: Tensor) -> Tensor:
    """Softmax-weighted sum of every candidate's output; no sampling."""
    if not ops:
        raise ConfigError("mixed edge: empty candidate list")
    if weights.shape != (len(ops),):
        raise ShapeError(
            f"mixed edge: {len(ops)} candidates but weight shape {weights.shape}")
    total = None
    for k, op in enumerate(ops):
        term = weights[k] * op.forward(x)
        total = term if total is None else total + term
    return total


class MixedEdge:
    """One DAG edge holding a private parameter bank per candidate."""

    def __init__(self, candidates: list[OpSpec], dim: int,
                 rng: np.random.Generator, pre_norm: bool = True):
        self.ops = [build_op(spec, dim, rng, pre_norm) for spec in candidates]

    def forward(self, x: Tensor, weights: Tensor) -> Tensor:
        return mixed_edge_forward(x, self.ops, weights)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for op in self.ops:
            for pname, p in op.named_parameters().items():
                out[f"{op.spec.name}.{pname}"] = p
        return out


class Supernet:
    """Embedding, token selector, stacked mixed cells, and class head."""

    def __init__(self, dims: ModelDims, candidates: list[OpSpec], num_layers: int,
                 rng: np.random.Generator, lam: float = 0.5,
                 grad_mode: str = "score_scaling", shared_alpha: bool = True,
                 pre_norm: bool = True, final_norm: bool = True,
                 alpha_init_std: float = 1e-3):
        if num_layers < 1:
            raise ConfigError("Supernet: need at least one layer")
        self.dims = dims
        self.candidates = list(candidates)
        self.num_layers = num_layers
        self.pre_norm = pre_norm
        self.embed = EmbedParams(dims, rng, final_norm=final_norm)
        self.selector = Selector(dims.dim, lam, grad_mode, rng)
        self.alpha = AlphaTable(self.candidates, num_layers, rng,
                                init_std=alpha_init_std, shared=shared_alpha)
        self.cells: list[list[MixedEdge]] = [
            [MixedEdge(self.candidates, dims.dim, rng, pre_norm)
             for _ in range(NUM_EDGES)]
            for _ in range(num_layers)
        ]

    # -- forward ---------------------------------------------------------------

    def cell(self, layer: int, in0: Tensor, in1: Tensor) -> Tensor:
        if in0.shape != in1.shape:
            raise ShapeError(
                f"cell: input shapes {in0.shape} and {in1.shape} differ")
        edges = self.cells[layer]
        w = [self.alpha.edge_weights(layer, e) for e in range(NUM_EDGES)]
        n0 = edges[0].forward(in0, w[0]) + edges[1].forward(in1, w[1])
        n1 = (edges[2].forward(in0, w[2]) + edges[3].forward(in1, w[3])
              + edges[4].forward(n0, w[4]))
        return n0 + n1

    def forward(self, images, use_selection: bool = True) -> Tensor:
        z = self.embed.embed(images)
        if use_selection:
            z, _ = self.selector.select(z)
        prev2 = prev1 = z
        for layer in range(self.num_layers):
            out = self.cell(layer, prev2, prev1)
            prev2, prev1 = prev1, out
        return self.embed.classify(prev1)

    # -- parameter access --------------------------------------------------------

    def weight_parameters(self, include_selector: bool = True) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self.embed.named_parameters().items():
            out[f"embed.{name}"] = p
        if include_selector:
            for name, p in self.selector.named_parameters().items():
                out[f"selector.{name}"] = p
        for layer, edges in enumerate(self.cells):
            for e, edge in enumerate(edges):
                for name, p in edge.named_parameters().items():
                    out[f"cells.{layer}.e{e}.{name}"] = p
        return out

    def alpha_parameters(self) -> dict[str, Tensor]:
        return {"alpha.logits": self.alpha.logits}

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.weight_parameters().items()}
        out["alpha.logits"] = self.alpha.logits.data
        return out
