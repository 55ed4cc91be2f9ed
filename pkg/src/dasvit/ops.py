"""Candidate operations of the search space plus patch embedding and head.

All candidate ops are shape-preserving maps (B, N, D) -> (B, N, D):

* Zero       -- all-zero output, no parameters
* Identity   -- passes the input through, no parameters
* MSA        -- pre-norm multi-head self-attention (Q/K/V unbiased, output
                projection biased), configurable head count
* MLP        -- pre-norm two-layer feed-forward with GELU, configurable
                hidden ratio

Ops are residual-free; the additive aggregation of the surrounding cell DAG
supplies the residual role.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

OP_KINDS = ("zero", "identity", "msa", "mlp")
INIT_STD = 0.02


@dataclass(frozen=True)
class OpSpec:
    """One candidate operation: its kind plus the kind-specific knob."""

    kind: str
    heads: int | None = None
    ratio: float | None = None

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ConfigError(f"OpSpec: unknown kind {self.kind!r}")
        if self.kind == "msa":
            if not isinstance(self.heads, int) or self.heads < 1:
                raise ConfigError("OpSpec: msa requires a positive integer head count")
            if self.ratio is not None:
                raise ConfigError("OpSpec: msa takes no ratio")
        elif self.kind == "mlp":
            if self.ratio is None or self.ratio <= 0:
                raise ConfigError("OpSpec: mlp requires ratio > 0")
            if self.heads is not None:
                raise ConfigError("OpSpec: mlp takes no heads")
        elif self.heads is not None or self.ratio is not None:
            raise ConfigError(f"OpSpec: {self.kind} takes no arguments")

    @property
    def type_tag(self) -> str:
        return self.kind

    @property
    def name(self) -> str:
        if self.kind == "msa":
            return f"msa_h{self.heads}"
        if self.kind == "mlp":
            return f"mlp_r{self.ratio:g}"
        return self.kind

    def to_json(self) -> dict:
        if self.kind == "msa":
            return {"kind": "msa", "heads": self.heads}
        if self.kind == "mlp":
            return {"kind": "mlp", "ratio": self.ratio}
        return {"kind": self.kind}

    @staticmethod
    def from_json(doc, path: str = "op") -> "OpSpec":
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected an object")
        known = {"kind", "heads", "ratio"}
        for key in doc:
            if key not in known:
                raise ConfigError(f"{path}.{key}: unknown key")
        kind = doc.get("kind")
        if kind not in OP_KINDS:
            raise ConfigError(f"{path}.kind: expected one of {OP_KINDS}, got {kind!r}")
        try:
            heads = doc.get("heads")
            ratio = doc.get("ratio")
            return OpSpec(kind, heads=heads,
                          ratio=float(ratio) if ratio is not None else None)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from None


#: The full eight-operation registry used when the embedding width permits it.
DEFAULT_CANDIDATES: tuple[OpSpec, ...] = (
    OpSpec("zero"),
    OpSpec("identity"),
    OpSpec("msa", heads=8),
    OpSpec("msa", heads=12),
    OpSpec("msa", heads=16),
    OpSpec("mlp", ratio=0.5),
    OpSpec("mlp", ratio=3.0),
    OpSpec("mlp", ratio=4.0),
)


def mlp_hidden_dim(ratio: float, dim: int) -> int:
    """Round-half-up of ratio*dim, floored at 1 so tiny widths stay valid."""
    return max(1, int(math.floor(ratio * dim + 0.5)))


@dataclass(frozen=True)
class ModelDims:
    """Geometry shared by the supernet and every derived model."""

    dim: int
    patch: int
    image: int
    classes: int
    channels: int = 3

    def __post_init__(self):
        if min(self.dim, self.patch, self.image, self.classes, self.channels) < 1:
            raise ConfigError(f"ModelDims: all dimensions must be positive, got {self}")
        if self.image % self.patch != 0:
            raise ConfigError(
                f"ModelDims: image size {self.image} not divisible by patch {self.patch}")

    @property
    def n_patches(self) -> int:
        return (self.image // self.patch) ** 2


def _normed(x: Tensor, gamma: Tensor | None, beta: Tensor | None) -> Tensor:
    if gamma is None:
        return x
    return ad.layer_norm(x) * gamma + beta


class ZeroOp:
    """Outputs a zero tensor; removes the connection it sits on."""

    def __init__(self, spec: OpSpec, dim: int, rng=None, pre_norm: bool = True):
        self.spec = spec

    def forward(self, x: Tensor) -> Tensor:
        return Tensor(np.zeros_like(x.data))

    def named_parameters(self) -> dict[str, Tensor]:
        return {}


class IdentityOp:
    """Passes the input through unchanged (skip connection)."""

    def __init__(self, spec: OpSpec, dim: int, rng=None, pre_norm: bool = True):
        self.spec = spec

    def forward(self, x: Tensor) -> Tensor:
        return x

    def named_parameters(self) -> dict[str, Tensor]:
        return {}


class MsaOp:
    """Pre-norm multi-head self-attention.

    Q/K/V are stored as one fused D x D matrix per role and sliced per head,
    which is equivalent to per-head D x d_k projections. Q/K/V carry no bias;
    the output projection does.
    """

    def __init__(self, spec: OpSpec, dim: int, rng: np.random.Generator,
                 pre_norm: bool = True):
        if dim % spec.heads != 0:
            raise ConfigError(
                f"MsaOp: embedding dim {dim} not divisible by {spec.heads} heads")
        self.spec = spec
        self.dim = dim
        self.heads = spec.heads
        dt = ad.default_dtype()

        def w(name):
            return ad.parameter((INIT_STD * rng.standard_normal((dim, dim))).astype(dt), name)

        self.wq = w("wq")
        self.wk = w("wk")
        self.wv = w("wv")
        self.wo = w("wo")
        self.bo = ad.parameter(np.zeros(dim, dtype=dt), "bo")
        if pre_norm:
            self.norm_g = ad.parameter(np.ones(dim, dtype=dt), "norm_g")
            self.norm_b = ad.parameter(np.zeros(dim, dtype=dt), "norm_b")
        else:
            self.norm_g = self.norm_b = None
        self.last_score_elements = 0

    def forward(self, x: Tensor) -> Tensor:
        bsz, n, dim = x.shape
        if dim != self.dim:
            raise ShapeError(f"MsaOp: expected last dim {self.dim}, got {x.shape}")
        head_dim = dim // self.heads
        z = _normed(x, self.norm_g, self.norm_b)
        q = z @ self.wq
        k = z @ self.wk
        v = z @ self.wv

        def split(t):
            return t.reshape((bsz, n, self.heads, head_dim)).transpose((0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
        self.last_score_elements = scores.size
        attn = ad.softmax(scores)
        mixed = (attn @ v).transpose((0, 2, 1, 3)).reshape((bsz, n, dim))
        return mixed @ self.wo + self.bo

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv,
               "wo": self.wo, "bo": self.bo}
        if self.norm_g is not None:
            out["norm_g"] = self.norm_g
            out["norm_b"] = self.norm_b
        return out


class MlpOp:
    """Pre-norm position-wise feed-forward block: linear, GELU, linear."""

    def __init__(self, spec: OpSpec, dim: int, rng: np.random.Generator,
                 pre_norm: bool = True):
        self.spec = spec
        self.dim = dim
        self.hidden = mlp_hidden_dim(spec.ratio, dim)
        dt = ad.default_dtype()
        self.w1 = ad.parameter(
            (INIT_STD * rng.standard_normal((dim, self.hidden))).astype(dt), "w1")
        self.b1 = ad.parameter(np.zeros(self.hidden, dtype=dt), "b1")
        self.w2 = ad.parameter(
            (INIT_STD * rng.standard_normal((self.hidden, dim))).astype(dt), "w2")
        self.b2 = ad.parameter(np.zeros(dim, dtype=dt), "b2")
        if pre_norm:
            self.norm_g = ad.parameter(np.ones(dim, dtype=dt), "norm_g")
            self.norm_b = ad.parameter(np.zeros(dim, dtype=dt), "norm_b")
        else:
            self.norm_g = self.norm_b = None

    def forward(self, x: Tensor) -> Tensor:
        z = _normed(x, self.norm_g, self.norm_b)
        return ad.gelu(z @ self.w1 + self.b1) @ self.w2 + self.b2

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        if self.norm_g is not None:
            out["norm_g"] = self.norm_g
            out["norm_b"] = self.norm_b
        return out


_OP_CLASSES = {"zero": ZeroOp, "identity": IdentityOp, "msa": MsaOp, "mlp": MlpOp}


def build_op(spec: OpSpec, dim: int, rng: np.random.Generator, pre_norm: bool = True):
    return _OP_CLASSES[spec.kind](spec, dim, rng, pre_norm)


class EmbedParams:
    """Patch embedding, position table, class token, and classification head.

    `embed` turns (B, H, W, C) images into (B, N+1, D) token sequences with
    the class token at row 0; `classify` reads logits from row 0 only.
    """

    def __init__(self, dims: ModelDims, rng: np.random.Generator,
                 final_norm: bool = True):
        self.dims = dims
        dt = ad.default_dtype()
        patch_in = dims.patch * dims.patch * dims.channels
        n = dims.n_patches
        self.proj_w = ad.parameter(
            (INIT_STD * rng.standard_normal((patch_in, dims.dim))).astype(dt), "proj_w")
        self.proj_b = ad.parameter(np.zeros(dims.dim, dtype=dt), "proj_b")
        self.pos = ad.parameter(
            (INIT_STD * rng.standard_normal((n + 1, dims.dim))).astype(dt), "pos")
        self.cls = ad.parameter(
            (INIT_STD * rng.standard_normal((1, 1, dims.dim))).astype(dt), "cls")
        self.head_w = ad.parameter(
            (INIT_STD * rng.standard_normal((dims.dim, dims.classes))).astype(dt), "head_w")
        self.head_b = ad.parameter(np.zeros(dims.classes, dtype=dt), "head_b")
        if final_norm:
            self.final_g = ad.parameter(np.ones(dims.dim, dtype=dt), "final_g")
            self.final_b = ad.parameter(np.zeros(dims.dim, dtype=dt), "final_b")
        else:
            self.final_g = self.final_b = None

    def embed(self, images) -> Tensor:
        x = ad.as_tensor(images)
        if x.ndim != 4:
            raise ShapeError(f"embed: expected (B, H, W, C) images, got {x.shape}")
        bsz, h, w, c = x.shape
        p = self.dims.patch
        if h % p or w % p:
            raise ShapeError(f"embed: image {h}x{w} not divisible by patch {p}")
        if c != self.dims.channels:
            raise ShapeError(f"embed: expected {self.dims.channels} channels, got {c}")
        gh, gw = h // p, w // p
        patches = (x.reshape((bsz, gh, p, gw, p, c))
                   .transpose((0, 1, 3, 2, 4, 5))
                   .reshape((bsz, gh * gw, p * p * c)))
        tokens = patches @ self.proj_w + self.proj_b
        cls = ad.broadcast_to(self.cls, (bsz, 1, self.dims.dim))
        return ad.concat([cls, tokens], axis=1) + self.pos

    def classify(self, z: Tensor) -> Tensor:
        cls_row = z[:, 0]
        cls_row = _normed(cls_row, self.final_g, self.final_b)
        return cls_row @ self.head_w + self.head_b

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"proj_w": self.proj_w, "proj_b": self.proj_b,
               "pos": self.pos, "cls": self.cls,
               "head_w": self.head_w, "head_b": self.head_b}
        if self.final_g is not None:
            out["final_g"] = self.final_g
            out["final_b"] = self.final_b
        return out
