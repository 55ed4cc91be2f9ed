"""Attention-based partial token selection.

During the search phase only the top-floor(lambda*N) patch tokens (ranked by
averaged scaled dot-product scores) are kept, shrinking every downstream
attention matrix by roughly lambda^2. The class token is exempt and always
survives at row 0.

Two gradient modes exist for the selector projections:

* ``score_scaling`` (default): each kept patch token is multiplied by the
  logistic of its score, so the projections receive gradients.
* ``gather_only``: tokens are copied unscaled; the projections get none.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

GRAD_MODES = ("score_scaling", "gather_only")


class Selector:
    """Scores tokens with a single-head Q/K product and keeps the best k."""

    def __init__(self, dim: int, lam: float, grad_mode: str,
                 rng: np.random.Generator):
        if not 0 < lam <= 1:
            raise ConfigError(f"selector: lambda must lie in (0, 1], got {lam}")
        if grad_mode not in GRAD_MODES:
            raise ConfigError(f"selector: grad_mode must be one of {GRAD_MODES}")
        self.dim = dim
        self.lam = float(lam)
        self.grad_mode = grad_mode
        dt = ad.default_dtype()
        self.wq = ad.parameter((0.02 * rng.standard_normal((dim, dim))).astype(dt), "wq")
        self.wk = ad.parameter((0.02 * rng.standard_normal((dim, dim))).astype(dt), "wk")

    def scores(self, x: Tensor) -> Tensor:
        """Per-token mean scaled dot-product score, shape (B, N)."""
        q = x @ self.wq
        k = x @ self.wk
        full = q @ k.transpose((0, 2, 1))
        return full.mean(axis=2) * (1.0 / math.sqrt(self.dim))

    def select(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        """Keep the class token plus the k best-scoring patch tokens.

        `x` is (B, N+1, C) with the class token at row 0. Returns the reduced
        (B, k+1, C) sequence (kept patches in descending-score order, ties to
        the lower index) and the selected patch indices, shape (B, k).
        """
        n = x.shape[1] - 1
        k = int(math.floor(self.lam * n))
        if k < 1:
            raise ConfigError(
                f"selector: lambda={self.lam} with {n} patch tokens keeps none; "
                "increase lambda or the token count")
        patches = x[:, 1:]
        s = self.scores(patches)
        order = np.argsort(-s.data, axis=1, kind="stable")[:, :k]
        kept = ad.gather_rows(patches, order)
        if self.grad_mode == "score_scaling":
            gains = ad.sigmoid(ad.gather_rows(s, order))
            kept = kept * gains.reshape((x.shape[0], k, 1))
        return ad.concat([x[:, 0:1], kept], axis=1), order

    def named_parameters(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk}
