"""Cosine similarity matrix and the bidirectional in-batch hinge loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    reduction: str = "sum"  # or "mean"

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_matrix(X: Tensor, Y: Tensor) -> Tensor:
    """``S[i, j] = cos(X_i, Y_j)``; rows are normalized internally."""
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise DimensionError(f"cosine_matrix: shapes {X.shape} and {Y.shape} differ in width")
    return T.matmul(T.l2_normalize_rows(X), T.transpose(T.l2_normalize_rows(Y)))


def hinge_loss(S: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    """Sum over matched pairs ``i`` and every ``j != i`` of

    ``max(0, S[i, j] - S[i, i] + margin) + max(0, S[j, i] - S[i, i] + margin)``

    where rows of ``S`` are captions and columns images.
    """
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"hinge_loss needs a square similarity matrix, got {S.shape}")
    B = S.shape[0]
    if B == 1:
        return T.scale(T.sum(S), 0.0)
    d = T.diag(S)
    # caption i against image j: S[i, j] - S[i, i]
    caption_side = T.transpose(T.sub(T.transpose(S), d))
    # image j against caption i: S[i, j] - S[j, j]
    image_side = T.sub(S, d)
    terms = T.add(T.relu(T.add_scalar(caption_side, config.margin)), T.relu(T.add_scalar(image_side, config.margin)))
    off_diagonal = Tensor(1.0 - np.eye(B))
    total = T.sum(T.mul(terms, off_diagonal))
    if config.reduction == "mean":
        return T.scale(total, 1.0 / (2 * B * (B - 1)))
    return total
