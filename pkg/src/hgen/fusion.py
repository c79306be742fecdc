"""Residual-attention fusion of the k allele embeddings of one meta-path.

Scores ``Theta = concat_j(H_j @ C_j) @ P`` (n x k) are centred per row and
min-max normalised per row to ``[0, 1]``; each allele then gets the node-wise
weight ``normalised + 1/k``. A row whose scores are all equal normalises to
zero, which leaves the plain mean of the alleles.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import glorot

DEGENERATE_EPS = 1e-12


@dataclass
class FusionParams:
    compressors: list[Tensor]  # k tensors, h x a
    projector: Tensor  # (k*a) x k

    @property
    def k(self) -> int:
        return len(self.compressors)

    @property
    def attention_dim(self) -> int:
        return self.compressors[0].shape[1]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}compress{j}": c for j, c in enumerate(self.compressors)}
        out[f"{prefix}projector"] = self.projector
        return out


def init_fusion(k: int, hidden_dim: int, attention_dim: int, rng: np.random.Generator,
                projector_init: str = "zeros") -> FusionParams:
    if k < 1 or attention_dim < 1:
        raise ValueError("k and attention_dim must be >= 1")
    compressors = [glorot(rng, hidden_dim, attention_dim) for _ in range(k)]
    if projector_init == "zeros":
        projector = Tensor(np.zeros((k * attention_dim, k)), requires_grad=True)
    elif projector_init == "glorot":
        projector = glorot(rng, k * attention_dim, k)
    else:
        raise ValueError(f"unknown projector_init {projector_init!r}")
    return FusionParams(compressors, projector)


@dataclass
class AttentionTrace:
    raw: Tensor  # Theta
    centered: Tensor  # Theta - row mean
    normalized: Tensor  # per-row min-max of centered, zero on flat rows
    weights: Tensor  # normalized + 1/k

    def weight_matrix(self) -> np.ndarray:
        return self.weights.value.copy()

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {"raw": self.raw.value.copy(), "centered": self.centered.value.copy(),
                "normalized": self.normalized.value.copy(), "weights": self.weights.value.copy()}


def _check_embeddings(embeddings: Sequence[Tensor]):
    if not embeddings:
        raise ValueError("fusion needs at least one embedding")
    shapes = {e.shape for e in embeddings}
    if len(shapes) != 1:
        raise ValueError(f"embeddings differ in shape: {sorted(shapes)}")


def normalize_scores(theta: Tensor) -> AttentionTrace:
    k = theta.shape[1]
    centered = ad.sub(theta, ad.row_mean(theta))
    low = ad.row_min(centered)
    spread = ad.sub(ad.row_max(centered), low)
    # eps sits in the denominator: an exactly flat row gives 0/eps = 0 (the plain mean) but still
    # passes a gradient, so a zero projector can leave the mean-ensemble starting point
    normalized = ad.mul(ad.sub(centered, low), ad.reciprocal(ad.add_scalar(spread, DEGENERATE_EPS)))
    return AttentionTrace(theta, centered, normalized, ad.add_scalar(normalized, 1.0 / k))


def attention_scores(params: FusionParams, embeddings: Sequence[Tensor]) -> AttentionTrace:
    embeddings = [ad.as_tensor(e) for e in embeddings]
    _check_embeddings(embeddings)
    if len(embeddings) != params.k:
        raise ValueError(f"got {len(embeddings)} embeddings for a k={params.k} fusion")
    if embeddings[0].shape[1] != params.compressors[0].shape[0]:
        raise ValueError("embedding width does not match compressor input")
    compressed = ad.concat_cols([ad.matmul(h, c) for h, c in zip(embeddings, params.compressors)])
    return normalize_scores(ad.matmul(compressed, params.projector))


def weighted_sum(weights: Tensor, embeddings: Sequence[Tensor]) -> Tensor:
    embeddings = [ad.as_tensor(e) for e in embeddings]
    _check_embeddings(embeddings)
    if weights.shape != (embeddings[0].shape[0], len(embeddings)):
        raise ValueError(f"weight matrix {weights.shape} does not match {len(embeddings)} embeddings")
    out = None
    for j, h in enumerate(embeddings):
        term = ad.mul(ad.take_col(weights, j), h)
        out = term if out is None else ad.add(out, term)
    return out


def fuse(trace: AttentionTrace, embeddings: Sequence[Tensor]) -> Tensor:
    return weighted_sum(trace.weights, embeddings)


def uniform_fuse(embeddings: Sequence[Tensor]) -> Tensor:
    """Mean ensemble with constant 1/k weights (no attention parameters)."""
    embeddings = [ad.as_tensor(e) for e in embeddings]
    _check_embeddings(embeddings)
    k = len(embeddings)
    return weighted_sum(Tensor(np.full((embeddings[0].shape[0], k), 1.0 / k)), embeddings)
