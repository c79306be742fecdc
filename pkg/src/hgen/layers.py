"""Allele GNN base learners: feature-dropout projection plus GCN / SAGE / GAT layers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metapath import MetaPathGraph

BACKBONES = ("gcn", "sage", "gat")


@dataclass(frozen=True)
class AlleleConfig:
    backbone: str = "gcn"
    num_layers: int = 2
    hidden_dim: int = 64
    dropout: float = 0.3
    seed: int = 0
    gat_heads: int = 1
    leaky_slope: float = 0.2
    activation: str | None = None  # None: relu for gcn/sage, elu for gat

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.num_layers < 1 or self.hidden_dim < 1 or self.gat_heads < 1:
            raise ValueError("num_layers, hidden_dim and gat_heads must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.activation is not None and self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_activation(self) -> str:
        if self.activation is not None:
            return self.activation
        return "elu" if self.backbone == "gat" else "relu"


@dataclass
class AlleleLearner:
    cfg: AlleleConfig
    params: dict[str, Tensor]
    metapath_index: int = 0
    replica_index: int = 0
    rng: np.random.Generator = field(default=None, repr=False)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def init_allele(cfg: AlleleConfig, in_dim: int, rng=None, metapath_index: int = 0,
                replica_index: int = 0) -> AlleleLearner:
    """Fresh learner; ``rng`` defaults to a stream seeded from ``cfg.seed``."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden_dim
    params = {"proj": glorot(rng, in_dim, h, "proj")}
    for l in range(cfg.num_layers):
        if cfg.backbone == "gcn":
            params[f"layer{l}.weight"] = glorot(rng, h, h)
        elif cfg.backbone == "sage":
            params[f"layer{l}.self"] = glorot(rng, h, h)
            params[f"layer{l}.neigh"] = glorot(rng, h, h)
        else:
            for hd in range(cfg.gat_heads):
                params[f"layer{l}.head{hd}.weight"] = glorot(rng, h, h)
                params[f"layer{l}.head{hd}.att_src"] = glorot(rng, h, 1)
                params[f"layer{l}.head{hd}.att_dst"] = glorot(rng, h, 1)
    for name, p in params.items():
        p.name = name
    return AlleleLearner(cfg, params, metapath_index, replica_index, rng)


def project(allele: AlleleLearner, X, train_mode: bool, rng=None, dropout: float | None = None) -> Tensor:
    """relu(Dropout(X) @ W0). The mask is drawn only in train mode."""
    X = ad.as_tensor(X)
    w = allele.params["proj"]
    if X.shape[1] != w.shape[0]:
        raise ValueError(f"feature dim {X.shape[1]} does not match projection input {w.shape[0]}")
    rate = allele.cfg.dropout if dropout is None else dropout
    if train_mode and rate > 0:
        X = ad.mul(X, ad.dropout_mask(X.shape, rate, allele.rng if rng is None else rng))
    return ad.relu(ad.matmul(X, w))


def _check_rows(mpg: MetaPathGraph, H: Tensor):
    if H.shape[0] != mpg.n:
        raise ValueError(f"embedding has {H.shape[0]} rows, graph has {mpg.n} nodes")


def forward_gcn(allele: AlleleLearner, mpg: MetaPathGraph, H0) -> Tensor:
    H = ad.as_tensor(H0)
    _check_rows(mpg, H)
    act = ad.ACTIVATIONS[allele.cfg.layer_activation]
    for l in range(allele.cfg.num_layers):
        H = act(ad.matmul(ad.sparse_dense_matmul(mpg.norm_operator, H), allele.params[f"layer{l}.weight"]))
    return H


def forward_sage(allele: AlleleLearner, mpg: MetaPathGraph, H0) -> Tensor:
    H = ad.as_tensor(H0)
    _check_rows(mpg, H)
    act = ad.ACTIVATIONS[allele.cfg.layer_activation]
    mean_op = mpg.neighbor_mean
    for l in range(allele.cfg.num_layers):
        own = ad.matmul(H, allele.params[f"layer{l}.self"])
        neigh = ad.matmul(ad.sparse_dense_matmul(mean_op, H), allele.params[f"layer{l}.neigh"])
        H = act(ad.add(own, neigh))
    return H


def gat_attention(allele: AlleleLearner, mpg: MetaPathGraph, H: Tensor, layer: int, head: int):
    """Per-edge attention over closed neighbourhoods and the transformed features."""
    pattern = mpg.closed_neighborhood
    p = allele.params
    wh = ad.matmul(H, p[f"layer{layer}.head{head}.weight"])
    s_src = ad.matmul(wh, p[f"layer{layer}.head{head}.att_src"])
    s_dst = ad.matmul(wh, p[f"layer{layer}.head{head}.att_dst"])
    scores = ad.add(ad.gather_rows(s_src, pattern.row_ids), ad.gather_rows(s_dst, pattern.indices))
    scores = ad.leaky_relu(scores, allele.cfg.leaky_slope)
    return ad.segment_softmax(scores, pattern.indptr), wh


def forward_gat(allele: AlleleLearner, mpg: MetaPathGraph, H0, attention_out: list | None = None) -> Tensor:
    H = ad.as_tensor(H0)
    _check_rows(mpg, H)
    cfg = allele.cfg
    act = ad.ACTIVATIONS[cfg.layer_activation]
    pattern = mpg.closed_neighborhood
    for l in range(cfg.num_layers):
        heads = []
        for hd in range(cfg.gat_heads):
            alpha, wh = gat_attention(allele, mpg, H, l, hd)
            if attention_out is not None:
                attention_out.append(alpha.value[:, 0].copy())
            heads.append(ad.edge_spmm(pattern, alpha, wh))
        agg = heads[0]
        for extra in heads[1:]:
            agg = ad.add(agg, extra)
        if cfg.gat_heads > 1:
            agg = ad.scale(agg, 1.0 / cfg.gat_heads)
        H = act(agg)
    return H


_FORWARDS = {"gcn": forward_gcn, "sage": forward_sage, "gat": forward_gat}


def forward_layers(allele: AlleleLearner, mpg: MetaPathGraph, H0) -> Tensor:
    return _FORWARDS[allele.cfg.backbone](allele, mpg, H0)


def allele_forward(allele: AlleleLearner, mpg: MetaPathGraph, X, train_mode: bool, rng=None,
                   dropout: float | None = None) -> Tensor:
    return forward_layers(allele, mpg, project(allele, X, train_mode, rng=rng, dropout=dropout))
