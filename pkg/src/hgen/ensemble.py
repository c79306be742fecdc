"""Full ensemble: m meta-path branches of k allele learners, fusion, decoders, objective, training."""
from __future__ import annotations

import base64
import fnmatch
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .fusion import AttentionTrace, FusionParams, attention_scores, fuse, init_fusion, uniform_fuse
from .hetgraph import HeteroGraph
from .layers import AlleleConfig, AlleleLearner, allele_forward, glorot, init_allele
from .metapath import MetaPathGraph, compile_all, drop_edges

MODES = ("hgen", "naive_weighting", "hard_voting")

# stream tags for SeedSequence-derived generators
_INIT, _MASK, _EDGES = 0, 1, 2


class TrainingError(RuntimeError):
    """Training produced a non-finite objective."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or incompatible with the graph."""


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "hgen"
    k: int = 3
    attention_dim: int = 16
    allele: AlleleConfig = field(default_factory=AlleleConfig)
    projector_init: str = "zeros"
    decoder_hidden: int = 0  # 0: single linear decoder

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.k < 1 or self.attention_dim < 1 or self.decoder_hidden < 0:
            raise ValueError("k and attention_dim must be >= 1, decoder_hidden >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["allele"] = AlleleConfig(**d.get("allele", {}))
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    weight_decay: float = 5e-4
    max_epochs: int = 300
    patience: int = 30
    lam: float = 0.1
    feature_drop: bool = True
    edge_drop: float = 0.0
    regularizer: bool = True
    include_diagonal: bool = True
    seed: int = 0
    frozen: tuple[str, ...] = ()  # fnmatch patterns over parameter names

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.patience < 1 or self.max_epochs < 0:
            raise ValueError("patience must be >= 1 and max_epochs >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 <= self.edge_drop < 1.0:
            raise ValueError("edge_drop must be in [0, 1)")
        object.__setattr__(self, "frozen", tuple(self.frozen))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(x) for x in key]))


class Decoder:
    """Linear layer h -> q, or a one-hidden-layer MLP when ``hidden`` > 0."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, hidden: int = 0):
        self.params: dict[str, Tensor] = {}
        if hidden:
            self.params["hidden.weight"] = glorot(rng, in_dim, hidden)
            self.params["hidden.bias"] = Tensor(np.zeros((1, hidden)), requires_grad=True)
            in_dim = hidden
        self.params["weight"] = glorot(rng, in_dim, out_dim)
        self.params["bias"] = Tensor(np.zeros((1, out_dim)), requires_grad=True)

    def __call__(self, h: Tensor) -> Tensor:
        p = self.params
        if "hidden.weight" in p:
            h = ad.relu(ad.add(ad.matmul(h, p["hidden.weight"]), p["hidden.bias"]))
        return ad.add(ad.matmul(h, p["weight"]), p["bias"])


class EnsembleModel:
    def __init__(self, config: ModelConfig, metapaths: Sequence[MetaPathGraph], in_dim: int,
                 num_classes: int, seed: int = 0):
        if not metapaths:
            raise ValueError("at least one meta-path graph is required")
        self.config = config
        self.metapaths = list(metapaths)
        self.in_dim = int(in_dim)
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.epochs_run = 0
        cfg, h = config, config.allele.hidden_dim
        self.alleles: list[list[AlleleLearner]] = [
            [init_allele(cfg.allele, in_dim, _rng(seed, _INIT, i, j), i, j) for j in range(cfg.k)]
            for i in range(self.m)]
        self.fusions: list[FusionParams | None] = [
            init_fusion(cfg.k, h, cfg.attention_dim, _rng(seed, _INIT, i, cfg.k), cfg.projector_init)
            if cfg.mode == "hgen" else None for i in range(self.m)]
        if cfg.mode == "hard_voting":
            self.decoders = [[Decoder(h, num_classes, _rng(seed, _INIT, i, cfg.k + 1 + j), cfg.decoder_hidden)
                              for j in range(cfg.k)] for i in range(self.m)]
        else:
            self.decoders = [[Decoder(h, num_classes, _rng(seed, _INIT, i, cfg.k + 1), cfg.decoder_hidden)]
                             for i in range(self.m)]

    @property
    def m(self) -> int:
        return len(self.metapaths)

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def mode(self) -> str:
        return self.config.mode

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i in range(self.m):
            for j, allele in enumerate(self.alleles[i]):
                for name, p in allele.params.items():
                    out[f"mp{i}.allele{j}.{name}"] = p
            if self.fusions[i] is not None:
                out.update(self.fusions[i].named(f"mp{i}.fusion."))
            decs = self.decoders[i]
            for j, dec in enumerate(decs):
                prefix = f"mp{i}.allele{j}.decoder." if len(decs) > 1 or self.mode == "hard_voting" \
                    else f"mp{i}.decoder."
                for name, p in dec.params.items():
                    out[prefix + name] = p
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {sorted(missing)[:5]}, "
                                  f"unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {value.shape}, model {p.shape}")
            p.value = value.copy()


def build_model(graph: HeteroGraph, config: ModelConfig, seed: int = 0,
                metapaths: Sequence[MetaPathGraph] | None = None) -> EnsembleModel:
    if metapaths is None:
        metapaths = compile_all(graph)
    return EnsembleModel(config, metapaths, graph.num_features, graph.num_classes, seed)


# --------------------------------------------------------------------------
# forward pass and objective
# --------------------------------------------------------------------------

@dataclass
class CorrelationReport:
    pooled: np.ndarray  # m x h
    S: np.ndarray  # m x m
    l1: float


@dataclass
class ForwardResult:
    logits: Tensor
    branch_logits: list[Tensor]
    learner_logits: list[list[Tensor]] | None
    embeddings: list[list[Tensor]]
    fused: list[Tensor]
    traces: list[AttentionTrace | None]
    correlation: Tensor  # S
    report: CorrelationReport


def forward(model: EnsembleModel, X, train_mode: bool, epoch: int = 0, feature_drop: bool = True,
            edge_drop: float = 0.0) -> ForwardResult:
    X = ad.as_tensor(X)
    seed = model.seed
    branch_logits, learner_logits, embeddings, fused_all, traces = [], [], [], [], []
    for i, mpg in enumerate(model.metapaths):
        hs = []
        for j, allele in enumerate(model.alleles[i]):
            graph = mpg
            if train_mode and edge_drop > 0:
                graph = drop_edges(mpg, edge_drop, np.random.SeedSequence([seed, _EDGES, epoch, i, j]))
            rate = allele.cfg.dropout if feature_drop else 0.0
            hs.append(allele_forward(allele, graph, X, train_mode, rng=_rng(seed, _MASK, epoch, i, j), dropout=rate))
        if model.fusions[i] is not None:
            trace = attention_scores(model.fusions[i], hs)
            fused = fuse(trace, hs)
        else:
            trace = None
            fused = uniform_fuse(hs)
        if model.mode == "hard_voting":
            per = [dec(h) for dec, h in zip(model.decoders[i], hs)]
            learner_logits.append(per)
            out = per[0]
            for extra in per[1:]:
                out = ad.add(out, extra)
        else:
            out = model.decoders[i][0](fused)
        embeddings.append(hs)
        fused_all.append(fused)
        traces.append(trace)
        branch_logits.append(out)
    logits = branch_logits[0]
    for extra in branch_logits[1:]:
        logits = ad.add(logits, extra)
    pooled = ad.concat_rows([ad.col_mean(f) for f in fused_all])
    S = ad.matmul(pooled, ad.transpose(pooled))
    report = CorrelationReport(pooled.value.copy(), S.value.copy(), float(np.abs(S.value).sum()))
    return ForwardResult(logits, branch_logits, learner_logits if model.mode == "hard_voting" else None,
                         embeddings, fused_all, traces, S, report)


@dataclass
class LossParts:
    total: Tensor
    ce: float
    reg: float


_OFF_DIAG_CACHE: dict[int, np.ndarray] = {}


def regularizer_term(S: Tensor, include_diagonal: bool = True) -> Tensor:
    if include_diagonal:
        return ad.l1_norm(S)
    m = S.shape[0]
    if m not in _OFF_DIAG_CACHE:
        _OFF_DIAG_CACHE[m] = 1.0 - np.eye(m)
    return ad.l1_norm(ad.mul(S, _OFF_DIAG_CACHE[m]))


def loss(result: ForwardResult, labels, train_idx, lam: float, regularizer_on: bool = True,
         include_diagonal: bool = True) -> LossParts:
    """Cross-entropy of softmax(summed logits) plus ``lam * ||S||_1``.

    In hard-voting mode every learner is fit on its own cross-entropy and
    there is no shared regularizer.
    """
    if result.learner_logits is not None:
        terms = [ad.softmax_cross_entropy(z, labels, train_idx) for row in result.learner_logits for z in row]
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return LossParts(total, total.item(), 0.0)
    ce = ad.softmax_cross_entropy(result.logits, labels, train_idx)
    if not regularizer_on or lam == 0:
        return LossParts(ce, ce.item(), 0.0)
    reg = regularizer_term(result.correlation, include_diagonal)
    return LossParts(ad.add(ce, ad.scale(reg, lam)), ce.item(), reg.item())


# --------------------------------------------------------------------------
# predictions
# --------------------------------------------------------------------------

def _vote(logit_list: Sequence[np.ndarray], q: int) -> np.ndarray:
    n = logit_list[0].shape[0]
    counts = np.zeros((n, q), dtype=np.int64)
    rows = np.arange(n)
    for z in logit_list:
        np.add.at(counts, (rows, np.argmax(z, axis=1)), 1)
    return counts


def predictions_from(model: EnsembleModel, result: ForwardResult):
    """(class predictions, class probabilities) for every target node."""
    if result.learner_logits is not None:
        flat = [z.value for row in result.learner_logits for z in row]
        preds = np.argmax(_vote(flat, model.num_classes), axis=1)
        probs = np.mean([ad.softmax(z) for z in flat], axis=0)
        return preds, probs
    probs = ad.softmax(result.logits.value)
    return np.argmax(probs, axis=1), probs


def predict(model: EnsembleModel, graph: HeteroGraph):
    return predictions_from(model, forward(model, graph.features, train_mode=False))


def _branch_predictions(model: EnsembleModel, result: ForwardResult, i: int) -> np.ndarray:
    if result.learner_logits is not None:
        return np.argmax(_vote([z.value for z in result.learner_logits[i]], model.num_classes), axis=1)
    return np.argmax(result.branch_logits[i].value, axis=1)


def _accuracy(preds, labels, idx) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    return float(np.mean(preds[idx] == labels[idx]))


def solo_accuracies_from(model, result, labels, idx) -> list[float]:
    return [_accuracy(_branch_predictions(model, result, i), labels, idx) for i in range(model.m)]


def solo_metapath_accuracy(model: EnsembleModel, graph: HeteroGraph, i: int, idx=None) -> float:
    """Accuracy of meta-path ``i``'s decoder on its fused embedding alone (test split by default)."""
    if not 0 <= i < model.m:
        raise IndexError(f"meta-path index {i} out of range for m={model.m}")
    idx = graph.splits["test"] if idx is None else idx
    result = forward(model, graph.features, train_mode=False)
    return _accuracy(_branch_predictions(model, result, i), graph.labels, idx)


def allele_accuracies_from(model: EnsembleModel, result: ForwardResult, labels, idx) -> np.ndarray:
    """m x k accuracies of individual alleles.

    Each allele embedding is decoded by its meta-path decoder after scaling
    by the node's total fusion weight, i.e. as if it were the sole
    contributor to the fused embedding.
    """
    out = np.zeros((model.m, model.k))
    for i in range(model.m):
        for j, h in enumerate(result.embeddings[i]):
            if result.learner_logits is not None:
                z = result.learner_logits[i][j].value
            else:
                trace = result.traces[i]
                scale = 1.0 if trace is None else trace.weights.value.sum(axis=1, keepdims=True)
                z = model.decoders[i][0](Tensor(h.value * scale)).value
            out[i, j] = _accuracy(np.argmax(z, axis=1), labels, idx)
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: EnsembleModel
    history: list[dict]
    best_epoch: int
    best_val_acc: float
    epoch_times: list[float]


def trainable_parameters(model: EnsembleModel, frozen: Sequence[str] = ()) -> dict[str, Tensor]:
    return {name: p for name, p in model.parameters().items()
            if not any(fnmatch.fnmatchcase(name, pat) for pat in frozen)}


def train_step(model: EnsembleModel, graph: HeteroGraph, cfg: TrainConfig, optimizer: ad.Adam, epoch: int):
    optimizer.zero_grad()
    with Tape() as tape:
        result = forward(model, graph.features, train_mode=True, epoch=epoch,
                         feature_drop=cfg.feature_drop, edge_drop=cfg.edge_drop)
        parts = loss(result, graph.labels, graph.splits["train"], cfg.lam, cfg.regularizer, cfg.include_diagonal)
    if not np.isfinite(parts.total.item()):
        raise TrainingError(f"non-finite loss at epoch {epoch}: ce={parts.ce!r}, reg={parts.reg!r}, "
                            f"lambda={cfg.lam}, lr={cfg.lr}")
    tape.backward(parts.total)
    optimizer.step()
    return result, parts


def make_optimizer(model: EnsembleModel, cfg: TrainConfig) -> ad.Adam:
    return ad.Adam(trainable_parameters(model, cfg.frozen), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train(model: EnsembleModel, graph: HeteroGraph, cfg: TrainConfig,
          callback: Callable[[int, ForwardResult, ForwardResult], None] | None = None) -> TrainResult:
    """Full-batch training with early stopping on validation accuracy.

    The parameters of the best validation epoch are restored at the end.
    """
    optimizer = make_optimizer(model, cfg)
    labels, splits = graph.labels, graph.splits
    history, times = [], []
    best_acc, best_epoch, best_state, bad = -1.0, -1, model.state_dict(), 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        train_result, parts = train_step(model, graph, cfg, optimizer, epoch)
        times.append(time.perf_counter() - t0)
        model.epochs_run += 1

        result = forward(model, graph.features, train_mode=False)
        preds, _ = predictions_from(model, result)
        val_parts = loss(result, labels, splits["val"], cfg.lam, cfg.regularizer, cfg.include_diagonal) \
            if len(splits["val"]) else None
        val_acc = _accuracy(preds, labels, splits["val"]) if len(splits["val"]) else 0.0
        history.append({
            "epoch": epoch,
            "train_loss": parts.total.item(),
            "train_ce": parts.ce,
            "train_reg": parts.reg,
            "train_acc": _accuracy(preds, labels, splits["train"]),
            "val_loss": val_parts.total.item() if val_parts else None,
            "val_acc": val_acc,
            "s_l1": result.report.l1,
            "solo_val_acc": solo_accuracies_from(model, result, labels, splits["val"]) if len(splits["val"]) else [],
        })
        if callback is not None:
            callback(epoch, train_result, result)
        if val_acc > best_acc:
            best_acc, best_epoch, best_state, bad = val_acc, epoch, model.state_dict(), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best_acc, times)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_FORMAT = "hgen-checkpoint/1"


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_dict(model: EnsembleModel, train_config: TrainConfig | None = None) -> dict:
    params = [{"name": k, "shape": list(v.shape), "data": _encode(v)} for k, v in model.state_dict().items()]
    digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()
    return {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "in_dim": model.in_dim,
        "num_classes": model.num_classes,
        "metapaths": [mpg.path_name for mpg in model.metapaths],
        "rng_state": {"bit_generator": "PCG64", "seed": model.seed, "epochs_run": model.epochs_run},
        "params": params,
        "sha256": digest,
    }


def save_checkpoint(path, model: EnsembleModel, train_config: TrainConfig | None = None):
    Path(path).write_text(json.dumps(checkpoint_dict(model, train_config)))


def load_checkpoint(path, graph: HeteroGraph, metapaths: Sequence[MetaPathGraph] | None = None):
    """Rebuild the model stored at ``path`` over ``graph``; returns (model, train_config)."""
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
        params = doc["params"]
        digest = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()
        if digest != doc["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch (corrupted checkpoint)")
        state = {p["name"]: _decode(p["data"], p["shape"]) for p in params}
        config = ModelConfig.from_dict(doc["model_config"])
        tc = doc.get("train_config")
        train_config = TrainConfig(**tc) if tc else None
    except CheckpointError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc!r})") from exc

    if doc["in_dim"] != graph.num_features:
        raise CheckpointError(f"checkpoint expects {doc['in_dim']} input features, graph has {graph.num_features}")
    if doc["num_classes"] != graph.num_classes:
        raise CheckpointError(f"checkpoint expects {doc['num_classes']} classes, graph has {graph.num_classes}")
    if metapaths is None:
        metapaths = compile_all(graph)
    names = [m.path_name for m in metapaths]
    if names != doc["metapaths"]:
        raise CheckpointError(f"checkpoint meta-paths {doc['metapaths']} do not match graph meta-paths {names}")
    rng = doc.get("rng_state", {})
    model = EnsembleModel(config, metapaths, graph.num_features, graph.num_classes, seed=rng.get("seed", 0))
    model.load_state_dict(state)
    model.epochs_run = rng.get("epochs_run", 0)
    return model, train_config


def with_mode(config: ModelConfig, mode: str) -> ModelConfig:
    return replace(config, mode=mode)
