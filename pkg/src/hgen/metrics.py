"""Accuracy, macro one-vs-rest AUC, spread statistics and epoch timing."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata


def accuracy(preds, labels, idx=None) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    idx = np.arange(len(labels)) if idx is None else np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("accuracy over an empty index set")
    return float(np.count_nonzero(preds[idx] == labels[idx]) / idx.size)


def error_rate(preds, labels, idx=None) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    idx = np.arange(len(labels)) if idx is None else np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("error rate over an empty index set")
    return float(np.count_nonzero(preds[idx] != labels[idx]) / idx.size)


def binary_auc(scores, positive) -> float:
    """Rank-based (Mann-Whitney) AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def one_vs_rest_auc(probs, labels, idx=None):
    """Per-class AUC of ``probs[:, c]`` for ``label == c`` against the rest.

    Returns ``(per_class, skipped)`` where ``skipped`` lists classes without
    both a positive and a negative sample in ``idx``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if idx is not None:
        idx = np.asarray(idx, dtype=np.int64)
        probs, labels = probs[idx], labels[idx]
    per_class, skipped = {}, []
    for c in range(probs.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            skipped.append(c)
            continue
        per_class[c] = binary_auc(probs[:, c], pos)
    return per_class, skipped


def macro_auc(probs, labels, idx=None) -> float:
    per_class, _ = one_vs_rest_auc(probs, labels, idx)
    if not per_class:
        raise ValueError("no scorable class for AUC")
    return float(np.mean(list(per_class.values())))


def diversity_stats(values: Sequence[float]) -> dict:
    """Population standard deviation and interquartile range."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size < 2:
        raise ValueError("spread statistics need at least 2 values")
    q1, q3 = np.percentile(v, [25, 75])
    # shifting by one sample keeps constant inputs at exactly zero spread
    std = float((v - v[0]).std())
    return {"mean": float(v.mean()), "std": std, "iqr": float(q3 - q1), "n": int(v.size)}


def linear_fit(x, y) -> dict:
    """Least-squares line through (x, y) with its coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


@dataclass
class EvalReport:
    accuracy: float
    macro_auc: float | None
    per_class_auc: dict
    skipped_classes: list
    solo_accuracies: list
    allele_accuracy_mean: float
    allele_accuracy_var: float
    allele_accuracies: list = field(default_factory=list)
    epoch_time: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_auc"] = {str(k): v for k, v in self.per_class_auc.items()}
        return d


def evaluate(model, graph, idx=None) -> EvalReport:
    from .ensemble import allele_accuracies_from, forward, predictions_from, solo_accuracies_from

    idx = graph.splits["test"] if idx is None else np.asarray(idx, dtype=np.int64)
    result = forward(model, graph.features, train_mode=False)
    preds, probs = predictions_from(model, result)
    per_class, skipped = one_vs_rest_auc(probs, graph.labels, idx)
    alleles = allele_accuracies_from(model, result, graph.labels, idx)
    return EvalReport(
        accuracy=accuracy(preds, graph.labels, idx),
        macro_auc=float(np.mean(list(per_class.values()))) if per_class else None,
        per_class_auc=per_class,
        skipped_classes=skipped,
        solo_accuracies=solo_accuracies_from(model, result, graph.labels, idx),
        allele_accuracy_mean=float(alleles.mean()),
        allele_accuracy_var=float(alleles.var()),
        allele_accuracies=alleles.tolist(),
    )


def _default_epoch_runner(graph, model_config, train_config):
    from dataclasses import replace

    from .ensemble import build_model, make_optimizer, train_step
    from .metapath import compile_all

    mpgs = compile_all(graph)

    def runner(k: int, epochs: int, clock):
        model = build_model(graph, replace(model_config, k=k), train_config.seed, mpgs)
        opt = make_optimizer(model, train_config)
        out = []
        for epoch in range(epochs):
            t0 = clock()
            train_step(model, graph, train_config, opt, epoch)
            out.append(clock() - t0)
        return out

    return runner


def time_epochs(graph, model_config, train_config, k_values: Sequence[int], epochs: int = 10,
                warmup: int = 2, runner: Callable | None = None, clock: Callable[[], float] = time.perf_counter,
                repeats: int = 1) -> dict:
    """Mean training-epoch wall time per ensemble size, plus a linear fit in k.

    ``runner(k, n_epochs, clock)`` returns per-epoch durations; the first
    ``warmup`` epochs of each run are discarded.
    """
    k_values = list(k_values)
    if len(k_values) < 2:
        raise ValueError("need at least two k values to fit a line")
    if runner is None:
        runner = _default_epoch_runner(graph, model_config, train_config)
    raw, means = {}, []
    for k in k_values:
        samples = []
        for _ in range(repeats):
            samples.extend(runner(k, epochs + warmup, clock)[warmup:])
        raw[k] = [float(s) for s in samples]
        means.append(float(np.mean(samples)))
    fit = linear_fit(k_values, means)
    return {"k": k_values, "mean_epoch_time": means, "raw": raw, **fit}
