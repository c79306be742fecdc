"""Experiment drivers behind ``hgen bench``: k-runtime sweep, lambda-diversity sweep,
allele-versus-ensemble spread."""
from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .ensemble import ModelConfig, TrainConfig, build_model, forward, train
from .metrics import diversity_stats, evaluate, time_epochs


def train_and_evaluate(graph, metapaths, model_config: ModelConfig, train_config: TrainConfig, seed: int):
    """Train one model with ``seed`` (init and masks) and evaluate on the test split."""
    tc = replace(train_config, seed=seed)
    model = build_model(graph, model_config, seed=seed, metapaths=metapaths)
    result = train(model, graph, tc)
    return model, result, evaluate(model, graph)


def runtime_sweep(graph, model_config, train_config, ks: Sequence[int], epochs: int = 10, warmup: int = 2,
                  repeats: int = 1) -> dict:
    return time_epochs(graph, model_config, train_config, ks, epochs=epochs, warmup=warmup, repeats=repeats)


def lambda_sweep(graph, metapaths, model_config, train_config, lambdas: Sequence[float],
                 seeds: Sequence[int]) -> dict:
    """Per-lambda solo per-meta-path test accuracies and optimised ||S||_1.

    ``spread`` is the standard deviation of the m solo accuracies of one
    model, averaged over seeds.
    """
    rows, stats = [], {}
    for lam in lambdas:
        spreads, l1s, accs = [], [], []
        for seed in seeds:
            model, _, report = train_and_evaluate(graph, metapaths, model_config, replace(train_config, lam=lam),
                                                  seed)
            l1 = forward(model, graph.features, train_mode=False).report.l1
            for i, acc in enumerate(report.solo_accuracies):
                rows.append({"lambda": lam, "seed": seed, "metapath": i, "solo_accuracy": acc})
            spreads.append(float(np.std(report.solo_accuracies)))
            l1s.append(l1)
            accs.append(report.accuracy)
        stats[lam] = {"spread_mean": float(np.mean(spreads)), "spreads": spreads, "s_l1_mean": float(np.mean(l1s)),
                      "s_l1": l1s, "accuracy_mean": float(np.mean(accs))}
    return {"rows": rows, "stats": stats}


def allele_variance(graph, metapaths, model_config, train_config, seeds: Sequence[int],
                    modes: Sequence[str] = ("hgen",)) -> dict:
    """Ensemble accuracy versus the accuracies of its individual alleles, per mode."""
    rows, stats = [], {}
    for mode in modes:
        ens, alleles = [], []
        for seed in seeds:
            _, _, report = train_and_evaluate(graph, metapaths, replace(model_config, mode=mode), train_config, seed)
            ens.append(report.accuracy)
            flat = np.asarray(report.allele_accuracies).reshape(-1)
            alleles.extend(flat.tolist())
            rows.append({"mode": mode, "seed": seed, "learner": "ensemble", "accuracy": report.accuracy})
            for idx, acc in enumerate(flat):
                rows.append({"mode": mode, "seed": seed, "learner": f"allele{idx}", "accuracy": float(acc)})
        stats[mode] = {"ensemble": diversity_stats(ens) if len(ens) > 1 else {"mean": ens[0]},
                       "alleles": diversity_stats(alleles), "ensemble_accuracies": ens}
    return {"rows": rows, "stats": stats}
