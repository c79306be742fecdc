"""Ensemble learning over meta-path views of heterogeneous graphs."""
from .hetgraph import (HeteroGraph, EdgeType, SyntheticSpec, GraphFormatError, GraphValidationError,
                       generate_synthetic, load_heterograph, save_heterograph, split_nodes, standard_fixture_spec)
from .metapath import MetaPathGraph, SparseBoolMatrix, CSRMatrix, biadjacency, compile_metapath, compile_all, drop_edges
from .layers import AlleleConfig, AlleleLearner, init_allele
from .fusion import FusionParams, AttentionTrace, attention_scores, fuse
from .ensemble import (EnsembleModel, ModelConfig, TrainConfig, build_model, forward, loss, train, predict,
                       solo_metapath_accuracy, save_checkpoint, load_checkpoint)
from .metrics import accuracy, macro_auc, diversity_stats, evaluate, time_epochs

__version__ = "0.1.0"
