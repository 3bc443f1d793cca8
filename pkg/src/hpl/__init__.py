"""Proxy-based deep metric learning with a hierarchical proxy loss.

Submodules are imported lazily so the CLI can pin BLAS thread counts via
HPL_THREADS before numpy first loads.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    # errors
    "HplError": "errors",
    "ContractError": "errors",
    "DomainError": "errors",
    "TrainingError": "errors",
    "DataFormatError": "errors",
    "CheckpointError": "errors",
    "CheckpointVersionError": "errors",
    # core
    "Rng": "core",
    "cosine_similarity": "core",
    "sq_euclidean": "core",
    "l2_normalize": "core",
    "normalize_rows": "core",
    # network
    "Mlp": "network",
    "Tape": "network",
    "GradBuffer": "network",
    "AdamState": "network",
    "forward": "network",
    "backward": "network",
    "adam_step": "network",
    "DEFAULT_HIDDEN_DIM": "network",
    "DEFAULT_EMBED_DIM": "network",
    # losses
    "LossConfig": "losses",
    "LossOutput": "losses",
    "proxy_nca_loss": "losses",
    "proxy_anchor_loss": "losses",
    "base_loss": "losses",
    "hpl_loss": "losses",
    # pyramid
    "kmeans": "pyramid",
    "ProxyPyramid": "pyramid",
    "init_pyramid": "pyramid",
    "propagate_labels": "pyramid",
    "update_assignments": "pyramid",
    "update_centroids": "pyramid",
    "set_fixed_hierarchy": "pyramid",
    "pyramid_sse": "pyramid",
    # data
    "Dataset": "data",
    "SyntheticSpec": "data",
    "generate_synthetic": "data",
    "split_classes": "data",
    "save_dataset": "data",
    "load_dataset": "data",
    # evaluation
    "RetrievalReport": "evaluation",
    "rank_gallery": "evaluation",
    "evaluate": "evaluation",
    "embed_dataset": "evaluation",
    # trainer
    "TrainConfig": "trainer",
    "TrainResult": "trainer",
    "Checkpoint": "trainer",
    "IterationRecord": "trainer",
    "EpochRecord": "trainer",
    "TrainingLog": "trainer",
    "train": "trainer",
    "sample_batch": "trainer",
    "iterations_per_epoch": "trainer",
    "save_checkpoint": "trainer",
    "load_checkpoint": "trainer",
    "log_line": "trainer",
    "SALT_NET": "trainer",
    "SALT_PROXIES": "trainer",
    "SALT_PYRAMID": "trainer",
    "SALT_BATCH": "trainer",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    module_name = _EXPORTS.get(name)
    if module_name is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(importlib.import_module(f".{module_name}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
