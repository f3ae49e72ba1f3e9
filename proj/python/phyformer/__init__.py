"""Transformer receiver for an OFDM uplink tile, with classical baselines."""

from ._core import (
    CHECKPOINT_VERSION,
    DATASET_VERSION,
    ConfigError,
    Dataset,
    FormatError,
    Model,
    NumericError,
    ShapeError,
    bench,
    gen_dataset,
    load_dataset,
    ls_linear,
    sweep,
    train,
    wilson_interval,
)

__all__ = [
    "CHECKPOINT_VERSION",
    "DATASET_VERSION",
    "ConfigError",
    "Dataset",
    "FormatError",
    "Model",
    "NumericError",
    "ShapeError",
    "bench",
    "gen_dataset",
    "load_dataset",
    "ls_linear",
    "sweep",
    "train",
    "wilson_interval",
]
