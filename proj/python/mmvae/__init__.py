"""Latent mixed-model analysis of multi-instrument longitudinal data."""

from ._core import (
    Config,
    Dataset,
    MmvaeError,
    Model,
    effects,
    fit_lmm,
    inject,
    lr_test,
    meta,
    simulate,
    train,
)

__all__ = [
    "Config",
    "Dataset",
    "MmvaeError",
    "Model",
    "effects",
    "fit_lmm",
    "inject",
    "lr_test",
    "meta",
    "simulate",
    "train",
]
