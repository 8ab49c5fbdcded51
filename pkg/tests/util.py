"""Shared builders for the test suite: tiny datasets and model variants."""

import numpy as np

from gaussmetric.dataio import MODALITY_VECTOR, Dataset
from gaussmetric.model import ModelConfig, ModelParams, init_params


def make_dataset(images_per_identity, input_dim=8, seed=0, spread=1.0):
    """Clustered vector dataset with the given per-identity image counts.

    ``images_per_identity`` is a sequence; identity i gets that many rows
    around a distinct center, so matching pairs are close and non-matching
    pairs are far.
    """
    rng = np.random.default_rng(seed)
    rows, ids = [], []
    for identity, count in enumerate(images_per_identity):
        center = rng.normal(0.0, spread, size=input_dim)
        for _ in range(count):
            rows.append(center + rng.normal(0.0, 0.05 * spread, size=input_dim))
            ids.append(identity)
    features = np.array(rows, dtype=np.float32)
    peak = np.abs(features).max()
    if peak > 1.0:
        features = features / peak
    return Dataset(
        modality=MODALITY_VECTOR,
        width=0,
        height=0,
        features=features,
        ids=np.array(ids, dtype=np.uint32),
    )


def small_config(input_dim=8, **overrides):
    """Model small enough for fast training in tests."""
    defaults = dict(
        input_dim=input_dim,
        d=8,
        p=1,
        feature_widths=(32, 16),
        dropout_keep=0.8,
        seed=0,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def zero_params(config: ModelConfig) -> ModelParams:
    """All-zero parameters: every forward output is exactly zero."""
    params = init_params(config)
    for _, arr, _ in params.arrays():
        arr[:] = 0.0
    return params


def jittered_params(config: ModelConfig, scale=0.1, seed=123) -> ModelParams:
    """He init plus dense noise on weights AND biases.

    Zero biases park every pre-activation exactly at the ReLU kink for
    some inputs, where finite differences straddle the non-smooth point;
    the jitter moves the operating point off the kink.
    """
    params = init_params(config)
    rng = np.random.default_rng(seed)
    for _, arr, _ in params.arrays():
        arr += rng.normal(0.0, scale, size=arr.shape)
    return params
