"""Siamese feature encoder and metric head.

Two inputs are encoded by a shared feature network (x -> f in R^d); the
concatenated pair [f1 f2] in R^2d is mapped by the metric network to the
output z in R^p that the Gaussian targets and decision rule operate on.

Forward passes come in two flavors: tape-recorded (:func:`encode`,
:func:`metric`) for training, and plain numpy (:func:`encode_np`,
:func:`metric_np`) for mining and evaluation where no gradients are
needed. Both share the same parameter container, so they cannot drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``feature_widths`` are the encoder's hidden layer sizes; the encoder
    output dimension is ``d`` and the metric output dimension ``p``.
    Dropout (inverted, applied before the encoder's final projection) keeps
    each unit with probability ``dropout_keep``.
    """

    input_dim: int
    d: int = 32
    p: int = 1
    feature_widths: tuple[int, ...] = (256, 128)
    dropout_keep: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        if any(w < 1 for w in self.feature_widths):
            raise ConfigError(f"hidden widths must be >= 1, got {self.feature_widths}")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ConfigError(
                f"dropout_keep must be in (0, 1], got {self.dropout_keep}"
            )
        # frozen dataclass: normalize via object.__setattr__
        object.__setattr__(self, "feature_widths", tuple(self.feature_widths))


def metricnet_widths(d: int, p: int) -> list[tuple[int, int]]:
    """(fan_in, fan_out) pairs for the 7-layer metric head.

    The head starts at the pair width 2d, halves through the stack, and
    ends at p. Intermediate widths never drop below p (or 1), so a wide
    output simply flattens the taper; if p exceeds the 2d input itself
    there is no sensible stack and we refuse.
    """
    if d < 1 or p < 1:
        raise ConfigError(f"d and p must be >= 1, got d={d}, p={p}")
    if p > 2 * d:
        raise ConfigError(
            f"metric output p={p} exceeds the pair width 2d={2 * d}; "
            f"use d >= {(p + 1) // 2}"
        )
    floor = max(p, 1)
    outs = [2 * d]
    for _ in range(5):
        outs.append(max(outs[-1] // 2, floor))
    outs.append(p)
    widths = []
    fan_in = 2 * d
    for fan_out in outs:
        widths.append((fan_in, fan_out))
        fan_in = fan_out
    return widths


@dataclass
class LayerParams:
    """One affine layer: y = x @ w + b."""

    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (1, fan_out)


@dataclass
class ModelParams:
    """All trainable arrays, in a fixed traversal order."""

    feature_layers: list[LayerParams]
    metric_layers: list[LayerParams]

    def arrays(self) -> list[tuple[str, np.ndarray, bool]]:
        """(name, array, is_weight_matrix) triples in a stable order.

        The flag marks weight matrices (decay applies) versus biases
        (never decayed).
        """
        out = []
        for prefix, layers in (
            ("feature", self.feature_layers),
            ("metric", self.metric_layers),
        ):
            for i, layer in enumerate(layers):
                out.append((f"{prefix}.{i}.w", layer.w, True))
                out.append((f"{prefix}.{i}.b", layer.b, False))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            feature_layers=[
                LayerParams(l.w.copy(), l.b.copy()) for l in self.feature_layers
            ],
            metric_layers=[
                LayerParams(l.w.copy(), l.b.copy()) for l in self.metric_layers
            ],
        )

    def count(self) -> int:
        return sum(a.size for _, a, _ in self.arrays())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a, _ in self.arrays())


def feature_widths_chain(config: ModelConfig) -> list[tuple[int, int]]:
    dims = [config.input_dim, *config.feature_widths, config.d]
    return list(zip(dims[:-1], dims[1:]))


def init_params(config: ModelConfig) -> ModelParams:
    """He-initialized parameters: w ~ N(0, 2 / fan_in), zero biases."""
    rng = np.random.default_rng(config.seed)

    def layer(fan_in, fan_out):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        return LayerParams(w=w, b=np.zeros((1, fan_out)))

    return ModelParams(
        feature_layers=[layer(i, o) for i, o in feature_widths_chain(config)],
        metric_layers=[layer(i, o) for i, o in metricnet_widths(config.d, config.p)],
    )


@dataclass
class BoundLayer:
    w: Node
    b: Node


@dataclass
class BoundParams:
    """Tape-leaf view of :class:`ModelParams` for one training step.

    Binding once and reusing the nodes across the four encoder calls is
    what makes the siamese weight sharing hold: adjoints from every branch
    accumulate on the same leaves.
    """

    feature_layers: list[BoundLayer]
    metric_layers: list[BoundLayer]

    def leaves(self) -> list[Node]:
        out = []
        for layers in (self.feature_layers, self.metric_layers):
            for layer in layers:
                out.append(layer.w)
                out.append(layer.b)
        return out


def bind_params(tape: Tape, params: ModelParams) -> BoundParams:
    def bind(layers):
        return [
            BoundLayer(w=tape.leaf(l.w, op="param"), b=tape.leaf(l.b, op="param"))
            for l in layers
        ]

    return BoundParams(
        feature_layers=bind(params.feature_layers),
        metric_layers=bind(params.metric_layers),
    )


def dropout_mask(rng: np.random.Generator, shape, keep: float) -> np.ndarray:
    """Inverted dropout mask: kept units scaled by 1/keep, dropped are 0."""
    if keep >= 1.0:
        return np.ones(shape)
    return (rng.random(shape) < keep) / keep


def encode(tape: Tape, bound: BoundParams, x: Node, mask: np.ndarray | None = None) -> Node:
    """Feature network forward on the tape.

    ``mask`` is the dropout mask applied before the final projection; pass
    None at evaluation. ReLU after every layer except the last.
    """
    h = x
    last = len(bound.feature_layers) - 1
    for i, layer in enumerate(bound.feature_layers):
        if i == last and mask is not None:
            rows, cols = h.value.shape
            if mask.shape[1] != cols or mask.shape[0] not in (1, rows):
                raise ShapeError(
                    f"dropout mask {mask.shape} does not match activations "
                    f"{h.value.shape}"
                )
            if mask.shape[0] == 1:
                mask = np.broadcast_to(mask, (rows, cols))
            h = tape.mul(h, tape.constant(mask))
        h = tape.add_rowvec(tape.matmul(h, layer.w), layer.b)
        if i != last:
            h = tape.relu(h)
    return h


def metric(tape: Tape, bound: BoundParams, f1: Node, f2: Node) -> Node:
    """Metric head forward on the tape: [f1 f2] -> z."""
    h = tape.concat_cols(f1, f2)
    last = len(bound.metric_layers) - 1
    for i, layer in enumerate(bound.metric_layers):
        h = tape.add_rowvec(tape.matmul(h, layer.w), layer.b)
        if i != last:
            h = tape.relu(h)
    return h


def encode_np(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Evaluation-mode encoder: no dropout, no tape."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 1:
        h = h.reshape(1, -1)
    last = len(params.feature_layers) - 1
    for i, layer in enumerate(params.feature_layers):
        h = h @ layer.w + layer.b
        if i != last:
            np.maximum(h, 0.0, out=h)
    return h


def metric_np(params: ModelParams, f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    h = np.hstack([f1, f2])
    last = len(params.metric_layers) - 1
    for i, layer in enumerate(params.metric_layers):
        h = h @ layer.w + layer.b
        if i != last:
            np.maximum(h, 0.0, out=h)
    return h


def pair_forward_np(params: ModelParams, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Full evaluation-mode pass: two input batches -> (b, p) outputs."""
    return metric_np(params, encode_np(params, x1), encode_np(params, x2))
