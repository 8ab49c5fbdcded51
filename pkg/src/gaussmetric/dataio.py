"""Datasets, flips, the synthetic benchmark generator, and file formats.

Two binary formats live here, both little-endian with explicit magics so a
wrong file fails loudly instead of decoding into garbage:

* dataset files: magic ``BMNDS1``, header (modality u8, width u32,
  height u32, input_dim u32, count u32), then per item an identity id u32
  followed by input_dim float32 values;
* checkpoints: magic ``BMNCK1``, version u32, a length-prefixed JSON blob
  with the model/target/train configuration, then each parameter array as
  a (rows u32, cols u32) header plus float64 entries in a fixed order.

Readers validate everything before returning and report byte offsets in
error messages; they never hand back partially decoded data.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, sections_from_dict, sections_to_dict
from .errors import ConfigError, DatasetError, FormatError
from .model import (
    LayerParams,
    ModelConfig,
    ModelParams,
    feature_widths_chain,
    metricnet_widths,
)
from .targets import TargetSpec

log = logging.getLogger(__name__)

MODALITY_VECTOR = 0
MODALITY_IMAGE = 1

DATASET_MAGIC = b"BMNDS1"
_DATASET_HEADER = struct.Struct("<BIIII")

CHECKPOINT_MAGIC = b"BMNCK1"
CHECKPOINT_VERSION = 1

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def configure_logging() -> None:
    """Set global log verbosity from BMN_LOG_LEVEL (error|info|debug)."""
    name = os.environ.get("BMN_LOG_LEVEL", "info").strip().lower()
    if name not in _LOG_LEVELS:
        raise ConfigError(
            f"BMN_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {name!r}"
        )
    logging.basicConfig(
        level=_LOG_LEVELS[name],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger().setLevel(_LOG_LEVELS[name])


@dataclass
class Dataset:
    """Identity-labeled input vectors.

    ``features`` is (n, input_dim) float32 exactly as stored on disk, so a
    write/read cycle is bit-exact. Identity ids are dense from 0. Image
    modality records the (width, height) the flip operates on; vector
    modality stores zeros there.
    """

    modality: int
    width: int
    height: int
    features: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint32)
        if self.features.ndim != 2:
            raise DatasetError(
                f"features must be (items, input_dim), got shape {self.features.shape}"
            )
        if self.ids.shape != (self.features.shape[0],):
            raise DatasetError(
                f"ids shape {self.ids.shape} does not match "
                f"{self.features.shape[0]} items"
            )
        if self.modality == MODALITY_IMAGE:
            if self.width < 1 or self.height < 1:
                raise DatasetError(
                    f"image modality needs positive width/height, "
                    f"got {self.width}x{self.height}"
                )
            if self.width * self.height != self.input_dim:
                raise DatasetError(
                    f"width*height = {self.width * self.height} does not match "
                    f"input_dim = {self.input_dim}"
                )
        elif self.modality == MODALITY_VECTOR:
            if self.width != 0 or self.height != 0:
                raise DatasetError(
                    "vector modality must store zero width/height, "
                    f"got {self.width}x{self.height}"
                )
        else:
            raise DatasetError(f"unknown modality tag {self.modality}")
        if self.n_items > 0:
            present = np.unique(self.ids)
            expected = np.arange(present.size, dtype=np.uint32)
            if not np.array_equal(present, expected):
                raise DatasetError(
                    "identity ids must be dense from 0; "
                    f"found {present[:8].tolist()}..."
                )

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_items(self) -> int:
        return self.features.shape[0]

    @property
    def n_identities(self) -> int:
        return 0 if self.n_items == 0 else int(self.ids.max()) + 1

    @property
    def normalized(self) -> bool:
        """True when every entry sits in [-1, 1] (not a stored field; the
        wire format has no slot for it, so it is derived)."""
        return self.n_items == 0 or bool(np.all(np.abs(self.features) <= 1.0))

    def items_of(self, identity: int) -> np.ndarray:
        """Row indices belonging to one identity."""
        return np.flatnonzero(self.ids == identity)

    def identity_index(self) -> list[np.ndarray]:
        """Row indices grouped by identity, position = id."""
        order = np.argsort(self.ids, kind="stable")
        bounds = np.searchsorted(self.ids[order], np.arange(self.n_identities + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(self.n_identities)]

    def flip(self, x: np.ndarray) -> np.ndarray:
        """Mirror inputs: images flip horizontally ((x, y) -> (width-x-1, y)),
        vectors reverse their coordinates. Involutive either way."""
        x = np.asarray(x)
        batched = x.ndim == 2
        rows = x.reshape(-1, self.input_dim)
        if self.modality == MODALITY_IMAGE:
            out = rows.reshape(-1, self.height, self.width)[:, :, ::-1].reshape(
                -1, self.input_dim
            )
        else:
            out = rows[:, ::-1]
        out = np.ascontiguousarray(out)
        return out if batched else out.reshape(x.shape)


@dataclass(frozen=True)
class SyntheticSpec:
    """Identity-cluster generator settings.

    Each identity is an isotropic Gaussian cluster: center drawn with scale
    ``sigma_b``, items scattered around it with scale ``sigma_w``. The
    whole set is squashed into [-1, 1] by its global max-abs.
    """

    n_identities: int = 50
    images_per_identity: int = 20
    input_dim: int = 16
    sigma_w: float = 0.1
    sigma_b: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if self.n_identities < 1 or self.images_per_identity < 1 or self.input_dim < 1:
            raise ConfigError("all synthetic counts must be >= 1")
        if self.sigma_w < 0.0 or not self.sigma_b > 0.0:
            raise ConfigError(
                f"need sigma_w >= 0 and sigma_b > 0, "
                f"got {self.sigma_w}, {self.sigma_b}"
            )
        if not self.sigma_w < self.sigma_b:
            raise ConfigError(
                "clusters must be separable by construction: "
                f"sigma_w ({self.sigma_w}) must be < sigma_b ({self.sigma_b})"
            )


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic cluster dataset; same spec -> byte-identical file."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.sigma_b, size=(spec.n_identities, spec.input_dim))
    noise = rng.normal(
        0.0,
        spec.sigma_w,
        size=(spec.n_identities, spec.images_per_identity, spec.input_dim),
    )
    items = (centers[:, None, :] + noise).reshape(-1, spec.input_dim)
    peak = np.abs(items).max()
    if peak > 0.0:
        items = items / peak
    ids = np.repeat(
        np.arange(spec.n_identities, dtype=np.uint32), spec.images_per_identity
    )
    return Dataset(
        modality=MODALITY_VECTOR,
        width=0,
        height=0,
        features=items.astype(np.float32),
        ids=ids,
    )


def subset_identities(dataset: Dataset, identities) -> Dataset:
    """New dataset holding only the given identities, ids re-densified.

    Identities keep their relative order: the smallest selected id becomes
    0, the next 1, and so on.
    """
    wanted = np.unique(np.asarray(list(identities), dtype=np.int64))
    if wanted.size == 0:
        raise DatasetError("cannot build a subset of zero identities")
    if wanted.min() < 0 or wanted.max() >= max(dataset.n_identities, 1):
        raise DatasetError(
            f"identities out of range [0, {dataset.n_identities}): "
            f"{wanted[:8].tolist()}"
        )
    keep = np.isin(dataset.ids, wanted.astype(np.uint32))
    remap = {int(old): new for new, old in enumerate(wanted)}
    new_ids = np.array(
        [remap[int(i)] for i in dataset.ids[keep]], dtype=np.uint32
    )
    return Dataset(
        modality=dataset.modality,
        width=dataset.width,
        height=dataset.height,
        features=dataset.features[keep].copy(),
        ids=new_ids,
    )


def write_dataset(dataset: Dataset, path) -> None:
    parts = [
        DATASET_MAGIC,
        _DATASET_HEADER.pack(
            dataset.modality,
            dataset.width,
            dataset.height,
            dataset.input_dim,
            dataset.n_items,
        ),
    ]
    for i in range(dataset.n_items):
        parts.append(struct.pack("<I", int(dataset.ids[i])))
        parts.append(dataset.features[i].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < len(DATASET_MAGIC) or data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError(
            f"{path}: bad magic at offset 0, expected {DATASET_MAGIC!r}"
        )
    header_end = len(DATASET_MAGIC) + _DATASET_HEADER.size
    if len(data) < header_end:
        raise FormatError(
            f"{path}: truncated header, need {header_end} bytes, have {len(data)}"
        )
    modality, width, height, input_dim, count = _DATASET_HEADER.unpack_from(
        data, len(DATASET_MAGIC)
    )
    if input_dim < 1:
        raise FormatError(f"{path}: input_dim must be >= 1, got {input_dim}")
    item_size = 4 + 4 * input_dim
    expected = header_end + count * item_size
    if len(data) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {count} items, "
            f"got {len(data)} (diverges at offset {min(expected, len(data))})"
        )
    record = np.dtype([("id", "<u4"), ("x", "<f4", (input_dim,))])
    items = np.frombuffer(data, dtype=record, count=count, offset=header_end)
    ids = items["id"].astype(np.uint32)
    if count > 0:
        present = np.unique(ids)
        if not np.array_equal(present, np.arange(present.size, dtype=np.uint32)):
            # an id >= the distinct count proves a gap below it
            first_bad = int(np.flatnonzero(ids >= present.size)[0])
            raise FormatError(
                f"{path}: identity ids have gaps (max id {ids.max()} over "
                f"{present.size} distinct ids; item {first_bad} at offset "
                f"{header_end + first_bad * item_size})"
            )
    try:
        return Dataset(
            modality=modality,
            width=width,
            height=height,
            features=items["x"].reshape(count, input_dim).copy(),
            ids=ids,
        )
    except DatasetError as exc:
        raise FormatError(f"{path}: {exc} (header at offset 6)") from exc


@dataclass(frozen=True)
class CheckpointData:
    """Everything a checkpoint stores."""

    params: ModelParams
    model: ModelConfig
    targets: TargetSpec
    train: TrainConfig


def expected_shapes(model: ModelConfig) -> list[tuple[int, int]]:
    """Array shapes in serialization order: per layer, weight then bias."""
    shapes = []
    for fan_in, fan_out in feature_widths_chain(model) + metricnet_widths(
        model.d, model.p
    ):
        shapes.append((fan_in, fan_out))
        shapes.append((1, fan_out))
    return shapes


def save_checkpoint(
    path,
    params: ModelParams,
    model: ModelConfig,
    targets: TargetSpec,
    train: TrainConfig,
) -> None:
    blob = json.dumps(sections_to_dict(model, targets, train)).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(blob)),
        blob,
    ]
    arrays = [a for _, a, _ in params.arrays()]
    shapes = expected_shapes(model)
    if [a.shape for a in arrays] != shapes:
        raise FormatError(
            "parameter shapes do not match the declared architecture; "
            "refusing to write an unloadable checkpoint"
        )
    for arr in arrays:
        parts.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> CheckpointData:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(
            f"{path}: bad magic at offset 0, expected {CHECKPOINT_MAGIC!r}"
        )
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 8:
        raise FormatError(f"{path}: truncated before config blob at offset {offset}")
    (version,) = struct.unpack_from("<I", data, offset)
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {version}, "
            f"this reader handles version {CHECKPOINT_VERSION}"
        )
    offset += 4
    (blob_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) < offset + blob_len:
        raise FormatError(
            f"{path}: config blob runs past end of file (offset {offset}, "
            f"need {blob_len} bytes)"
        )
    try:
        doc = json.loads(data[offset : offset + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(
            f"{path}: corrupt config blob at offset {offset}: {exc}"
        ) from exc
    try:
        model, targets, train = sections_from_dict(doc)
    except ConfigError as exc:
        raise FormatError(f"{path}: invalid stored configuration: {exc}") from exc
    offset += blob_len

    arrays = []
    for shape in expected_shapes(model):
        if len(data) < offset + 8:
            raise FormatError(
                f"{path}: truncated shape header at offset {offset}"
            )
        rows, cols = struct.unpack_from("<II", data, offset)
        if (rows, cols) != shape:
            raise FormatError(
                f"{path}: shape chain violation at offset {offset}: "
                f"expected {shape}, found ({rows}, {cols})"
            )
        offset += 8
        nbytes = rows * cols * 8
        if len(data) < offset + nbytes:
            raise FormatError(
                f"{path}: array data truncated at offset {offset}, "
                f"need {nbytes} bytes"
            )
        arr = (
            np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset)
            .reshape(rows, cols)
            .copy()
        )
        offset += nbytes
        arrays.append(arr)
    if offset != len(data):
        raise FormatError(
            f"{path}: {len(data) - offset} trailing bytes after offset {offset}"
        )

    n_feature = len(feature_widths_chain(model))
    layers = [
        LayerParams(w=arrays[2 * i], b=arrays[2 * i + 1])
        for i in range(len(arrays) // 2)
    ]
    params = ModelParams(
        feature_layers=layers[:n_feature], metric_layers=layers[n_feature:]
    )
    return CheckpointData(params=params, model=model, targets=targets, train=train)
