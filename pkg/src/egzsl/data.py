"""Dataset bundles, model checkpoints and the synthetic shift generator.

Bundle layout (format_version 1), one directory::

    meta.json        format_version, n_samples, feature_dim, attr_dim,
                     n_classes, n_seen, endianness ("little")
    features.bin     n_samples x feature_dim float32, row-major, little-endian
    labels.bin       n_samples uint32, little-endian
    attributes.bin   n_classes x attr_dim float32, row-major, little-endian
    splits.json      seen_classes, unseen_classes, base_indices, test_indices

Checkpoint layout (format_version 1), one file::

    8 bytes   magic b"EGZSLCKP"
    4 bytes   uint32 little-endian length L of the JSON header
    L bytes   UTF-8 JSON {"class_count", "feature_dim", "format_version"}
    rest      W as class_count x feature_dim float64, row-major, little-endian

Float32 values are widened to float64 on load.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import AttributeTable, CompatibilityModel

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"EGZSLCKP"
META_KEYS = ("format_version", "n_samples", "feature_dim", "attr_dim", "n_classes", "n_seen", "endianness")
SPLIT_KEYS = ("seen_classes", "unseen_classes", "base_indices", "test_indices")


@dataclass
class DatasetBundle:
    features: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    seen_classes: np.ndarray
    unseen_classes: np.ndarray
    base_indices: np.ndarray
    test_indices: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        for name in SPLIT_KEYS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        self.validate()

    @property
    def n_classes(self) -> int:
        return self.attributes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def attribute_table(self) -> AttributeTable:
        return AttributeTable.from_raw(self.attributes)

    @property
    def base_features(self) -> np.ndarray:
        return self.features[self.base_indices]

    @property
    def base_labels(self) -> np.ndarray:
        return self.labels[self.base_indices]

    @property
    def test_features(self) -> np.ndarray:
        return self.features[self.test_indices]

    @property
    def test_labels(self) -> np.ndarray:
        return self.labels[self.test_indices]

    def validate(self) -> None:
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise FormatError("features must be 2-D", "feature_dim")
        if self.labels.shape != (n,):
            raise FormatError(f"expected {n} labels, got {self.labels.size}", "n_samples")
        if self.attributes.ndim != 2:
            raise FormatError("attributes must be 2-D", "attr_dim")
        n_classes = self.n_classes
        if n and (self.labels.min() < 0 or self.labels.max() >= n_classes):
            raise FormatError(f"labels must lie in [0, {n_classes})", "labels")
        seen, unseen = self.seen_classes, self.unseen_classes
        if np.intersect1d(seen, unseen).size:
            raise FormatError("seen and unseen classes overlap", "unseen_classes")
        union = np.union1d(seen, unseen)
        if union.size != seen.size + unseen.size or not np.array_equal(union, np.arange(n_classes)):
            raise FormatError("seen and unseen classes must partition [0, n_classes)", "seen_classes")
        for name in ("base_indices", "test_indices"):
            idx = getattr(self, name)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise FormatError(f"{name} out of range", name)
            if np.unique(idx).size != idx.size:
                raise FormatError(f"{name} has duplicates", name)
        if np.intersect1d(self.base_indices, self.test_indices).size:
            raise FormatError("base and test indices overlap", "test_indices")
        if not np.all(np.isin(self.labels[self.base_indices], seen)):
            raise FormatError("base split holds unseen-class samples", "base_indices")


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def save_bundle(bundle: DatasetBundle, path) -> None:
    bundle.validate()
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {path}: {exc}") from exc
    meta = {
        "format_version": FORMAT_VERSION,
        "n_samples": int(bundle.features.shape[0]),
        "feature_dim": int(bundle.feature_dim),
        "attr_dim": int(bundle.attributes.shape[1]),
        "n_classes": int(bundle.n_classes),
        "n_seen": int(bundle.seen_classes.size),
        "endianness": "little",
    }
    splits = {k: getattr(bundle, k).tolist() for k in SPLIT_KEYS}
    _write(path / "meta.json", _dump_json(meta))
    _write(path / "features.bin", bundle.features.astype("<f4").tobytes())
    _write(path / "labels.bin", bundle.labels.astype("<u4").tobytes())
    _write(path / "attributes.bin", bundle.attributes.astype("<f4").tobytes())
    _write(path / "splits.json", _dump_json(splits))


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise FileNotFoundError(f"missing bundle file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path.name} is not valid JSON: {exc}", path.name) from exc


def _read_array(path: Path, dtype: str, count: int, field_name: str) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"missing bundle file: {path}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != count * itemsize:
        raise FormatError(
            f"{path.name} holds {len(raw)} bytes, meta.json {field_name} implies {count * itemsize}",
            field_name,
        )
    return np.frombuffer(raw, dtype=dtype)


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"bundle directory not found: {path}")
    meta = _read_json(path / "meta.json")
    for key in META_KEYS:
        if key not in meta:
            raise FormatError(f"meta.json lacks {key}", key)
    if meta["format_version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {meta['format_version']}", "format_version")
    if meta["endianness"] != "little":
        raise FormatError("only little-endian bundles are supported", "endianness")
    for key in META_KEYS[1:-1]:
        if not isinstance(meta[key], int) or meta[key] < 0:
            raise FormatError(f"{key} must be a nonnegative integer", key)

    n, d, da, nc = meta["n_samples"], meta["feature_dim"], meta["attr_dim"], meta["n_classes"]
    labels_raw = _read_array(path / "labels.bin", "<u4", n, "n_samples")
    features = _read_array(path / "features.bin", "<f4", n * d, "feature_dim")
    attributes = _read_array(path / "attributes.bin", "<f4", nc * da, "n_classes")
    splits = _read_json(path / "splits.json")
    for key in SPLIT_KEYS:
        if key not in splits:
            raise FormatError(f"splits.json lacks {key}", key)
    if len(splits["seen_classes"]) != meta["n_seen"]:
        raise FormatError("n_seen disagrees with seen_classes", "n_seen")
    if labels_raw.size and int(labels_raw.max()) >= nc:
        raise FormatError(f"label {int(labels_raw.max())} outside [0, n_classes={nc})", "n_classes")
    seen_unseen = len(splits["seen_classes"]) + len(splits["unseen_classes"])
    if seen_unseen != nc:
        raise FormatError(f"n_classes={nc} but splits list {seen_unseen} classes", "n_classes")

    return DatasetBundle(
        features=features.reshape(n, d).astype(np.float64),
        labels=labels_raw.astype(np.int64),
        attributes=attributes.reshape(nc, da).astype(np.float64),
        seen_classes=splits["seen_classes"],
        unseen_classes=splits["unseen_classes"],
        base_indices=splits["base_indices"],
        test_indices=splits["test_indices"],
    )


def save_checkpoint(model: CompatibilityModel, path) -> None:
    header = json.dumps(
        {"class_count": model.class_count, "feature_dim": model.feature_dim,
         "format_version": FORMAT_VERSION},
        sort_keys=True,
    ).encode()
    payload = CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header
    _write(Path(path), payload + model.W.astype("<f8").tobytes())


def load_checkpoint(path) -> CompatibilityModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 12:
        raise FormatError(f"{path} is not a checkpoint", "magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad checkpoint header: {exc}", "header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError("unsupported checkpoint format_version", "format_version")
    rows, cols = header["class_count"], header["feature_dim"]
    body = raw[12 + hlen:]
    if len(body) != rows * cols * 8:
        raise FormatError("checkpoint body does not match class_count x feature_dim", "class_count")
    return CompatibilityModel(np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64))


@dataclass(frozen=True)
class SynthConfig:
    num_seen: int = 6
    num_unseen: int = 3
    d_x: int = 32
    d_a: int = 12
    base_per_class: int = 200
    test_per_class: int = 200
    cluster_spread: float = 1.0
    attribute_map_noise: float = 0.0
    # std of the ground-truth attribute-to-feature map entries
    map_scale: float = 1.0
    # when set, attributes are unit-Gaussian in a random rank-r subspace of R^d_a
    attribute_rank: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("num_seen", "num_unseen", "d_x", "d_a", "base_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.cluster_spread > 0:
            raise ValueError("cluster_spread must be positive")
        if self.attribute_map_noise < 0:
            raise ValueError("attribute_map_noise must be nonnegative")
        if self.attribute_rank is not None and not 1 <= self.attribute_rank <= self.d_a:
            raise ValueError("attribute_rank must lie in [1, d_a]")


def _f32(a: np.ndarray) -> np.ndarray:
    # keep only float32-representable values so save/load round-trips bitwise
    return a.astype(np.float32).astype(np.float64)


def synth_generate(config: SynthConfig) -> DatasetBundle:
    """Gaussian class blobs whose means come from a linear attribute map.

    Unseen-class means use a perturbed copy of the map, so a model that only
    learned the seen-class map extrapolates imperfectly to unseen classes.
    Classes ``0..num_seen-1`` are seen, the rest unseen.
    """
    c = config
    rng = np.random.default_rng(c.seed)
    n_classes = c.num_seen + c.num_unseen
    if c.attribute_rank is None:
        attrs = rng.standard_normal((n_classes, c.d_a))
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((c.d_a, c.attribute_rank)))
        attrs = rng.standard_normal((n_classes, c.attribute_rank)) @ basis.T
    attrs /= np.linalg.norm(attrs, axis=1, keepdims=True)

    M = c.map_scale * rng.standard_normal((c.d_a, c.d_x))
    M_unseen = M + c.attribute_map_noise * c.map_scale * rng.standard_normal((c.d_a, c.d_x))
    means = attrs @ M
    means[c.num_seen:] = attrs[c.num_seen:] @ M_unseen

    blocks, labels = [], []
    for y in range(c.num_seen):
        blocks.append(means[y] + c.cluster_spread * rng.standard_normal((c.base_per_class, c.d_x)))
        labels.append(np.full(c.base_per_class, y))
    n_base = c.num_seen * c.base_per_class
    for y in range(n_classes):
        blocks.append(means[y] + c.cluster_spread * rng.standard_normal((c.test_per_class, c.d_x)))
        labels.append(np.full(c.test_per_class, y))

    features = np.concatenate(blocks)
    return DatasetBundle(
        features=_f32(features),
        labels=np.concatenate(labels),
        attributes=_f32(attrs),
        seen_classes=np.arange(c.num_seen),
        unseen_classes=np.arange(c.num_seen, n_classes),
        base_indices=np.arange(n_base),
        test_indices=np.arange(n_base, features.shape[0]),
        info={"class_means": means},
    )


def nearest_mean_accuracy(bundle: DatasetBundle, means=None) -> float:
    """Test accuracy of assigning each test sample to the closest class mean."""
    means = bundle.info["class_means"] if means is None else np.asarray(means)
    X = bundle.test_features
    d2 = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == bundle.test_labels))
