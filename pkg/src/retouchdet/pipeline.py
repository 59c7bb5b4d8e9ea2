"""Feature assembly for the single-image and differential scenarios, plus z-normalization."""

import hashlib
import threading
from dataclasses import dataclass

import numpy as np

from . import align, texdesc
from .embed import get_embedding
from .errors import EmptyTrainingSet, LengthMismatch, MixedKinds, SchemaViolation

KIND_LENGTHS = {
    "td_single": 4096,
    "td_diff": 4096,
    "dfr_single": 512,
    "dfr_diff": 512,
}
STD_FLOOR = 1e-8


def feature_kind(feature: str, scenario: str) -> str:
    suffix = {"single": "single", "differential": "diff", "diff": "diff"}.get(scenario)
    if feature not in ("td", "dfr") or suffix is None:
        raise SchemaViolation(f"unknown feature/scenario {feature!r}/{scenario!r}")
    return f"{feature}_{suffix}"


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in KIND_LENGTHS:
            raise SchemaViolation(f"unknown feature kind {self.kind!r}")
        v = np.asarray(self.values, dtype=float)
        if v.shape != (KIND_LENGTHS[self.kind],):
            raise LengthMismatch(f"{self.kind} needs {KIND_LENGTHS[self.kind]} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise SchemaViolation("feature contains non-finite values")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


def make_single_feature(sample_feature, kind) -> FeatureVector:
    return FeatureVector(sample_feature, kind)


def make_differential_feature(reference_feature, probe_feature, kind) -> FeatureVector:
    ref = np.asarray(reference_feature, dtype=float)
    prb = np.asarray(probe_feature, dtype=float)
    if ref.shape != prb.shape:
        raise LengthMismatch(f"reference has {ref.size} values, probe {prb.size}")
    return FeatureVector(ref - prb, kind)


@dataclass(frozen=True, eq=False)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @property
    def n_features(self):
        return self.mean.size

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean, dtype=float).tobytes())
        h.update(np.ascontiguousarray(self.std, dtype=float).tobytes())
        return h.hexdigest()

    def transform(self, matrix):
        m = np.asarray(matrix, dtype=float)
        if m.shape[-1] != self.n_features:
            raise LengthMismatch(f"normalizer expects {self.n_features} values, got {m.shape[-1]}")
        return (m - self.mean) / self.std


def _as_matrix(features):
    if isinstance(features, np.ndarray):
        return features.astype(float), None
    features = list(features)
    kinds = {f.kind for f in features}
    if len(kinds) > 1:
        raise MixedKinds(f"training features mix kinds {sorted(kinds)}")
    if not features:
        return np.empty((0, 0)), None
    return np.vstack([f.values for f in features]), kinds.pop()


def fit_normalizer(training_features) -> Normalizer:
    """Per-element mean and population std; near-constant elements get std 1."""
    x, _ = _as_matrix(training_features)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EmptyTrainingSet("need at least two training features")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return Normalizer(mean, std)


def apply_normalizer(norm: Normalizer, f: FeatureVector) -> FeatureVector:
    return FeatureVector(norm.transform(f.values), f.kind)


class FeatureExtractor:
    """Per-image TD / DFR features with an in-memory cache keyed by image path.

    Thread-safe: concurrent callers may compute the same entry twice but
    always store identical values.
    """

    def __init__(self, bank=None, backend=None, embed_cache=None):
        self.bank = bank
        self.backend = backend
        self.embed_cache = embed_cache
        self._cache = {}
        self._lock = threading.Lock()

    def td(self, sample):
        if self.bank is None:
            raise SchemaViolation("TD features need a filter bank")
        key = ("td", str(sample.image_path))
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        if sample.landmarks is None:
            raise SchemaViolation(f"sample {sample.image_path} has no landmarks")
        crop = align.aligned_nose_crop(align.load_rgb(sample.image_path), sample.landmarks)
        values = texdesc.td_feature(crop, self.bank)
        with self._lock:
            self._cache[key] = values
        return values

    def dfr(self, sample):
        if self.backend is None:
            raise SchemaViolation("DFR features need an embedding backend")
        key = ("dfr", self.backend.source_id, str(sample.image_path))
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        values = get_embedding(self.backend, sample.image_path, self.embed_cache).vector
        with self._lock:
            self._cache[key] = values
        return values

    def raw(self, feature, sample):
        return self.td(sample) if feature == "td" else self.dfr(sample)

    def single(self, feature, sample) -> FeatureVector:
        return make_single_feature(self.raw(feature, sample), feature_kind(feature, "single"))

    def differential(self, feature, pair) -> FeatureVector:
        return make_differential_feature(self.raw(feature, pair.reference),
                                         self.raw(feature, pair.probe),
                                         feature_kind(feature, "differential"))
