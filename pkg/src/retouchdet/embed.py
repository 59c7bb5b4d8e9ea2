"""Deep face representation backends (512-float embeddings).

The face network is external. Backends implement ``source_id`` and
``embed(path) -> np.ndarray``; :func:`get_embedding` validates the output and
caches it by image content hash.
"""

import hashlib
import shlex
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import (BackendUnavailable, LengthMismatch, MalformedOutput,
                     MissingEntry, MissingFile)

EMBEDDING_DIM = 512


@dataclass(frozen=True, eq=False)
class Embedding:
    vector: np.ndarray
    source_id: str


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def parse_vector(text: str) -> np.ndarray:
    try:
        values = np.array([float(tok) for tok in text.split()], dtype=float)
    except ValueError as exc:
        raise MalformedOutput(f"non-numeric embedding value: {exc}") from None
    check_vector(values)
    return values


def check_vector(values):
    if values.shape != (EMBEDDING_DIM,):
        raise MalformedOutput(f"expected {EMBEDDING_DIM} values, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise MalformedOutput("embedding contains non-finite values")


def format_vector(values) -> str:
    return " ".join(repr(float(v)) for v in values) + "\n"


class PrecomputedStore:
    """Directory of ``<sha256-of-image>.vec`` files."""

    def __init__(self, directory, source_id=None):
        self.directory = Path(directory)
        self.source_id = source_id or f"store:{self.directory.name}"

    def embed(self, image_path):
        entry = self.directory / f"{file_sha256(image_path)}.vec"
        if not entry.is_file():
            raise MissingEntry(f"no precomputed embedding for {image_path} in {self.directory}")
        return parse_vector(entry.read_text())


class ExternalCommand:
    """Runs ``<cmd> <image_path>`` and parses 512 decimals from stdout."""

    def __init__(self, command, source_id=None, timeout=300):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise BackendUnavailable("empty embedding command")
        self.source_id = source_id or f"cmd:{Path(self.argv[0]).name}"
        self.timeout = timeout

    def embed(self, image_path):
        try:
            proc = subprocess.run(self.argv + [str(image_path)], capture_output=True,
                                  text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise BackendUnavailable(f"embedding command failed: {exc}") from None
        if proc.returncode != 0:
            raise BackendUnavailable(
                f"embedding command exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        return parse_vector(proc.stdout)


class LowFrequencyStub:
    """Deterministic test backend: seeded projection of a blurred 16x16 luma thumbnail.

    Only coarse geometry and shading survive the blur and downsampling, so the
    output barely moves under JPEG/JPEG 2000 artifacts but follows changes in
    eye size or face shape.
    """

    grid = 16

    def __init__(self, seed=0, sigma=3.0):
        self.seed = seed
        self.sigma = sigma
        rng = np.random.default_rng(seed)
        n = self.grid * self.grid
        self.projection = rng.standard_normal((EMBEDDING_DIM, n)) / np.sqrt(n)
        self.source_id = f"stub:lowfreq:{seed}"

    def thumbnail(self, image_path):
        with Image.open(image_path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=float)
        luma = rgb @ np.array([0.299, 0.587, 0.114])
        blurred = gaussian_filter(luma, self.sigma, mode="nearest").astype(np.float32)
        thumb = Image.fromarray(blurred, mode="F").resize((self.grid, self.grid), Image.BOX)
        return np.asarray(thumb, dtype=float) / 255.0

    def embed(self, image_path):
        return self.projection @ self.thumbnail(image_path).ravel()


class EmbeddingCache:
    """On-disk store keyed by (source_id, image hash) with serialized writes."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def _path(self, source_id, digest):
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in source_id)
        return self.directory / safe / f"{digest}.vec"

    def get(self, source_id, digest):
        path = self._path(source_id, digest)
        with self._lock:
            if not path.is_file():
                return None
            return parse_vector(path.read_text())

    def put(self, source_id, digest, values):
        path = self._path(source_id, digest)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_text(format_vector(values))
            tmp.replace(path)


def get_embedding(backend, image_path, cache=None) -> Embedding:
    image_path = Path(image_path)
    if not image_path.is_file():
        raise MissingFile(f"image not found: {image_path}")
    digest = file_sha256(image_path) if cache is not None else None
    if cache is not None:
        hit = cache.get(backend.source_id, digest)
        if hit is not None:
            return Embedding(hit, backend.source_id)
    values = np.asarray(backend.embed(image_path), dtype=float)
    check_vector(values)
    if cache is not None:
        cache.put(backend.source_id, digest, values)
    return Embedding(values, backend.source_id)


def embedding_difference(reference, probe) -> np.ndarray:
    """Element-wise reference minus probe."""
    ref = np.asarray(getattr(reference, "vector", reference), dtype=float)
    prb = np.asarray(getattr(probe, "vector", probe), dtype=float)
    if ref.shape != (EMBEDDING_DIM,) or prb.shape != (EMBEDDING_DIM,):
        raise LengthMismatch(f"embeddings must have {EMBEDDING_DIM} values, "
                             f"got {ref.size} and {prb.size}")
    return ref - prb


def make_backend(spec: str):
    """Build a backend from ``stub[:seed]``, ``store:<dir>`` or ``cmd:<command>``."""
    kind, _, arg = spec.partition(":")
    if kind == "stub":
        return LowFrequencyStub(seed=int(arg) if arg else 0)
    if kind == "store":
        return PrecomputedStore(arg)
    if kind == "cmd":
        return ExternalCommand(arg)
    raise BackendUnavailable(f"unknown backend spec {spec!r}; use stub, store:<dir> or cmd:<command>")
