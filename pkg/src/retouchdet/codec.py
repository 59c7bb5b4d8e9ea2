"""Rate-controlled JPEG / JPEG 2000 compression of reference images."""

import csv
import io
import logging
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import align
from .dataset import Manifest, save_manifest
from .errors import EncoderFailure, SchemaViolation

log = logging.getLogger(__name__)

DEFAULT_TARGETS = {"jpeg": 20 * 1024, "jpeg2000": 15 * 1024}
Q_MIN, Q_MAX = 1, 100


@dataclass(frozen=True)
class CompressionTarget:
    codec: str
    target_bytes: int = None
    mode: str = "dataset_average"

    def __post_init__(self):
        if self.codec not in DEFAULT_TARGETS:
            raise SchemaViolation(f"unknown codec {self.codec!r}")
        if self.target_bytes is None:
            object.__setattr__(self, "target_bytes", DEFAULT_TARGETS[self.codec])
        if self.target_bytes < 1024:
            raise SchemaViolation("target must be at least 1024 bytes")
        if self.mode not in ("dataset_average", "per_image"):
            raise SchemaViolation(f"unknown mode {self.mode!r}")


def _to_image(image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return Image.fromarray(arr)


def _decode(data: bytes):
    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except Exception as exc:
        raise EncoderFailure(f"cannot decode stream: {exc}") from None


class JpegAdapter:
    name = "jpeg"
    extension = ".jpg"

    def encode(self, image, q):
        buf = io.BytesIO()
        try:
            _to_image(image).save(buf, format="JPEG", quality=int(q))
        except (OSError, ValueError) as exc:
            raise EncoderFailure(f"JPEG encoding failed: {exc}") from None
        return buf.getvalue()

    def decode(self, data):
        return _decode(data)


def quality_to_ratio(q, max_ratio=400.0):
    """Map quality 1..100 onto a compression ratio max_ratio..1 (geometric)."""
    return float(max_ratio ** ((Q_MAX - q) / (Q_MAX - Q_MIN)))


class Jpeg2000Adapter:
    """JPEG 2000 through Pillow/OpenJPEG, quality mapped to a target compression ratio."""
    name = "jpeg2000"
    extension = ".jp2"

    def __init__(self, max_ratio=400.0):
        self.max_ratio = max_ratio

    def encode(self, image, q):
        buf = io.BytesIO()
        try:
            _to_image(image).save(buf, format="JPEG2000", quality_mode="rates",
                                  quality_layers=[quality_to_ratio(q, self.max_ratio)],
                                  irreversible=True)
        except (OSError, ValueError) as exc:
            raise EncoderFailure(f"JPEG 2000 encoding failed: {exc}") from None
        return buf.getvalue()

    def decode(self, data):
        return _decode(data)


class ExternalEncoderAdapter:
    """Encoder behind a command template with ``{in}``, ``{out}`` and ``{rate}`` fields.

    ``{in}`` is a PNG written by us, ``{out}`` must be produced by the command,
    ``{rate}`` is the compression ratio for the requested quality. Output is
    decoded with Pillow.
    """

    def __init__(self, template, name="jpeg2000", extension=".jp2", max_ratio=400.0):
        self.template = template
        self.name = name
        self.extension = extension
        self.max_ratio = max_ratio

    def encode(self, image, q):
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / "in.png"
            dst = Path(tmp) / f"out{self.extension}"
            _to_image(image).save(src, format="PNG")
            rate = quality_to_ratio(q, self.max_ratio)
            argv = [tok.format(**{"in": str(src), "out": str(dst), "rate": f"{rate:.6g}"})
                    for tok in shlex.split(self.template)]
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=300)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise EncoderFailure(f"external encoder failed: {exc}") from None
            if proc.returncode != 0 or not dst.is_file():
                raise EncoderFailure(f"external encoder exited with {proc.returncode}")
            return dst.read_bytes()

    def decode(self, data):
        return _decode(data)


def make_adapter(codec, encoder_cmd=None):
    if encoder_cmd:
        return ExternalEncoderAdapter(encoder_cmd, name=codec,
                                      extension=".jpg" if codec == "jpeg" else ".jp2")
    if codec == "jpeg":
        return JpegAdapter()
    if codec == "jpeg2000":
        return Jpeg2000Adapter()
    raise SchemaViolation(f"unknown codec {codec!r}")


@dataclass(frozen=True)
class QualityResult:
    quality: int
    size: float  # bytes, or mean bytes in dataset mode
    oversize: bool = False


def _search(size_of, target_bytes):
    """Largest q with size_of(q) <= target under a monotone assumption.

    Binary search, then a +/-2 neighborhood scan and a final upward check so
    that size(q) <= target < size(q + 1) holds even for slightly non-monotone
    encoders.
    """
    sizes = {}

    def size(q):
        if q not in sizes:
            sizes[q] = size_of(q)
        return sizes[q]

    if size(Q_MIN) > target_bytes:
        return QualityResult(Q_MIN, size(Q_MIN), oversize=True)
    lo, hi = Q_MIN, Q_MAX  # size(lo) <= target
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if size(mid) <= target_bytes:
            lo = mid
        else:
            hi = mid - 1
    q = lo
    for cand in range(min(Q_MAX, q + 2), max(Q_MIN, q - 2) - 1, -1):
        if size(cand) <= target_bytes:
            if cand != q:
                log.info("non-monotone encoder: q=%d preferred over %d", cand, q)
            q = cand
            break
    while q < Q_MAX and size(q + 1) <= target_bytes:
        q += 1
    return QualityResult(q, size(q))


def search_quality_per_image(adapter, image, target_bytes) -> QualityResult:
    return _search(lambda q: len(adapter.encode(image, q)), target_bytes)


def _verify_from(size_of, target_bytes, q):
    """Walk from a starting guess until size(q) <= target < size(q + 1)."""
    while q > Q_MIN and size_of(q) > target_bytes:
        q -= 1
    if size_of(q) > target_bytes:
        return QualityResult(Q_MIN, size_of(Q_MIN), oversize=True)
    while q < Q_MAX and size_of(q + 1) <= target_bytes:
        q += 1
    return QualityResult(q, size_of(q))


SUBSET_SIZE = 24


def search_quality_dataset_average(adapter, images, target_bytes, jobs=1, streams=None):
    """One quality for all images so that their mean encoded size stays within target.

    Large sets are searched on an evenly spaced subset first; the answer is
    then verified (and moved if needed) on the full set, which gives the same
    result as searching the full set when mean size grows with quality.
    ``streams``, if given, receives the encoded bytes at the returned quality.
    """
    images = list(images)
    if not images:
        raise SchemaViolation("need at least one image")
    encoded = {}

    def mean_size(subset, keep=False):
        def run(q):
            with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
                data = list(pool.map(lambda im: adapter.encode(im, q), subset))
            if keep:
                encoded[q] = data
            return float(np.mean([len(d) for d in data]))
        return run

    full = _memo(mean_size(images, keep=True))
    if len(images) <= SUBSET_SIZE:
        result = _search(full, target_bytes)
    else:
        step = len(images) / SUBSET_SIZE
        subset = [images[int(i * step)] for i in range(SUBSET_SIZE)]
        hint = _search(mean_size(subset), target_bytes)
        result = _verify_from(full, target_bytes, hint.quality)
    if streams is not None:
        if result.quality not in encoded:
            full(result.quality)
        streams.extend(encoded[result.quality])
    return result


def _memo(fn):
    cache = {}

    def wrapped(q):
        if q not in cache:
            cache[q] = fn(q)
        return cache[q]
    return wrapped


@dataclass
class SizesReport:
    rows: list  # (image_path, quality, bytes)

    @property
    def sizes(self):
        return [r[2] for r in self.rows]

    @property
    def mean(self):
        return float(np.mean(self.sizes)) if self.rows else 0.0

    @property
    def min(self):
        return min(self.sizes) if self.rows else 0

    @property
    def max(self):
        return max(self.sizes) if self.rows else 0

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_path", "quality", "bytes"])
            w.writerows(self.rows)


def compress_manifest(manifest: Manifest, target: CompressionTarget, out_dir,
                      adapter=None, jobs=1):
    """Compress every original reference; probes are passed through untouched.

    Writes the coded streams under ``streams/``, decoded PNG copies next to
    them, ``sizes.csv`` and ``manifest.csv``. Returns (manifest, SizesReport).
    """
    adapter = adapter or make_adapter(target.codec)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    refs = [s for s in manifest.samples if s.role == "reference" and s.compression == "original"]
    rel = {s: _rel_stem(manifest, s) for s in refs}

    def load(s):
        return align.load_rgb(s.image_path)

    workers = max(1, jobs)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        images = list(pool.map(load, refs))

    if target.mode == "dataset_average" and refs:
        streams = []
        result = search_quality_dataset_average(adapter, images, target.target_bytes, jobs, streams)
        precomputed = dict(zip(refs, streams))
        if result.oversize:
            log.warning("mean size at q=1 is %.0f B, above target %d B", result.size, target.target_bytes)
        qualities = [result.quality] * len(refs)
    else:
        precomputed = {}

        def per_image(im):
            r = search_quality_per_image(adapter, im, target.target_bytes)
            return r.quality
        with ThreadPoolExecutor(max_workers=workers) as pool:
            qualities = list(pool.map(per_image, images))

    def encode_one(args):
        s, im, q = args
        stem = rel[s]
        try:
            data = precomputed.get(s) or adapter.encode(im, q)
            decoded = adapter.decode(data)
        except EncoderFailure as exc:
            raise EncoderFailure(f"{s.image_path}: {exc}") from None
        if decoded.shape[:2] != im.shape[:2]:
            raise EncoderFailure(f"{s.image_path}: decoded size {decoded.shape} != {im.shape}")
        stream = out_dir / "streams" / (stem + adapter.extension)
        stream.parent.mkdir(parents=True, exist_ok=True)
        stream.write_bytes(data)
        png = out_dir / (stem + ".png")
        align.save_png(decoded if decoded.ndim == 3 else np.stack([decoded] * 3, -1), png)
        return replace(s, compression=target.codec, image_path=png.resolve()), (
            Path(stem + adapter.extension).as_posix(), q, len(data))

    with ThreadPoolExecutor(max_workers=workers) as pool:
        done = dict(zip(refs, pool.map(encode_one, zip(refs, images, qualities))))

    samples = []
    for s in manifest.samples:
        if s.role == "probe":
            samples.append(s)
        elif s in done:
            samples.append(done[s][0])
    report = SizesReport(sorted(row for _, row in done.values()))
    out = Manifest(name=manifest.name, samples=tuple(samples), root=out_dir.resolve())
    report.write_csv(out_dir / "sizes.csv")
    save_manifest(out, out_dir / "manifest.csv")
    return out, report


def _rel_stem(manifest, sample):
    sid = manifest.sample_id(sample)
    if sid.startswith("/") or sid.startswith(".."):
        sid = f"{sample.subject_id}/{sample.image_path.name}"
    return str(Path(sid).with_suffix(""))
