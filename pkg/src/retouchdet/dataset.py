"""Corpus manifests, reference/probe pairing and training-set selection."""

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .align import LandmarkSet
from .errors import (DuplicateSample, MissingFile, MissingVariant,
                     SchemaViolation, UnknownApp)

COLUMNS = ("subject_id", "role", "manipulation", "compression", "image_path",
           "session", "landmarks_path")
ROLES = ("reference", "probe")
COMPRESSIONS = ("original", "jpeg", "jpeg2000")
BONA_FIDE = "bona_fide"


@dataclass(frozen=True)
class FaceSample:
    subject_id: str
    role: str
    app: Optional[str]  # None means bona fide
    compression: str
    image_path: Path
    landmarks: Optional[LandmarkSet] = None
    session: Optional[str] = None
    landmarks_path: Optional[Path] = field(default=None, compare=False)

    @property
    def manipulation(self) -> str:
        return BONA_FIDE if self.app is None else f"app:{self.app}"

    @property
    def is_bona_fide(self) -> bool:
        return self.app is None

    @property
    def key(self) -> tuple:
        return (self.subject_id, str(self.image_path))


@dataclass(frozen=True)
class DetectionPair:
    reference: FaceSample
    probe: FaceSample

    def __post_init__(self):
        if self.reference.subject_id != self.probe.subject_id:
            raise ValueError("pair members belong to different subjects")


@dataclass(frozen=True)
class Manifest:
    name: str
    samples: tuple
    root: Optional[Path] = None

    def __len__(self):
        return len(self.samples)

    @property
    def references(self):
        return [s for s in self.samples if s.role == "reference"]

    @property
    def probes(self):
        return [s for s in self.samples if s.role == "probe"]

    @property
    def apps(self):
        return sorted({s.app for s in self.samples if s.app is not None})

    @property
    def subjects(self):
        return sorted({s.subject_id for s in self.samples})

    def sample_id(self, sample: FaceSample) -> str:
        """Stable identifier, relative to the manifest directory when possible."""
        if self.root is not None:
            try:
                return Path(os.path.relpath(sample.image_path, self.root)).as_posix()
            except ValueError:
                pass
        return sample.image_path.as_posix()


def parse_manipulation(value: str) -> Optional[str]:
    value = value.strip()
    if value == BONA_FIDE:
        return None
    if value.startswith("app:") and len(value) > 4:
        return value[4:]
    raise ValueError(f"manipulation must be 'bona_fide' or 'app:<name>', got {value!r}")


def load_landmarks(path) -> LandmarkSet:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"landmark file not found: {path}")
    try:
        data = json.loads(path.read_text())
        return LandmarkSet(left_eye=tuple(map(float, data["left_eye"])),
                           right_eye=tuple(map(float, data["right_eye"])),
                           nose_tip=tuple(map(float, data["nose_tip"])))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"bad landmark file {path}: {exc}") from exc


def save_landmarks(landmarks: LandmarkSet, path):
    Path(path).write_text(json.dumps({
        "left_eye": list(landmarks.left_eye),
        "right_eye": list(landmarks.right_eye),
        "nose_tip": list(landmarks.nose_tip),
    }))


def load_manifest(path, name=None) -> Manifest:
    """Read a manifest CSV and check every sample invariant.

    Relative image and landmark paths are resolved against the manifest's
    directory. Row order is preserved.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    root = path.parent.resolve()
    samples = []
    seen = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(COLUMNS) - set(reader.fieldnames):
            raise SchemaViolation(f"header must contain columns {','.join(COLUMNS)}", row=0)
        for lineno, row in enumerate(reader, start=2):
            sample = _parse_row(row, lineno, root)
            if sample.key in seen:
                raise DuplicateSample(f"row {lineno}: duplicate sample {sample.key}")
            seen.add(sample.key)
            samples.append(sample)
    return Manifest(name=name or path.stem, samples=tuple(samples), root=root)


def _parse_row(row, lineno, root) -> FaceSample:
    if any(row.get(c) is None for c in COLUMNS):
        raise SchemaViolation("missing fields", row=lineno)
    subject = row["subject_id"].strip()
    if not subject:
        raise SchemaViolation("empty subject_id", row=lineno)
    role = row["role"].strip()
    if role not in ROLES:
        raise SchemaViolation(f"unknown role {role!r}", row=lineno)
    try:
        app = parse_manipulation(row["manipulation"])
    except ValueError as exc:
        raise SchemaViolation(str(exc), row=lineno) from None
    compression = row["compression"].strip()
    if compression not in COMPRESSIONS:
        raise SchemaViolation(f"unknown compression {compression!r}", row=lineno)
    if role == "probe" and (app is not None or compression != "original"):
        raise SchemaViolation("probes must be bona_fide and original", row=lineno)

    image_path = (root / row["image_path"].strip()).resolve()
    if not image_path.is_file():
        raise SchemaViolation(f"image does not exist: {image_path}", row=lineno)
    landmarks = None
    lm_path = None
    if row["landmarks_path"].strip():
        lm_path = (root / row["landmarks_path"].strip()).resolve()
        try:
            landmarks = load_landmarks(lm_path)
        except MissingFile:
            raise SchemaViolation(f"landmark file does not exist: {lm_path}", row=lineno) from None
    return FaceSample(subject_id=subject, role=role, app=app, compression=compression,
                      image_path=image_path, landmarks=landmarks,
                      session=row["session"].strip() or None, landmarks_path=lm_path)


def save_manifest(manifest: Manifest, path):
    """Write ``manifest`` as CSV with paths relative to the output file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for s in manifest.samples:
            lm = "" if s.landmarks_path is None else _rel(s.landmarks_path, base)
            writer.writerow([s.subject_id, s.role, s.manipulation, s.compression,
                             _rel(s.image_path, base), s.session or "", lm])


def _rel(p, base):
    return Path(os.path.relpath(Path(p).resolve(), base)).as_posix()


def build_pairs(manifest: Manifest) -> list:
    """Every reference of a subject paired with every probe of that subject."""
    refs, probes = {}, {}
    for s in manifest.samples:
        (refs if s.role == "reference" else probes).setdefault(s.subject_id, []).append(s)
    pairs = []
    for subject in sorted(refs):
        for r in sorted(refs[subject], key=lambda s: str(s.image_path)):
            for p in sorted(probes.get(subject, ()), key=lambda s: str(s.image_path)):
                pairs.append(DetectionPair(r, p))
    return pairs


def select_training_set(manifests, excluded_app: str) -> list:
    """Bona fide references plus one retouched variant each, apps taken round-robin.

    The i-th bona fide reference (manifest order) contributes its variant from
    the (i mod m)-th of the m remaining apps, sorted alphabetically. Only
    uncompressed samples are considered.
    """
    if isinstance(manifests, Manifest):
        manifests = [manifests]
    apps = sorted({a for m in manifests for a in m.apps})
    if excluded_app not in apps:
        raise UnknownApp(f"app {excluded_app!r} not among {apps}")
    remaining = [a for a in apps if a != excluded_app]

    selected = []
    i = 0
    for m in manifests:
        refs = [s for s in m.references if s.compression == "original"]
        variants = {}
        seen_per_subject = {}
        for s in refs:
            if s.app is not None:
                variants.setdefault((s.subject_id, s.app), []).append(s)
        for s in refs:
            if not s.is_bona_fide:
                continue
            selected.append(s)
            if remaining:
                app = remaining[i % len(remaining)]
                found = variants.get((s.subject_id, app))
                if not found:
                    raise MissingVariant(s.subject_id, app)
                # k-th bona fide reference of a subject takes the k-th variant
                k = seen_per_subject.get(s.subject_id, 0)
                seen_per_subject[s.subject_id] = k + 1
                selected.append(found[min(k, len(found) - 1)])
            i += 1
    return selected
