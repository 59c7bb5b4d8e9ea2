"""Leave-one-app-out, cross-database experiment runner and report writer."""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import codec, evalmetrics
from .classify import BONA_FIDE, RETOUCHED, SvmConfig, fit_detector, predict_scores, save_model
from .dataset import Manifest, build_pairs, load_manifest, select_training_set
from .embed import EmbeddingCache, make_backend
from .errors import ConfigError, IoError, RetouchError
from .pipeline import FeatureExtractor, feature_kind
from .texdesc import default_bank, load_filter_bank

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

CONDITION_TITLES = {"original": "Original", "jpeg": "JPEG", "jpeg2000": "JPEG 2000"}


@dataclass
class ExperimentConfig:
    train_manifest: Path
    test_manifest: Path
    feature: str = "td"
    scenario: str = "single"
    apps: list = field(default_factory=list)
    compression_conditions: list = field(default_factory=lambda: ["original"])
    bank_path: Optional[Path] = None
    backend: str = "stub"
    output_dir: Path = Path("results")
    seed: int = 0
    jobs: Optional[int] = None
    embed_cache: Optional[Path] = None
    compressed_dir: Optional[Path] = None
    compression_mode: str = "dataset_average"
    jpeg_target_kb: float = 20
    jpeg2000_target_kb: float = 15

    def __post_init__(self):
        for name in ("train_manifest", "test_manifest", "output_dir", "bank_path",
                     "embed_cache", "compressed_dir"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, Path(v))
        if self.feature not in ("td", "dfr"):
            raise ConfigError(f"feature must be td or dfr, got {self.feature!r}")
        if self.scenario not in ("single", "differential"):
            raise ConfigError(f"scenario must be single or differential, got {self.scenario!r}")
        bad = set(self.compression_conditions) - set(CONDITION_TITLES)
        if bad or not self.compression_conditions:
            raise ConfigError(f"unknown compression conditions {sorted(bad)}")
        self.apps = list(self.apps)
        self.compression_conditions = list(self.compression_conditions)

    @property
    def kind(self):
        return feature_kind(self.feature, self.scenario)

    def target_bytes(self, condition):
        kb = self.jpeg_target_kb if condition == "jpeg" else self.jpeg2000_target_kb
        return int(round(kb * 1024))


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a TOML experiment config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = ExperimentConfig.__dataclass_fields__
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for key in ("train_manifest", "test_manifest"):
        if key not in data:
            raise ConfigError(f"config lacks {key}")
    base = path.parent
    for key in ("train_manifest", "test_manifest", "output_dir", "bank_path",
                "embed_cache", "compressed_dir"):
        if data.get(key) is not None and not Path(data[key]).is_absolute():
            data[key] = base / data[key]
    return ExperimentConfig(**data)


@dataclass
class CellResult:
    app: str
    condition: str
    status: str = "ok"
    d_eer: Optional[float] = None
    n_attack: int = 0
    n_bona_fide: int = 0
    scores: Optional[str] = None
    det: Optional[str] = None
    model: Optional[str] = None
    error: Optional[str] = None


@dataclass
class ExperimentReport:
    feature: str = ""
    scenario: str = ""
    train_corpus: str = ""
    test_corpus: str = ""
    apps: list = field(default_factory=list)
    conditions: list = field(default_factory=list)
    cells: list = field(default_factory=list)

    def cell(self, app, condition):
        for c in self.cells:
            if c.app == app and c.condition == condition:
                return c
        return None

    def _mean(self, cells):
        vals = [c.d_eer for c in cells if c.status == "ok" and c.d_eer is not None]
        return float(np.mean(vals)) if vals else None

    def row_averages(self):
        return {a: self._mean([c for c in self.cells if c.app == a]) for a in self.apps}

    def column_averages(self):
        return {k: self._mean([c for c in self.cells if c.condition == k]) for k in self.conditions}

    def to_dict(self):
        return {
            "feature": self.feature,
            "scenario": self.scenario,
            "train_corpus": self.train_corpus,
            "test_corpus": self.test_corpus,
            "apps": list(self.apps),
            "conditions": list(self.conditions),
            "cells": [asdict(c) for c in self.cells],
            "row_averages": self.row_averages(),
            "column_averages": self.column_averages(),
            "overall_average": self._mean(self.cells),
        }


def _restrict_apps(manifest: Manifest, apps) -> Manifest:
    keep = set(apps)
    samples = tuple(s for s in manifest.samples if s.app is None or s.app in keep)
    return Manifest(manifest.name, samples, manifest.root)


def _source_fingerprint(manifest: Manifest, condition, target_bytes, mode):
    h = hashlib.sha256(f"{condition}|{target_bytes}|{mode}".encode())
    for s in manifest.samples:
        h.update(f"{s.subject_id}|{s.role}|{s.manipulation}|{s.image_path}".encode())
    return h.hexdigest()


def condition_manifest(test: Manifest, condition, config: ExperimentConfig) -> Manifest:
    """Test corpus view for one compression condition.

    Uses variants already listed in the manifest; otherwise compresses the
    original references (cached under ``compressed_dir``).
    """
    probes = [s for s in test.samples if s.role == "probe"]
    refs = [s for s in test.samples if s.role == "reference" and s.compression == condition]
    if refs or condition == "original":
        return Manifest(test.name, tuple(refs + probes), test.root)
    originals = Manifest(test.name, tuple(
        s for s in test.samples if s.role == "probe" or s.compression == "original"), test.root)
    target = codec.CompressionTarget(condition, config.target_bytes(condition), config.compression_mode)
    out_dir = (config.compressed_dir or config.output_dir / "compressed") / condition
    stamp = out_dir / "source.sha256"
    fp = _source_fingerprint(originals, condition, target.target_bytes, target.mode)
    if stamp.is_file() and stamp.read_text().strip() == fp and (out_dir / "manifest.csv").is_file():
        cached = load_manifest(out_dir / "manifest.csv", name=test.name)
        return cached
    log.info("compressing %d references of %s with %s", len(originals.references), test.name, condition)
    result, report = codec.compress_manifest(originals, target, out_dir, jobs=config.jobs or 1)
    log.info("%s: mean %.0f B (min %d, max %d)", condition, report.mean, report.min, report.max)
    stamp.write_text(fp + "\n")
    return result


def training_units(train: Manifest, selected, scenario):
    """(unit, label) list; units are samples (single) or pairs (differential)."""
    labels = []
    units = []
    if scenario == "single":
        for s in selected:
            units.append(s)
            labels.append(BONA_FIDE if s.is_bona_fide else RETOUCHED)
        return units, labels
    chosen = {s.key for s in selected}
    for pair in build_pairs(train):
        if pair.reference.key in chosen:
            units.append(pair)
            labels.append(BONA_FIDE if pair.reference.is_bona_fide else RETOUCHED)
    return units, labels


def _raw(extractor, feature, unit):
    if hasattr(unit, "probe"):
        return extractor.differential(feature, unit).values
    return extractor.single(feature, unit).values


def _unit_id(manifest, unit):
    if hasattr(unit, "probe"):
        return f"{manifest.sample_id(unit.reference)}|{manifest.sample_id(unit.probe)}"
    return manifest.sample_id(unit)


def evaluate_condition(model, test: Manifest, scenario, compression, extractor, app=None):
    """Score every test unit of one condition.

    Returns (ScoreSet, rows) with rows of (sample_id, is_attack, score).
    Differential units always pair a reference with the original probes.
    """
    feature = model.kind.split("_")[0]
    refs = [s for s in test.samples if s.role == "reference" and s.compression == compression
            and (app is None or s.app is None or s.app == app)]
    if scenario == "single":
        units = refs
    else:
        sub = Manifest(test.name, tuple(refs + [s for s in test.samples if s.role == "probe"]), test.root)
        units = build_pairs(sub)
    rows = []
    if units:
        x = np.vstack([_raw(extractor, feature, u) for u in units])
        scores = predict_scores(model, x)
        for u, sc in zip(units, scores):
            ref = u.reference if hasattr(u, "probe") else u
            rows.append((_unit_id(test, u), not ref.is_bona_fide, float(sc)))
    attack = np.array([r[2] for r in rows if r[1]])
    bona = np.array([r[2] for r in rows if not r[1]])
    return evalmetrics.ScoreSet(attack, bona), rows


class HygieneError(RetouchError, AssertionError):
    code = "protocol_violation"


def check_training_hygiene(selected, excluded_app, test: Manifest):
    """Assert the leave-one-out protocol on a training selection."""
    if any(s.app == excluded_app for s in selected):
        raise HygieneError(f"held-out app {excluded_app} present in training")
    if any(s.compression != "original" for s in selected):
        raise HygieneError("compressed samples present in training")
    test_paths = {str(s.image_path) for s in test.samples}
    leaked = [s for s in selected if str(s.image_path) in test_paths]
    if leaked:
        raise HygieneError(f"{len(leaked)} test samples present in training")


def make_extractor(config: ExperimentConfig) -> FeatureExtractor:
    bank = backend = None
    if config.feature == "td":
        bank = load_filter_bank(config.bank_path) if config.bank_path else default_bank()
    else:
        backend = make_backend(config.backend)
    cache = EmbeddingCache(config.embed_cache) if config.embed_cache else None
    return FeatureExtractor(bank=bank, backend=backend, embed_cache=cache)


def run_leave_one_out(config: ExperimentConfig, extractor=None) -> ExperimentReport:
    train = load_manifest(config.train_manifest)
    test = load_manifest(config.test_manifest)
    if train.name == test.name:
        raise ConfigError(f"train and test corpora are both named {train.name!r}; "
                          "the protocol is cross-database")
    apps = config.apps or sorted(set(train.apps) & set(test.apps))
    missing = [a for a in apps if a not in train.apps or a not in test.apps]
    if missing:
        raise ConfigError(f"apps {missing} missing from train or test corpus")
    if len(apps) < 2:
        raise ConfigError("leave-one-app-out needs at least two apps")
    train = _restrict_apps(train, apps)
    test = _restrict_apps(test, apps)
    extractor = extractor or make_extractor(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = config.jobs or os.cpu_count() or 1

    report = ExperimentReport(feature=config.feature, scenario=config.scenario,
                              train_corpus=train.name, test_corpus=test.name,
                              apps=list(apps), conditions=list(config.compression_conditions))
    views = {}
    for cond in config.compression_conditions:
        try:
            views[cond] = condition_manifest(test, cond, config)
        except RetouchError as exc:
            views[cond] = exc

    def run_app(app):
        cells = []
        model_name = f"model_{app}.json"
        try:
            selected = select_training_set(train, app)
            check_training_hygiene(selected, app, test)
            units, labels = training_units(train, selected, config.scenario)
            x = np.vstack([_raw(extractor, config.feature, u) for u in units])
            model = fit_detector(x, labels, config.kind, SvmConfig(seed=config.seed))
            save_model(model, out / model_name)
        except RetouchError as exc:
            return [CellResult(app, c, status="failed", error=f"{exc.code}: {exc}")
                    for c in config.compression_conditions]
        fingerprint = model.normalizer.fingerprint()
        for cond in config.compression_conditions:
            cell = CellResult(app, cond, model=model_name)
            view = views[cond]
            try:
                if isinstance(view, Exception):
                    raise view
                scores, rows = evaluate_condition(model, view, config.scenario, cond, extractor, app)
                cell.scores = f"scores_{app}_{cond}.csv"
                evalmetrics.write_scores_csv(rows, out / cell.scores)
                cell.n_attack = int(scores.attack_scores.size)
                cell.n_bona_fide = int(scores.bona_fide_scores.size)
                curve = evalmetrics.det_curve(scores)
                cell.det = f"det_{app}_{cond}.csv"
                evalmetrics.write_det_csv(curve, out / cell.det)
                cell.d_eer = evalmetrics.d_eer(curve)
            except RetouchError as exc:
                cell.status = "failed"
                cell.error = f"{exc.code}: {exc}"
            cells.append(cell)
        if model.normalizer.fingerprint() != fingerprint:
            raise HygieneError("normalizer changed during evaluation")
        return cells

    with ThreadPoolExecutor(max_workers=max(1, min(jobs, len(apps)))) as pool:
        for cells in pool.map(run_app, apps):
            report.cells.extend(cells)
    return report


def _fmt(v):
    return "failed" if v is None else f"{v:.2f}"


def format_table(report: ExperimentReport) -> str:
    conds = report.conditions
    title = (f"D-EER (%) {report.feature.upper()} {report.scenario}, "
             f"train: {report.train_corpus}, test: {report.test_corpus}")
    head = ["Retouching"] + [CONDITION_TITLES[c] for c in conds]
    rows = []
    for app in report.apps:
        rows.append([app] + [_fmt(getattr(report.cell(app, c), "d_eer", None)) for c in conds])
    cols = report.column_averages()
    rows.append(["Average"] + [_fmt(cols[c]) for c in conds])
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    line = lambda r: "  ".join(v.ljust(w) if i == 0 else v.rjust(w)
                               for i, (v, w) in enumerate(zip(r, widths)))
    sep = "-" * len(line(head))
    return "\n".join([title, sep, line(head), sep] + [line(r) for r in rows[:-1]]
                     + [sep, line(rows[-1]), sep]) + "\n"


def write_report(report: ExperimentReport, out_dir):
    """Write report.json and report.txt; identical reports give identical bytes."""
    out_dir = Path(out_dir)
    json_path = out_dir / "report.json"
    txt_path = out_dir / "report.txt"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        txt_path.write_text(format_table(report))
    except OSError as exc:
        raise IoError(f"cannot write report to {out_dir}: {exc}") from None
    return json_path, txt_path


def load_report(path) -> ExperimentReport:
    data = json.loads(Path(path).read_text())
    return ExperimentReport(feature=data["feature"], scenario=data["scenario"],
                            train_corpus=data["train_corpus"], test_corpus=data["test_corpus"],
                            apps=data["apps"], conditions=data["conditions"],
                            cells=[CellResult(**c) for c in data["cells"]])
