import json
from dataclasses import replace

import numpy as np
import pytest

from retouchdet import harness
from retouchdet.classify import predict_score
from retouchdet.dataset import Manifest, load_manifest, select_training_set
from retouchdet.errors import ConfigError, EmptyClass
from retouchdet.evalmetrics import det_curve
from retouchdet.harness import (CellResult, ExperimentConfig, ExperimentReport, HygieneError,
                                check_training_hygiene, evaluate_condition, format_table,
                                load_config, run_leave_one_out, write_report)

TWO_APPS = ["AirBrush", "Bestie"]


@pytest.fixture(scope="module")
def corpora(small_corpus):
    root, train, test = small_corpus
    return root, load_manifest(train), load_manifest(test)


def config(small_corpus, tmp_path, **kw):
    root, train, test = small_corpus
    base = dict(train_manifest=train, test_manifest=test, apps=TWO_APPS,
                compression_conditions=["original", "jpeg"], output_dir=tmp_path / "out",
                compressed_dir=root / "compressed", jobs=1)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def td_run(small_corpus, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("td")
    cfg = config(small_corpus, tmp)
    return cfg, run_leave_one_out(cfg)


def test_report_structure(td_run):
    cfg, report = td_run
    assert [(c.app, c.condition) for c in report.cells] == [
        ("AirBrush", "original"), ("AirBrush", "jpeg"), ("Bestie", "original"), ("Bestie", "jpeg")]
    assert all(c.status == "ok" for c in report.cells)
    d = report.to_dict()
    assert set(d["row_averages"]) == set(TWO_APPS)
    assert set(d["column_averages"]) == {"original", "jpeg"}
    for cond, avg in d["column_averages"].items():
        vals = [c.d_eer for c in report.cells if c.condition == cond]
        assert abs(avg - sum(vals) / len(vals)) <= 1e-9
    for app, avg in d["row_averages"].items():
        vals = [c.d_eer for c in report.cells if c.app == app]
        assert abs(avg - sum(vals) / len(vals)) <= 1e-9


def test_td_beats_chance(td_run):
    _, report = td_run
    assert report.cell("AirBrush", "original").d_eer < 50
    assert report.column_averages()["original"] < 50


def test_per_cell_files(td_run):
    cfg, report = td_run
    out = cfg.output_dir
    for c in report.cells:
        assert (out / c.scores).is_file() and (out / c.det).is_file() and (out / c.model).is_file()
    assert (out / "scores_AirBrush_jpeg.csv").is_file()
    assert (out / "model_Bestie.json").is_file()


def test_deterministic_reports(small_corpus, tmp_path, td_run):
    cfg, first = td_run
    again = run_leave_one_out(replace(cfg, output_dir=tmp_path / "again"))
    a, _ = write_report(first, tmp_path / "r1")
    b, _ = write_report(again, tmp_path / "r2")
    assert a.read_bytes() == b.read_bytes()
    # idempotent rewrite
    c, _ = write_report(first, tmp_path / "r1")
    assert c.read_bytes() == a.read_bytes()


def test_hygiene_on_real_selection(corpora):
    _, train, test = corpora
    for app in train.apps:
        sel = select_training_set(train, app)
        check_training_hygiene(sel, app, test)
        test_ids = {str(s.image_path) for s in test.samples}
        assert not test_ids & {str(s.image_path) for s in sel}
        assert all(s.app != app and s.compression == "original" for s in sel)


def test_hygiene_violations(corpora):
    _, train, test = corpora
    sel = select_training_set(train, "Bestie")
    with pytest.raises(HygieneError):
        check_training_hygiene(sel, sel[1].app, test)
    with pytest.raises(HygieneError):
        check_training_hygiene(sel + [test.references[0]], "Bestie", test)
    with pytest.raises(HygieneError):
        check_training_hygiene(sel + [replace(sel[0], compression="jpeg")], "Bestie", test)


def test_single_score_matches_standalone(td_run, corpora):
    cfg, _ = td_run
    _, train, test = corpora
    from retouchdet.classify import load_model
    model = load_model(cfg.output_dir / "model_AirBrush.json")
    ext = harness.make_extractor(cfg)
    scores, rows = evaluate_condition(model, test, "single", "original", ext, "AirBrush")
    ref = test.references[0]
    standalone = predict_score(model, ext.single("td", ref))
    got = dict((sid, sc) for sid, _, sc in rows)[test.sample_id(ref)]
    assert got == standalone
    assert scores.attack_scores.size + scores.bona_fide_scores.size == len(rows)


def test_all_bona_fide_surfaces_empty_class(td_run, corpora):
    cfg, _ = td_run
    _, _, test = corpora
    from retouchdet.classify import load_model
    model = load_model(cfg.output_dir / "model_AirBrush.json")
    bona_only = Manifest(test.name, tuple(s for s in test.samples if s.is_bona_fide), test.root)
    scores, rows = evaluate_condition(model, bona_only, "single", "original",
                                      harness.make_extractor(cfg))
    assert rows and scores.attack_scores.size == 0
    with pytest.raises(EmptyClass):
        det_curve(scores)


class RecordingExtractor:
    def __init__(self, inner):
        self.inner = inner
        self.pairs = []

    def differential(self, feature, pair):
        self.pairs.append(pair)
        return self.inner.differential(feature, pair)

    def single(self, feature, sample):
        return self.inner.single(feature, sample)


def test_differential_uses_original_probes(small_corpus, tmp_path, corpora):
    cfg = config(small_corpus, tmp_path, feature="dfr", scenario="differential",
                 apps=TWO_APPS)
    rec = RecordingExtractor(harness.make_extractor(cfg))
    report = run_leave_one_out(cfg, rec)
    assert all(c.status == "ok" for c in report.cells)
    jpeg_pairs = [p for p in rec.pairs if p.reference.compression == "jpeg"]
    assert jpeg_pairs
    assert all(p.probe.compression == "original" for p in rec.pairs)
    _, _, test = corpora
    originals = {str(s.image_path) for s in test.probes}
    assert all(str(p.probe.image_path) in originals for p in jpeg_pairs)


def test_failed_cells_reported(small_corpus, tmp_path):
    cfg = config(small_corpus, tmp_path, feature="dfr", backend=f"store:{tmp_path}/empty")
    (tmp_path / "empty").mkdir()
    report = run_leave_one_out(cfg)
    assert len(report.cells) == 4
    assert all(c.status == "failed" and c.error.startswith("missing_entry") for c in report.cells)
    json_path, txt_path = write_report(report, tmp_path / "rep")
    assert "failed" in txt_path.read_text()
    assert json.loads(json_path.read_text())["column_averages"] == {"jpeg": None, "original": None}


def test_config_validation(small_corpus, tmp_path):
    root, train, _ = small_corpus
    with pytest.raises(ConfigError):
        run_leave_one_out(config(small_corpus, tmp_path, test_manifest=train))
    with pytest.raises(ConfigError):
        run_leave_one_out(config(small_corpus, tmp_path, apps=["AirBrush"]))
    with pytest.raises(ConfigError):
        ExperimentConfig(train, train, feature="lbp")
    with pytest.raises(ConfigError):
        ExperimentConfig(train, train, compression_conditions=["webp"])


def test_load_config(tmp_path):
    (tmp_path / "c.toml").write_text('train_manifest = "a.csv"\ntest_manifest = "/abs/b.csv"\n'
                                     'feature = "dfr"\nseed = 3\n')
    cfg = load_config(tmp_path / "c.toml", seed=9, jobs=None)
    assert cfg.train_manifest == tmp_path / "a.csv"
    assert str(cfg.test_manifest) == "/abs/b.csv"
    assert cfg.seed == 9 and cfg.feature == "dfr"
    (tmp_path / "bad.toml").write_text('train_manifest = "a"\ntest_manifest = "b"\ncolour = 1\n')
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
    (tmp_path / "broken.toml").write_text("train_manifest = \n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.toml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_empty_report_schema(tmp_path):
    json_path, _ = write_report(ExperimentReport(), tmp_path)
    data = json.loads(json_path.read_text())
    assert data["cells"] == [] and data["overall_average"] is None


def test_six_by_three_table(tmp_path):
    apps = ["AirBrush", "BeautyPlus", "Bestie", "FotoRus", "InstaBeauty", "YouCamPerfect"]
    conds = ["original", "jpeg", "jpeg2000"]
    rng = np.random.default_rng(0)
    rep = ExperimentReport("td", "single", "A", "B", apps, conds,
                           [CellResult(a, c, d_eer=float(rng.uniform(0, 50))) for a in apps for c in conds])
    d = rep.to_dict()
    assert len(d["cells"]) == 18 and len(d["column_averages"]) == 3 and len(d["row_averages"]) == 6
    table = format_table(rep)
    assert table.count("\n") == 1 + 3 + 6 + 1 + 1 + 1
    assert "JPEG 2000" in table and "Average" in table
    loaded = harness.load_report(write_report(rep, tmp_path)[0])
    assert loaded.to_dict() == d
