"""Command line entry point: ``retouchdet <subcommand> ...``.

Exit codes: 0 success, 1 domain error (``error_code: message`` on stderr),
2 usage error.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, align, codec, evalmetrics, harness, synth
from .classify import SvmConfig, fit_detector, load_model, predict_scores, save_model
from .dataset import load_landmarks, load_manifest, select_training_set
from .embed import EmbeddingCache, format_vector, get_embedding, make_backend
from .errors import RetouchError, SchemaViolation
from .pipeline import FeatureExtractor, feature_kind
from .texdesc import default_bank, load_filter_bank, td_feature


def _bank(path):
    return load_filter_bank(path) if path else default_bank()


def _extractor(args, feature):
    if feature == "td":
        return FeatureExtractor(bank=_bank(args.bank))
    cache = EmbeddingCache(args.embed_cache) if args.embed_cache else None
    return FeatureExtractor(backend=make_backend(args.backend), embed_cache=cache)


def _write_vector(values, out):
    text = format_vector(values)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_align(args):
    image = align.load_rgb(args.image)
    lm = load_landmarks(args.landmarks)
    lm.validate(image.shape[1], image.shape[0])
    aligned, nose = align.align_face(image, lm)
    align.save_png(aligned, args.out)
    if args.crop_out:
        align.save_png(align.crop_nose_region(aligned, nose), args.crop_out)
    print(f"nose_tip {nose[0]:.3f} {nose[1]:.3f}")


def cmd_bsif(args):
    image = align.load_rgb(args.image)
    if args.landmarks:
        crop = align.aligned_nose_crop(image, load_landmarks(args.landmarks))
    else:
        crop = align.to_gray(image)
    _write_vector(td_feature(crop, _bank(args.bank)), args.out)


def cmd_embed(args):
    cache = EmbeddingCache(args.embed_cache) if args.embed_cache else None
    emb = get_embedding(make_backend(args.backend), args.image, cache)
    _write_vector(emb.vector, args.out)


def cmd_compress(args):
    manifest = load_manifest(args.manifest)
    mode = "dataset_average" if args.mode == "avg" else "per_image"
    target = codec.CompressionTarget(args.codec, int(round(args.target_kb * 1024)), mode)
    adapter = codec.make_adapter(args.codec, args.encoder_cmd)
    _, report = codec.compress_manifest(manifest, target, args.out, adapter=adapter, jobs=args.jobs)
    print(f"compressed {len(report.rows)} references: mean {report.mean:.0f} B, "
          f"min {report.min} B, max {report.max} B")


def _units(manifest, selected, scenario):
    return harness.training_units(manifest, selected, scenario)


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    selected = select_training_set(manifest, args.exclude_app)
    units, labels = harness.training_units(manifest, selected, args.scenario)
    ext = _extractor(args, args.feature)
    x = np.vstack([harness._raw(ext, args.feature, u) for u in units])
    model = fit_detector(x, labels, feature_kind(args.feature, args.scenario), SvmConfig(seed=args.seed))
    save_model(model, args.out)
    print(f"trained on {len(units)} units, {model.support_vectors.shape[0]} support vectors")


def cmd_score(args):
    model = load_model(args.model)
    manifest = load_manifest(args.manifest)
    scenario = "differential" if model.kind.endswith("_diff") else "single"
    ext = _extractor(args, model.kind.split("_")[0])
    scores, rows = harness.evaluate_condition(model, manifest, scenario, args.condition, ext, args.app)
    if args.out:
        evalmetrics.write_scores_csv(rows, args.out)
    else:
        for sid, is_attack, sc in rows:
            print(f"{sid},{'attack' if is_attack else 'bona_fide'},{sc!r}")


def cmd_eval(args):
    scores = evalmetrics.read_scores_csv(args.scores)
    curve = evalmetrics.det_curve(scores)
    if args.det:
        evalmetrics.write_det_csv(curve, args.det)
    eer = evalmetrics.d_eer(curve)
    print(f"D-EER {eer:.2f}%  CCR {evalmetrics.ccr_at_eer(eer):.2f}%  "
          f"(attacks {scores.attack_scores.size}, bona fide {scores.bona_fide_scores.size})")


def cmd_experiment(args):
    config = harness.load_config(args.config, seed=args.seed, jobs=args.jobs,
                                 output_dir=args.out, feature=args.feature, scenario=args.scenario)
    report = harness.run_leave_one_out(config)
    json_path, txt_path = harness.write_report(report, config.output_dir)
    sys.stdout.write(txt_path.read_text())
    failed = [c for c in report.cells if c.status != "ok"]
    for c in failed:
        print(f"cell {c.app}/{c.condition} failed: {c.error}", file=sys.stderr)
    print(f"report: {json_path}")


def cmd_synth(args):
    train, test, cfg = synth.generate(args.out, n_train=args.train_subjects,
                                      n_test=args.test_subjects, seed=args.seed)
    print(f"train manifest: {train}\ntest manifest: {test}\nconfig: {cfg}")


def build_parser():
    p = argparse.ArgumentParser(prog="retouchdet", description="Facial retouching detection toolkit")
    p.add_argument("--version", action="version", version=f"retouchdet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    def feature_opts(sp):
        sp.add_argument("--bank", help="BSIF filter bank file (default: bundled test bank)")
        sp.add_argument("--backend", default="stub",
                        help="embedding backend: stub[:seed], store:<dir> or cmd:<command>")
        sp.add_argument("--embed-cache", help="directory caching embeddings")

    sp = add("align", cmd_align, "align a face image to the 360x480 canonical frame")
    sp.add_argument("--image", required=True)
    sp.add_argument("--landmarks", required=True, help="landmark sidecar JSON")
    sp.add_argument("--out", required=True, help="output PNG")
    sp.add_argument("--crop-out", help="also write the 160x160 grayscale nose crop")

    sp = add("bsif", cmd_bsif, "extract the 4096-value BSIF cell-histogram feature")
    sp.add_argument("--image", required=True)
    sp.add_argument("--landmarks", help="align and crop first (otherwise the image is the crop)")
    sp.add_argument("--bank")
    sp.add_argument("--out")

    sp = add("embed", cmd_embed, "fetch a 512-value deep face representation")
    sp.add_argument("--image", required=True)
    sp.add_argument("--backend", default="stub")
    sp.add_argument("--embed-cache")
    sp.add_argument("--out")

    sp = add("compress", cmd_compress, "compress manifest references to a target file size")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--codec", choices=["jpeg", "jpeg2000"], required=True)
    sp.add_argument("--target-kb", type=float, required=True)
    sp.add_argument("--mode", choices=["avg", "per-image"], default="avg")
    sp.add_argument("--out", required=True)
    sp.add_argument("--encoder-cmd", help="external encoder template with {in} {out} {rate}")
    sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    sp = add("train", cmd_train, "train a detector leaving one retouching app out")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--feature", choices=["td", "dfr"], required=True)
    sp.add_argument("--scenario", choices=["single", "differential"], default="single")
    sp.add_argument("--exclude-app", required=True)
    sp.add_argument("--out", required=True, help="model JSON")
    sp.add_argument("--seed", type=int, default=0)
    feature_opts(sp)

    sp = add("score", cmd_score, "score manifest references with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--condition", choices=list(harness.CONDITION_TITLES), default="original")
    sp.add_argument("--app", help="restrict attacks to one app")
    sp.add_argument("--out", help="score CSV (default: stdout)")
    feature_opts(sp)

    sp = add("eval", cmd_eval, "D-EER and DET curve from a score file")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--det", help="write DET points CSV")

    sp = add("experiment", cmd_experiment, "run the leave-one-app-out experiment from a TOML config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="override output_dir")
    sp.add_argument("--feature", choices=["td", "dfr"])
    sp.add_argument("--scenario", choices=["single", "differential"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int)

    sp = add("synth", cmd_synth, "generate the synthetic two-corpus fixture and a config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-subjects", type=int, default=40)
    sp.add_argument("--test-subjects", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except RetouchError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io_error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
