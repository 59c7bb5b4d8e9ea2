"""Procedural face-like corpus with simulated retouching apps.

A test fixture, not a realistic face model: faces are ellipses with eyes,
brows, nose shading and a mouth over a noisy skin texture. "Retouching"
smooths the skin (texture channel) and rescales eyes / nose / face outline
(geometry channel). Two corpus styles stand in for two source databases.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import align
from .align import LandmarkSet, SimilarityTransform
from .dataset import COLUMNS

WIDTH, HEIGHT = align.CANONICAL_WIDTH, align.CANONICAL_HEIGHT
NOSE_TIP = (180.0, 245.0)


@dataclass(frozen=True)
class RetouchApp:
    name: str
    smooth: float      # blend weight of the smoothed skin
    eye_scale: float
    nose_scale: float
    brighten: float    # added to skin, intensity levels
    face_scale: float  # horizontal face outline scaling


APPS = (
    RetouchApp("AirBrush", 0.85, 1.06, 1.00, 4.0, 1.00),
    RetouchApp("BeautyPlus", 0.60, 1.10, 0.95, 6.0, 0.97),
    RetouchApp("Bestie", 0.90, 1.00, 1.00, 8.0, 1.00),
    RetouchApp("FotoRus", 0.45, 1.14, 0.85, 2.0, 0.95),
    RetouchApp("InstaBeauty", 0.55, 1.10, 0.88, 3.0, 0.96),
    RetouchApp("YouCamPerfect", 0.25, 1.03, 0.97, 1.0, 0.99),
)


@dataclass(frozen=True)
class CorpusStyle:
    texture: tuple       # pore-noise amplitude range
    blur: float          # camera softness (Gaussian sigma)
    cast: tuple          # per-channel color offset
    lighting: float      # strength of the horizontal shading gradient
    grain: float         # background sensor-noise amplitude


STYLES = {
    "synthA": CorpusStyle(texture=(7.0, 13.0), blur=0.0, cast=(0.0, 0.0, 0.0), lighting=0.10,
                          grain=4.0),
    "synthB": CorpusStyle(texture=(6.0, 11.0), blur=0.4, cast=(8.0, 2.0, -6.0), lighting=0.18,
                          grain=5.0),
}


@dataclass(frozen=True)
class Subject:
    skin: tuple
    face_w: float
    face_h: float
    face_cy: float
    eye_rx: float
    eye_ry: float
    brow: float
    nose_w: float
    mouth_w: float
    texture: float
    hair: tuple
    background: tuple


def random_subject(rng, style: CorpusStyle) -> Subject:
    base = rng.uniform(110, 215)
    skin = (base + rng.uniform(15, 35), base + rng.uniform(-5, 10), base - rng.uniform(5, 30))
    return Subject(
        skin=tuple(float(np.clip(c, 40, 250)) for c in skin),
        face_w=rng.uniform(108, 132), face_h=rng.uniform(150, 172),
        face_cy=rng.uniform(228, 242),
        eye_rx=rng.uniform(13, 19), eye_ry=rng.uniform(5.5, 8.5),
        brow=rng.uniform(3, 6), nose_w=rng.uniform(9, 15), mouth_w=rng.uniform(22, 34),
        texture=rng.uniform(*style.texture),
        hair=tuple(float(v) for v in rng.uniform(10, 90, size=3)),
        background=tuple(float(v) for v in rng.uniform(150, 235, size=3)),
    )


_YY, _XX = np.mgrid[0:HEIGHT, 0:WIDTH].astype(float)


def _ellipse(xx, yy, cx, cy, rx, ry, soft=1.5):
    """Soft-edged filled ellipse; only its bounding box is evaluated."""
    out = np.zeros(xx.shape)
    pad_x = rx + soft + 2
    pad_y = ry + soft + 2
    r0, r1 = max(0, int(cy - pad_y)), min(xx.shape[0], int(cy + pad_y) + 2)
    c0, c1 = max(0, int(cx - pad_x)), min(xx.shape[1], int(cx + pad_x) + 2)
    if r0 >= r1 or c0 >= c1:
        return out
    sx = xx[r0:r1, c0:c1]
    sy = yy[r0:r1, c0:c1]
    d = np.sqrt(((sx - cx) / rx) ** 2 + ((sy - cy) / ry) ** 2)
    out[r0:r1, c0:c1] = np.clip((1.0 - d) * min(rx, ry) / soft + 0.5, 0.0, 1.0)
    return out


def noise_fields(seed):
    """Low-frequency blotches and unit-amplitude pore texture for one capture."""
    rng = np.random.default_rng(seed)
    blotch = gaussian_filter(rng.standard_normal((HEIGHT, WIDTH)), 8) * 40.0
    pores = gaussian_filter(rng.standard_normal((HEIGHT, WIDTH)), 0.7) * 2.2
    grain = gaussian_filter(rng.standard_normal((HEIGHT, WIDTH)), 0.6) * 2.5
    return blotch, pores, grain


def render(subject: Subject, style: CorpusStyle, fields, app: RetouchApp = None,
           lighting_shift=0.0):
    """Face in the canonical frame (float RGB, 0..255); ``fields`` from :func:`noise_fields`."""
    yy, xx = _YY, _XX
    eye_scale = app.eye_scale if app else 1.0
    nose_scale = app.nose_scale if app else 1.0
    face_scale = app.face_scale if app else 1.0

    blotch, pores, grain = fields
    bg = np.empty((HEIGHT, WIDTH, 3))
    for c in range(3):
        bg[..., c] = subject.background[c] * (0.9 + 0.2 * yy / HEIGHT) + grain * style.grain

    face = _ellipse(xx, yy, 180, subject.face_cy, subject.face_w * face_scale, subject.face_h, soft=3)
    hair = _ellipse(xx, yy, 180, subject.face_cy - 40, subject.face_w * 1.08, subject.face_h * 0.95, soft=3)
    hair = hair * (yy < subject.face_cy - 0.55 * subject.face_h)

    pores = pores * subject.texture
    shade = 1.0 + (style.lighting + lighting_shift) * (xx - 180) / 180

    skin = np.empty((HEIGHT, WIDTH, 3))
    for c in range(3):
        skin[..., c] = subject.skin[c] * shade + blotch + pores + style.cast[c]

    features = np.zeros((HEIGHT, WIDTH))
    dark = np.zeros((HEIGHT, WIDTH))
    for ex in (135.0, 225.0):
        eye = _ellipse(xx, yy, ex, 180, subject.eye_rx * eye_scale, subject.eye_ry * eye_scale)
        iris = _ellipse(xx, yy, ex, 180, subject.eye_ry * 0.9 * eye_scale, subject.eye_ry * 0.9 * eye_scale)
        brow = _ellipse(xx, yy, ex, 160, subject.eye_rx * 1.3, subject.brow)
        features = np.maximum(features, np.maximum(eye, brow))
        dark = np.maximum(dark, np.maximum(0.55 * eye + 0.45 * iris, 0.8 * brow))
    nw = subject.nose_w * nose_scale
    for sx in (-1, 1):
        ridge = _ellipse(xx, yy, 180 + sx * nw, 215, 2.5, 32) * 0.35
        nostril = _ellipse(xx, yy, 180 + sx * nw * 0.8, 250, 5.0 * nose_scale, 3.0)
        dark = np.maximum(dark, np.maximum(ridge, 0.7 * nostril))
        features = np.maximum(features, nostril)
    mouth = _ellipse(xx, yy, 180, 300, subject.mouth_w, 6)
    features = np.maximum(features, mouth)

    skin_mask = face * (1.0 - features)
    if app is not None:
        smoothed = np.stack([gaussian_filter(skin[..., c], 2.0) for c in range(3)], -1)
        w = app.smooth * skin_mask[..., None]
        skin = skin * (1 - w) + smoothed * w + app.brighten * skin_mask[..., None]

    img = bg * (1 - face[..., None]) + skin * face[..., None]
    img = img * (1 - dark[..., None]) + 25.0 * dark[..., None]
    lips = np.array([150.0, 60.0, 70.0])
    img = img * (1 - mouth[..., None]) + lips * mouth[..., None]
    hair_rgb = np.array(subject.hair) + (grain * 3.0)[..., None]
    img = img * (1 - hair[..., None]) + hair_rgb * hair[..., None]
    if style.blur > 0:
        img = np.stack([gaussian_filter(img[..., c], style.blur) for c in range(3)], -1)
    return img


def random_pose(rng, max_rot=0.035, max_scale=0.03, max_shift=3.0):
    """Small similarity about the image center."""
    s = 1.0 + rng.uniform(-max_scale, max_scale)
    theta = rng.uniform(-max_rot, max_rot)
    shift = rng.uniform(-max_shift, max_shift, size=2)
    center = np.array([WIDTH / 2, HEIGHT / 2])
    partial = SimilarityTransform(s, theta, (0.0, 0.0))
    t = center - partial.apply(center) + shift
    return SimilarityTransform(s, theta, (float(t[0]), float(t[1])))


def posed(image, pose: SimilarityTransform):
    """Apply ``pose`` to a canonical-frame image; returns image and landmarks."""
    out = align.warp_to_canonical(np.clip(np.rint(image), 0, 255).astype(np.uint8), pose)
    pts = pose.apply(np.array([align.CANONICAL_LEFT_EYE, align.CANONICAL_RIGHT_EYE, NOSE_TIP]))
    lm = LandmarkSet(tuple(map(float, pts[0])), tuple(map(float, pts[1])), tuple(map(float, pts[2])))
    return out, lm


def generate_corpus(out_dir, name, n_subjects, seed=0, apps=APPS, style=None):
    """Write images, landmark sidecars and ``<name>.csv`` under ``out_dir``.

    Per subject: one bona fide reference, one retouched reference per app
    (same capture, same pose) and one probe from a second session.
    """
    out_dir = Path(out_dir)
    style = style or STYLES.get(name, STYLES["synthA"])
    img_dir = out_dir / name
    img_dir.mkdir(parents=True, exist_ok=True)
    root_seed = np.random.SeedSequence([seed, sum(map(ord, name))])
    rows = []
    for idx, child in enumerate(root_seed.spawn(n_subjects)):
        rng = np.random.default_rng(child)
        sid = f"{name}_{idx:04d}"
        subject = random_subject(rng, style)
        ref_noise, probe_noise = (int(v) for v in rng.integers(0, 2**31, size=2))
        ref_pose = random_pose(rng)
        probe_pose = random_pose(rng)
        light = rng.uniform(-0.05, 0.05)

        ref_fields = noise_fields(ref_noise)
        variants = [(None, "bona_fide")] + [(a, f"app:{a.name}") for a in apps]
        for app, manip in variants:
            tag = "bona" if app is None else app.name
            img, lm = posed(render(subject, style, ref_fields, app), ref_pose)
            rows.append(_write(img_dir, name, f"{sid}_ref_{tag}", img, lm,
                               [sid, "reference", manip, "original", None, "s1", None]))
        img, lm = posed(render(subject, style, noise_fields(probe_noise), lighting_shift=light), probe_pose)
        rows.append(_write(img_dir, name, f"{sid}_probe", img, lm,
                           [sid, "probe", "bona_fide", "original", None, "s2", None]))

    manifest = out_dir / f"{name}.csv"
    with manifest.open("w") as fh:
        fh.write(",".join(COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    return manifest


def _write(img_dir, name, stem, img, lm, row):
    align.save_png(img, img_dir / f"{stem}.png")
    (img_dir / f"{stem}.json").write_text(json.dumps({
        "left_eye": list(lm.left_eye), "right_eye": list(lm.right_eye),
        "nose_tip": list(lm.nose_tip)}))
    row[4] = f"{name}/{stem}.png"
    row[6] = f"{name}/{stem}.json"
    return row


def write_experiment_config(path, train_manifest, test_manifest, output_dir, feature="td",
                            scenario="single", conditions=("original", "jpeg", "jpeg2000"),
                            apps=tuple(a.name for a in APPS), seed=0, compressed_dir="compressed"):
    lines = [
        f'train_manifest = "{train_manifest}"',
        f'test_manifest = "{test_manifest}"',
        f'feature = "{feature}"',
        f'scenario = "{scenario}"',
        "apps = [" + ", ".join(f'"{a}"' for a in apps) + "]",
        "compression_conditions = [" + ", ".join(f'"{c}"' for c in conditions) + "]",
        'backend = "stub"',
        f'output_dir = "{output_dir}"',
        f'compressed_dir = "{compressed_dir}"',
        f"seed = {seed}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def generate(out_dir, n_train=40, n_test=30, seed=0):
    """Both corpora plus a ready-to-run experiment config; returns their paths."""
    out_dir = Path(out_dir)
    train = generate_corpus(out_dir, "synthA", n_train, seed)
    test = generate_corpus(out_dir, "synthB", n_test, seed)
    cfg = out_dir / "experiment.toml"
    write_experiment_config(cfg, train.name, test.name, "results", seed=seed)
    return train, test, cfg
