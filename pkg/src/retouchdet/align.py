"""Eye-based geometric normalization into the 360x480 canonical frame."""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateLandmarks, ImageTooSmall, SchemaViolation

CANONICAL_WIDTH = 360
CANONICAL_HEIGHT = 480
INTER_EYE = 90.0
CANONICAL_LEFT_EYE = (135.0, 180.0)
CANONICAL_RIGHT_EYE = (225.0, 180.0)
CROP_SIZE = 160

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class LandmarkSet:
    """Eye centers and nose tip in pixel coordinates (origin top-left)."""
    left_eye: tuple
    right_eye: tuple
    nose_tip: tuple

    def __post_init__(self):
        for name in ("left_eye", "right_eye", "nose_tip"):
            pt = getattr(self, name)
            if len(pt) != 2 or not all(math.isfinite(v) for v in pt):
                raise SchemaViolation(f"{name} must be two finite coordinates, got {pt!r}")

    def validate(self, width=None, height=None):
        """Check eye ordering and, when a size is given, that points lie inside it."""
        if not self.left_eye[0] < self.right_eye[0]:
            raise SchemaViolation("left_eye.x must be smaller than right_eye.x")
        if width is not None:
            for pt in (self.left_eye, self.right_eye, self.nose_tip):
                if not (0 <= pt[0] <= width - 1 and 0 <= pt[1] <= height - 1):
                    raise SchemaViolation(f"landmark {pt} outside {width}x{height} image")
        return self

    def as_array(self):
        return np.array([self.left_eye, self.right_eye, self.nose_tip], dtype=float)


@dataclass(frozen=True)
class SimilarityTransform:
    """x' = scale * R(rotation) @ x + translation."""
    scale: float
    rotation: float
    translation: tuple

    @property
    def matrix(self):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points):
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix.T + np.asarray(self.translation, dtype=float)

    def inverse(self):
        inv = SimilarityTransform(1.0 / self.scale, -self.rotation, (0.0, 0.0))
        tx, ty = -inv.apply(np.asarray(self.translation, dtype=float))
        return SimilarityTransform(inv.scale, inv.rotation, (float(tx), float(ty)))

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, (0.0, 0.0))


def _wrap_angle(theta):
    theta = math.remainder(theta, 2 * math.pi)
    return math.pi if theta == -math.pi else theta


def estimate_similarity(src: LandmarkSet) -> SimilarityTransform:
    """Two-point similarity mapping the source eyes onto the canonical eyes."""
    le = np.asarray(src.left_eye, dtype=float)
    re = np.asarray(src.right_eye, dtype=float)
    d_src = re - le
    norm = math.hypot(*d_src)
    if norm == 0 or not math.isfinite(norm):
        raise DegenerateLandmarks("eye landmarks coincide")
    d_dst = np.subtract(CANONICAL_RIGHT_EYE, CANONICAL_LEFT_EYE)
    scale = math.hypot(*d_dst) / norm
    rotation = _wrap_angle(math.atan2(d_dst[1], d_dst[0]) - math.atan2(d_src[1], d_src[0]))
    partial = SimilarityTransform(scale, rotation, (0.0, 0.0))
    tx, ty = np.asarray(CANONICAL_LEFT_EYE) - partial.apply(le)
    return SimilarityTransform(scale, rotation, (float(tx), float(ty)))


def _bilinear(image, xs, ys):
    h, w = image.shape[:2]
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    flat = image.reshape(h * w, -1)
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    def gather(r, c):
        v = np.take(flat, (r * w + c).ravel(), axis=0).astype(float)
        return v.reshape(r.shape + ((flat.shape[1],) if image.ndim == 3 else ()))

    top = gather(y0, x0) * (1 - fx) + gather(y0, x1) * fx
    bottom = gather(y1, x0) * (1 - fx) + gather(y1, x1) * fx
    return top * (1 - fy) + bottom * fy


def _sample(image, t: SimilarityTransform, cols, rows):
    """Warped values at canonical pixel columns ``cols`` and rows ``rows``."""
    image = np.asarray(image)
    us, vs = np.meshgrid(np.asarray(cols, dtype=float), np.asarray(rows, dtype=float))
    src = t.inverse().apply(np.stack([us.ravel(), vs.ravel()], axis=1))
    out = _bilinear(image, src[:, 0].reshape(us.shape), src[:, 1].reshape(us.shape))
    if np.issubdtype(image.dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def warp_to_canonical(image, t: SimilarityTransform, size=(CANONICAL_WIDTH, CANONICAL_HEIGHT)):
    """Resample ``image`` into the canonical frame; borders are replicated."""
    width, height = size
    return _sample(image, t, np.arange(width), np.arange(height))


def to_gray(image):
    """BT.601 luma rounded to integers; 2-D inputs pass through unchanged."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.uint8, copy=True)
    rgb = image[..., :3].astype(float)
    luma = rgb[..., 0] * LUMA_WEIGHTS[0] + rgb[..., 1] * LUMA_WEIGHTS[1] + rgb[..., 2] * LUMA_WEIGHTS[2]
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)


def _crop_window(nose, width, height, size):
    half = size // 2
    cx = int(round(nose[0]))
    cy = int(round(nose[1]))
    rows = np.clip(np.arange(cy - half, cy - half + size), 0, height - 1)
    cols = np.clip(np.arange(cx - half, cx - half + size), 0, width - 1)
    return rows, cols


def crop_nose_region(image, nose_canonical, size=CROP_SIZE):
    """Grayscale ``size`` x ``size`` window centered on the nose tip, replicate-padded."""
    gray = to_gray(image)
    rows, cols = _crop_window(nose_canonical, gray.shape[1], gray.shape[0], size)
    return gray[np.ix_(rows, cols)]


def aligned_nose_crop(image, landmarks: LandmarkSet, size=CROP_SIZE):
    """Same result as align_face followed by crop_nose_region, warping only the window."""
    t = estimate_similarity(landmarks)
    nose = t.apply(np.asarray(landmarks.nose_tip, dtype=float))
    rows, cols = _crop_window(nose, CANONICAL_WIDTH, CANONICAL_HEIGHT, size)
    return to_gray(_sample(image, t, cols, rows))


def align_face(image, landmarks: LandmarkSet):
    """Warp to the canonical frame; returns (aligned RGB, nose tip in canonical coords)."""
    image = np.asarray(image)
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise ImageTooSmall(f"image of shape {image.shape} cannot be aligned")
    t = estimate_similarity(landmarks)
    nose = t.apply(np.asarray(landmarks.nose_tip, dtype=float))
    return warp_to_canonical(image, t), (float(nose[0]), float(nose[1]))


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_png(image, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG", compress_level=1)
