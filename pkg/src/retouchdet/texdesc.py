"""BSIF texture codes and the 4x4-cell histogram feature."""

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ImageTooSmall, NonZeroMeanFilter, SchemaViolation, WrongCropSize

GRID = 4
CROP = 160
ZERO_MEAN_TOL = 1e-9
MAX_FILTERS = 16


@dataclass(frozen=True, eq=False)
class FilterBank:
    filters: np.ndarray  # (k, l, l)

    def __post_init__(self):
        f = np.asarray(self.filters, dtype=float)
        if f.ndim != 3 or f.shape[1] != f.shape[2]:
            raise SchemaViolation(f"filters must have shape (k, l, l), got {f.shape}")
        if not 1 <= f.shape[0] <= MAX_FILTERS:
            raise SchemaViolation(f"filter count must be in [1, {MAX_FILTERS}], got {f.shape[0]}")
        if f.shape[1] % 2 != 1:
            raise SchemaViolation(f"filter side must be odd, got {f.shape[1]}")
        if not np.all(np.isfinite(f)):
            raise SchemaViolation("filter coefficients must be finite")
        for i, filt in enumerate(f):
            total = float(filt.sum())
            if abs(total) > ZERO_MEAN_TOL:
                raise NonZeroMeanFilter(i, total)
        f.flags.writeable = False
        object.__setattr__(self, "filters", f)

    @property
    def k(self):
        return self.filters.shape[0]

    @property
    def side(self):
        return self.filters.shape[1]

    @property
    def n_codes(self):
        return 1 << self.k


def make_test_bank(seed=0, k=8, side=3) -> FilterBank:
    """Seeded zero-mean filters, orthonormal within the zero-mean subspace."""
    rng = np.random.default_rng(seed)
    n = side * side
    raw = rng.standard_normal((n, k))
    # the constant vector first so QR spans its orthogonal complement after it
    basis = np.column_stack([np.ones(n) / np.sqrt(n), raw])
    q, _ = np.linalg.qr(basis)
    filt = q[:, 1:k + 1].T.copy()
    filt -= filt.mean(axis=1, keepdims=True)
    return FilterBank(filt.reshape(k, side, side))


def default_bank() -> FilterBank:
    """The bundled deterministic test bank (8 filters, 3x3)."""
    ref = resources.files("retouchdet").joinpath("data/bsif_test_8x3.txt")
    with resources.as_file(ref) as path:
        return load_filter_bank(path)


def load_filter_bank(path) -> FilterBank:
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or len(lines[0]) != 3 or lines[0][0] != "BSIF":
        raise SchemaViolation("bank file must start with 'BSIF k l'")
    try:
        k, side = int(lines[0][1]), int(lines[0][2])
        rows = [[float(v) for v in ln] for ln in lines[1:]]
    except ValueError as exc:
        raise SchemaViolation(f"unparsable bank file: {exc}") from None
    if k < 1 or side < 1 or len(rows) != k * side or any(len(r) != side for r in rows):
        raise SchemaViolation(f"expected {k * side} rows of {side} values")
    return FilterBank(np.array(rows).reshape(k, side, side))


def save_filter_bank(bank: FilterBank, path):
    out = [f"BSIF {bank.k} {bank.side}"]
    for filt in bank.filters:
        out.extend(" ".join(repr(float(v)) for v in row) for row in filt)
    Path(path).write_text("\n".join(out) + "\n")


def filter_responses(image, bank: FilterBank):
    """Per-filter responses, shape (k, H, W), evaluated on center-relative patches.

    Because filters are zero-mean, subtracting the center pixel does not change
    the response mathematically, but makes constant patches give exactly 0.
    """
    img = np.asarray(image, dtype=float)
    side = bank.side
    r = side // 2
    if img.ndim != 2 or img.shape[0] < side or img.shape[1] < side:
        raise ImageTooSmall(f"need a 2-D image of at least {side}x{side}, got {img.shape}")
    h, w = img.shape
    padded = np.pad(img, r, mode="edge")
    out = np.zeros((bank.k, h, w))
    for a in range(side):
        for b in range(side):
            shifted = padded[a:a + h, b:b + w] - img
            out += bank.filters[:, a, b][:, None, None] * shifted
    return out


def bsif_code_image(image, bank: FilterBank):
    """Integer code per pixel: bit i set iff the response of filter i is > 0."""
    resp = filter_responses(image, bank)
    weights = (1 << np.arange(bank.k, dtype=np.int64))[:, None, None]
    return ((resp > 0).astype(np.int64) * weights).sum(axis=0)


def cell_histograms(codes, n_codes, grid=GRID):
    """Raw per-cell code counts, row-major cell order, shape (grid*grid, n_codes)."""
    h, w = codes.shape
    ch, cw = h // grid, w // grid
    hists = np.zeros((grid * grid, n_codes), dtype=np.int64)
    for i in range(grid):
        for j in range(grid):
            cell = codes[i * ch:(i + 1) * ch, j * cw:(j + 1) * cw]
            hists[i * grid + j] = np.bincount(cell.ravel(), minlength=n_codes)
    return hists


def td_feature(crop, bank: FilterBank, normalize=True):
    """Concatenated per-cell BSIF histograms of a 160x160 crop (L1 per cell)."""
    crop = np.asarray(crop)
    if crop.shape != (CROP, CROP):
        raise WrongCropSize(f"expected {CROP}x{CROP} grayscale crop, got {crop.shape}")
    hists = cell_histograms(bsif_code_image(crop, bank), bank.n_codes)
    if not normalize:
        return hists.ravel()
    hists = hists.astype(float)
    return (hists / hists.sum(axis=1, keepdims=True)).ravel()
