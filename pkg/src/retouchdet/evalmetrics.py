"""ISO/IEC 30107-3 style detection metrics: APCER, BPCER, DET curves, D-EER.

Convention: a sample is classified as an attack iff its score >= threshold.
Rates are percentages.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import EmptyClass, OutOfRange, SchemaViolation

PROBIT_CLAMP = (0.001, 0.999)


@dataclass(frozen=True, eq=False)
class ScoreSet:
    attack_scores: np.ndarray
    bona_fide_scores: np.ndarray

    def __post_init__(self):
        for name in ("attack_scores", "bona_fide_scores"):
            v = np.asarray(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(v)):
                raise SchemaViolation(f"{name} contain non-finite values")
            object.__setattr__(self, name, v)

    def require_both(self):
        if self.attack_scores.size == 0 or self.bona_fide_scores.size == 0:
            raise EmptyClass("both attack and bona fide scores are required")


@dataclass(frozen=True, eq=False)
class DetCurve:
    thresholds: np.ndarray  # descending, starting at +inf and ending at -inf
    apcer: np.ndarray
    bpcer: np.ndarray

    @property
    def points(self):
        return list(zip(self.thresholds.tolist(), self.apcer.tolist(), self.bpcer.tolist()))

    def probit(self):
        lo, hi = PROBIT_CLAMP
        return (norm.ppf(np.clip(self.apcer / 100.0, lo, hi)),
                norm.ppf(np.clip(self.bpcer / 100.0, lo, hi)))

    @property
    def d_eer(self):
        return d_eer(self)


def error_rates_at(scores: ScoreSet, tau: float):
    scores.require_both()
    apcer = 100.0 * np.count_nonzero(scores.attack_scores < tau) / scores.attack_scores.size
    bpcer = 100.0 * np.count_nonzero(scores.bona_fide_scores >= tau) / scores.bona_fide_scores.size
    return apcer, bpcer


def det_curve(scores: ScoreSet) -> DetCurve:
    """Operating points at every distinct score plus the +/-inf sentinels."""
    scores.require_both()
    att = np.sort(scores.attack_scores)
    bon = np.sort(scores.bona_fide_scores)
    distinct = np.unique(np.concatenate([att, bon]))[::-1]
    taus = np.concatenate([[np.inf], distinct, [-np.inf]])
    apcer = 100.0 * np.searchsorted(att, taus, side="left") / att.size
    bpcer = 100.0 * (bon.size - np.searchsorted(bon, taus, side="left")) / bon.size
    return DetCurve(taus, apcer, bpcer)


def d_eer(curve: DetCurve) -> float:
    """Rate where APCER and BPCER cross, linearly interpolated between operating points."""
    diff = curve.apcer - curve.bpcer
    if diff.size == 1:
        return float((curve.apcer[0] + curve.bpcer[0]) / 2)
    hit = np.flatnonzero(diff <= 0)
    if hit.size == 0:
        k = diff.size - 1
        return float(max(curve.apcer[k], curve.bpcer[k]))
    k = int(hit[0])
    if diff[k] == 0:
        return float(curve.apcer[k])
    if k == 0:
        return float(max(curve.apcer[0], curve.bpcer[0]))
    d0, d1 = diff[k - 1], diff[k]
    t = d0 / (d0 - d1)
    return float(curve.apcer[k - 1] + t * (curve.apcer[k] - curve.apcer[k - 1]))


def ccr_at_eer(d_eer_value: float) -> float:
    if not 0.0 <= d_eer_value <= 100.0 or math.isnan(d_eer_value):
        raise OutOfRange(f"D-EER must lie in [0, 100], got {d_eer_value}")
    return 100.0 - d_eer_value


def write_det_csv(curve: DetCurve, path):
    ap, bp = curve.probit()
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "apcer", "bpcer", "apcer_probit", "bpcer_probit"])
        for row in zip(curve.thresholds, curve.apcer, curve.bpcer, ap, bp):
            w.writerow([repr(float(v)) for v in row])


ATTACK_LABELS = {"attack", "retouched", "1", "+1"}
BONA_FIDE_LABELS = {"bona_fide", "bonafide", "0", "-1"}


def write_scores_csv(rows, path):
    """``rows`` are (sample_id, is_attack, score) triples."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "score"])
        for sample_id, is_attack, score in rows:
            w.writerow([sample_id, "attack" if is_attack else "bona_fide", repr(float(score))])


def read_scores_csv(path) -> ScoreSet:
    attack, bona = [], []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"label", "score"} - set(reader.fieldnames):
            raise SchemaViolation("score file needs columns sample_id,label,score")
        for lineno, row in enumerate(reader, start=2):
            label = row["label"].strip().lower()
            try:
                score = float(row["score"])
            except (TypeError, ValueError):
                raise SchemaViolation(f"unparsable score {row['score']!r}", row=lineno) from None
            if label in ATTACK_LABELS:
                attack.append(score)
            elif label in BONA_FIDE_LABELS:
                bona.append(score)
            else:
                raise SchemaViolation(f"unknown label {label!r}", row=lineno)
    return ScoreSet(np.array(attack), np.array(bona))
