import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from retouchdet.dataset import COLUMNS


@pytest.fixture
def write_manifest(tmp_path):
    """Write a manifest CSV; image files (tiny PNGs) are created on demand."""

    def _write(rows, name="corpus.csv", landmarks=False):
        lines = [",".join(COLUMNS)]
        for row in rows:
            row = dict(row)
            row.setdefault("role", "reference")
            row.setdefault("manipulation", "bona_fide")
            row.setdefault("compression", "original")
            row.setdefault("session", "")
            row.setdefault("landmarks_path", "")
            img = tmp_path / row["image_path"]
            if not img.exists():
                img.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(img)
            if landmarks and not row["landmarks_path"]:
                lm = img.with_suffix(".json")
                lm.write_text(json.dumps({"left_eye": [2, 3], "right_eye": [5, 3], "nose_tip": [4, 5]}))
                row["landmarks_path"] = str(lm.relative_to(tmp_path))
            lines.append(",".join(str(row[c]) for c in COLUMNS))
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n")
        return path

    return _write


APPS6 = ["AirBrush", "BeautyPlus", "Bestie", "FotoRus", "InstaBeauty", "YouCamPerfect"]


def app_rows(subjects, apps, prefix="img", probes=True):
    rows = []
    for s in subjects:
        rows.append({"subject_id": s, "image_path": f"{prefix}/{s}_bona.png"})
        for a in apps:
            rows.append({"subject_id": s, "manipulation": f"app:{a}",
                         "image_path": f"{prefix}/{s}_{a}.png"})
        if probes:
            rows.append({"subject_id": s, "role": "probe", "image_path": f"{prefix}/{s}_probe.png"})
    return rows


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Synthetic two-corpus fixture, small enough for unit-level harness tests."""
    from retouchdet import synth

    out = tmp_path_factory.mktemp("synth_small")
    train, test, cfg = synth.generate(out, n_train=8, n_test=5, seed=7)
    return Path(out), train, test


_ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def acceptance_log(request):
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
