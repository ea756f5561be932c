import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))


def write_png(path, width, height, value=128):
    Image.fromarray(np.full((height, width, 3), value, dtype=np.uint8)).save(path)


@pytest.fixture
def two_image_dir(tmp_path):
    """Directory with two blank 100x80 images and a writer for manifests next to them."""
    write_png(tmp_path / "a.png", 100, 80)
    write_png(tmp_path / "b.png", 100, 80)

    def manifest(doc, name="manifest.json"):
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return p

    return tmp_path, manifest


def eight_matches(dx=60.0):
    return [[x, y, x - dx, y] for x, y in [(65, 10), (70, 20), (75, 30), (80, 40), (85, 50), (90, 60), (95, 70),
                                           (66, 72)]]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
