import json
import sys
from contextlib import contextmanager
from pathlib import Path

import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


@contextmanager
def criterion(number: int, title: str):
    info = {"detail": ""}
    try:
        yield info
    except BaseException:
        ACCEPTANCE_RESULTS.append((number, title, False, info["detail"]))
        raise
    else:
        ACCEPTANCE_RESULTS.append((number, title, True, info["detail"]))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


def make_image(path: Path, color, size=(40, 28)) -> None:
    img = Image.new("RGB", size, color)
    # a fixed diagonal stripe so images differ beyond the base color
    for i in range(min(size)):
        img.putpixel((i, i), (255 - color[0], 255 - color[1], 255 - color[2]))
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


COLORS = [
    (200, 30, 30), (30, 200, 30), (30, 30, 200), (200, 200, 30), (30, 200, 200),
    (200, 30, 200), (120, 120, 120), (240, 160, 20), (20, 160, 240), (90, 40, 150),
]


def build_generic_dataset(root: Path, n_images=10, annotations=None):
    """A tiny generic-flavor dataset with n_images colored PNGs."""
    images = root / "images"
    for i in range(n_images):
        make_image(images / f"img{i:02d}.png", COLORS[i % len(COLORS)], size=(40 + i, 28))
    if annotations is None:
        annotations = [
            {"query_id": "q0", "ref_image": "img00", "text": "make it green",
             "target_image": "img01"},
            {"query_id": "q1", "ref_image": "img02", "text": "brighter and striped",
             "target_image": "img03",
             "subset_ids": ["img03", "img04", "img05"]},
        ]
    with open(root / "annotations.jsonl", "w") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann) + "\n")
    return root


@pytest.fixture
def generic_dataset(tmp_path):
    return build_generic_dataset(tmp_path / "toy")
