import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import yaml

from vlmdistill.projection import CameraCalibration, save_calibration, save_image

PUBLISHED_PARTICIPANTS = {
    "1": {"A_c": 4.58, "A_f": 4.66, "A_r": 4.26, "A_control": 0.88, "A_turn": 0.96, "A_lane": 0.98},
    "2": {"A_c": 4.34, "A_f": 4.26, "A_r": 4.34, "A_control": 0.86, "A_turn": 0.92, "A_lane": 0.94},
    "3": {"A_c": 4.86, "A_f": 4.66, "A_r": 4.54, "A_control": 0.98, "A_turn": 0.84, "A_lane": 0.96},
    "4": {"A_c": 4.12, "A_f": 4.34, "A_r": 4.40, "A_control": 0.80, "A_turn": 0.84, "A_lane": 0.94},
    "5": {"A_c": 4.50, "A_f": 4.62, "A_r": 4.56, "A_control": 0.98, "A_turn": 0.96, "A_lane": 0.98},
}

# tiny model so train-toy finishes in a second or two
SMALL_TRAINING = [
    "train.epochs=2",
    "train.train_size=64",
    "train.val_size=32",
    "heads.model_dim=8",
    "heads.num_heads=2",
    "heads.num_layers=1",
    "heads.text_out_dim=8",
    "eval.size=32",
]


@dataclass
class Workspace:
    root: Path
    config: Path
    manifest: Path
    images: list[Path]


def build_workspace(root: Path, frames: int = 5) -> Workspace:
    """Frames with images, one shared calibration, a manifest and a config.

    Frame ``f001`` is stationary; the others drive straight or veer.
    """
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    E = np.eye(4)
    E[1, 3] = 1.5
    K = np.array([[50.0, 0.0, 32.0], [0.0, 50.0, 24.0], [0.0, 0.0, 1.0]])
    save_calibration(CameraCalibration(K, E, 64, 48), root / "cam.json")
    lines, images = [], []
    for i in range(frames):
        img = rng.integers(0, 200, size=(48, 64, 3), dtype=np.uint8)
        path = root / f"f{i:03d}.png"
        save_image(img, path)
        images.append(path)
        t = 0.5 * np.arange(1, 7)
        if i == 1:
            wps = np.column_stack([np.zeros(6), 0.05 * t])
        else:
            wps = np.column_stack([0.3 * (i - 2) * t**2, 2.0 + 3.0 * t])
        lines.append(
            json.dumps({"sample_id": f"f{i:03d}", "image": path.name, "calibration": "cam.json", "waypoints": wps.tolist()})
        )
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    (root / "questionnaire.json").write_text(json.dumps({"participants": PUBLISHED_PARTICIPANTS}))
    config = root / "config.yaml"
    config.write_text(
        yaml.safe_dump(
            {
                "paths": {
                    "manifest": "manifest.jsonl",
                    "store": "store.jsonl",
                    "replay": "store.jsonl",
                    "questionnaire": "questionnaire.json",
                },
                "encoder": {"dim": 16},
            }
        )
    )
    return Workspace(root, config, manifest, images)


@pytest.fixture
def workspace(tmp_path) -> Workspace:
    return build_workspace(tmp_path / "ws")


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
