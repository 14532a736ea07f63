"""Open-loop planning metrics and annotation analytics."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .annotation.prompts import DEFAULT_VOCABULARY
from .errors import EmptyReportError, ValidationError

HORIZON_INDICES = {"1s": 1, "2s": 3, "3s": 5}  # 0.5 s waypoint spacing
EGO_LENGTH = 4.0
EGO_WIDTH = 1.8


def l2_displacement(pred: np.ndarray, gt: np.ndarray, horizons: dict[str, int] = HORIZON_INDICES) -> dict[str, float]:
    """Mean Euclidean error at each horizon mark plus their average.

    ``pred`` and ``gt`` are ``(N, T, 2)`` (or a single ``(T, 2)``) arrays.
    """
    p = np.asarray(pred, dtype=float)
    g = np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValidationError(f"prediction shape {p.shape} differs from ground truth {g.shape}")
    if p.ndim == 2:
        p, g = p[None], g[None]
    if len(p) == 0:
        raise EmptyReportError("no trajectories to evaluate")
    err = np.linalg.norm(p - g, axis=-1)  # (N, T)
    out = {name: float(err[:, idx].mean()) for name, idx in horizons.items()}
    out["avg"] = float(np.mean([out[name] for name in horizons]))
    return out


# -- collision ------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Oriented BEV rectangle: center, length along heading, width, heading (rad)."""

    x: float
    y: float
    length: float
    width: float
    yaw: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.length, self.width, self.yaw)
        if not all(np.isfinite(vals)) or self.length <= 0 or self.width <= 0:
            raise ValidationError("box extents must be finite and positive")

    def corners(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        along = np.array([c, s]) * self.length / 2
        across = np.array([-s, c]) * self.width / 2
        center = np.array([self.x, self.y])
        return np.array([center + along + across, center - along + across, center - along - across, center + along - across])


def boxes_overlap(a: Box, b: Box) -> bool:
    """Separating-axis test; boxes that merely touch do not overlap."""
    ca, cb = a.corners(), b.corners()
    for box in (a, b):
        c, s = np.cos(box.yaw), np.sin(box.yaw)
        for axis in (np.array([c, s]), np.array([-s, c])):
            pa, pb = ca @ axis, cb @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def ego_headings(traj: np.ndarray) -> np.ndarray:
    """Heading at each waypoint from the displacement since the previous one.

    The first waypoint uses the displacement from the origin. A zero
    displacement keeps the previous heading (straight ahead, +y, at the start).
    """
    pts = np.vstack([np.zeros(2), np.asarray(traj, dtype=float)])
    out = np.empty(len(traj))
    heading = np.pi / 2
    for i in range(len(traj)):
        d = pts[i + 1] - pts[i]
        if np.hypot(*d) > 1e-9:
            heading = float(np.arctan2(d[1], d[0]))
        out[i] = heading
    return out


ObstacleSet = Sequence[Sequence[Sequence[Box]]]  # [frame][timestep] -> boxes


def collision_rate(
    pred: np.ndarray,
    obstacles: ObstacleSet,
    ego_length: float = EGO_LENGTH,
    ego_width: float = EGO_WIDTH,
    horizons: dict[str, int] = HORIZON_INDICES,
) -> dict[str, float]:
    """Percentage of frames whose ego box overlaps an obstacle at each horizon."""
    if ego_length <= 0 or ego_width <= 0:
        raise ValidationError("ego footprint must be positive")
    p = np.asarray(pred, dtype=float)
    if p.ndim == 2:
        p = p[None]
    if len(p) == 0:
        raise EmptyReportError("no trajectories to evaluate")
    if len(obstacles) != len(p):
        raise ValidationError("one obstacle list per frame is required")
    hits = {name: 0 for name in horizons}
    for traj, frame_obs in zip(p, obstacles):
        yaw = ego_headings(traj)
        for name, t in horizons.items():
            boxes = frame_obs[t] if t < len(frame_obs) else ()
            ego = Box(traj[t, 0], traj[t, 1], ego_length, ego_width, yaw[t])
            if any(boxes_overlap(ego, ob) for ob in boxes):
                hits[name] += 1
    out = {name: 100.0 * hits[name] / len(p) for name in horizons}
    out["avg"] = float(np.mean([out[name] for name in horizons]))
    return out


def format_planning_table(rows: dict[str, dict[str, dict[str, float]]]) -> str:
    """Render ``{method: {"l2": {...}, "collision": {...}}}`` as a table with
    1s/2s/3s/Avg. columns for each metric."""
    head = f"{'Method':<16}| {'L2 (m)':^31} | {'Collision Rate (%)':^31}"
    sub = f"{'':<16}| " + " ".join(f"{c:>7}" for c in ("1s", "2s", "3s", "Avg.")) + " | " + " ".join(
        f"{c:>7}" for c in ("1s", "2s", "3s", "Avg.")
    )
    lines = [head, sub, "-" * len(sub)]
    for method, m in rows.items():
        l2 = m.get("l2", {})
        col = m.get("collision", {})
        cells = [l2.get(k) for k in ("1s", "2s", "3s", "avg")]
        cells2 = [col.get(k) for k in ("1s", "2s", "3s", "avg")]
        fmt = lambda v: f"{v:7.2f}" if v is not None else f"{'-':>7}"
        lines.append(f"{method:<16}| " + " ".join(map(fmt, cells)) + " | " + " ".join(map(fmt, cells2)))
    return "\n".join(lines)


# -- annotation analytics -----------------------------------------------------------


def word_count(text: str) -> int:
    """Whitespace tokens that contain at least one word character.

    "stop ." and "stop." both count one word; hyphenated words count once.
    """
    return len([tok for tok in text.split() if re.search(r"\w", tok)])


def annotation_stats(records: Iterable) -> dict:
    recs = list(records)
    if not recs:
        raise EmptyReportError("annotation store is empty")
    fields = {"A_c": "current_action", "A_f": "future_action", "A_r": "reasoning"}
    words = {}
    for key, attr in fields.items():
        counts = [word_count(getattr(r.freeform, attr)) for r in recs]
        words[key] = {"max": max(counts), "min": min(counts), "mean": float(np.mean(counts))}
    actions = {}
    for family, attr in (("control", "control_action"), ("turn", "turn_action"), ("lane", "lane_action")):
        labels = [getattr(r.actions, attr) for r in recs]
        actions[family] = {
            label: 100.0 * labels.count(label) / len(labels) for label in DEFAULT_VOCABULARY.labels(family)
        }
    return {"count": len(recs), "word_length": words, "actions": actions}


def format_stats_table(stats: dict) -> str:
    w = stats["word_length"]
    lines = [f"{'Word Length':<12}| {'A_c':>7} {'A_f':>7} {'A_r':>7}", "-" * 36]
    for row, key in (("Max", "max"), ("Min", "min"), ("Mean", "mean")):
        vals = [w[f][key] for f in ("A_c", "A_f", "A_r")]
        fmt = (lambda v: f"{v:7.2f}") if key == "mean" else (lambda v: f"{v:7d}")
        lines.append(f"{row:<12}| " + " ".join(fmt(v) for v in vals))
    lines.append("")
    for family, dist in stats["actions"].items():
        lines.append(f"{family}: " + ", ".join(f"{k} {v:.1f}%" for k, v in dist.items()))
    return "\n".join(lines)


# -- questionnaire -------------------------------------------------------------------


@dataclass(frozen=True)
class QuestionnaireRecord:
    participant: str
    scores_c: tuple[int, ...]
    scores_f: tuple[int, ...]
    scores_r: tuple[int, ...]
    correct_control: tuple[bool, ...]
    correct_turn: tuple[bool, ...]
    correct_lane: tuple[bool, ...]

    def __post_init__(self) -> None:
        seqs = (self.scores_c, self.scores_f, self.scores_r, self.correct_control, self.correct_turn, self.correct_lane)
        n = len(self.scores_c)
        if n == 0 or any(len(s) != n for s in seqs):
            raise ValidationError(f"participant {self.participant}: case counts differ across fields")
        if any(not 1 <= s <= 5 for s in (*self.scores_c, *self.scores_f, *self.scores_r)):
            raise ValidationError(f"participant {self.participant}: scores must lie in [1, 5]")

    def summary(self) -> dict[str, float]:
        return {
            "A_c": float(np.mean(self.scores_c)),
            "A_f": float(np.mean(self.scores_f)),
            "A_r": float(np.mean(self.scores_r)),
            "A_control": float(np.mean(self.correct_control)),
            "A_turn": float(np.mean(self.correct_turn)),
            "A_lane": float(np.mean(self.correct_lane)),
        }


QUESTIONNAIRE_COLUMNS = ("A_c", "A_f", "A_r", "A_control", "A_turn", "A_lane")


def aggregate_participants(rows: dict[str, dict[str, float]], ddof: int = 0) -> dict:
    """Cross-participant mean and standard deviation of per-participant rows."""
    if not rows:
        raise EmptyReportError("no questionnaire records")
    table = np.array([[r[c] for c in QUESTIONNAIRE_COLUMNS] for r in rows.values()])
    if ddof and len(table) <= ddof:
        raise ValidationError("not enough participants for the requested ddof")
    return {
        "participants": rows,
        "average": dict(zip(QUESTIONNAIRE_COLUMNS, table.mean(axis=0).tolist())),
        "std": dict(zip(QUESTIONNAIRE_COLUMNS, table.std(axis=0, ddof=ddof).tolist())),
    }


def questionnaire_report(records: Sequence[QuestionnaireRecord], ddof: int = 0) -> dict:
    """Per-participant averages and accuracies with their mean and spread.

    ``ddof=0`` gives the population standard deviation; pass ``ddof=1`` for
    the sample standard deviation.
    """
    if not records:
        raise EmptyReportError("no questionnaire records")
    n = len(records[0].scores_c)
    if any(len(r.scores_c) != n for r in records):
        raise ValidationError("participants rated different numbers of cases")
    return aggregate_participants({r.participant: r.summary() for r in records}, ddof)


def format_questionnaire_table(report: dict) -> str:
    head = f"{'Participant':<12}| " + " ".join(f"{c:>9}" for c in QUESTIONNAIRE_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, row in report["participants"].items():
        lines.append(f"{name:<12}| " + " ".join(f"{row[c]:9.2f}" for c in QUESTIONNAIRE_COLUMNS))
    lines.append("-" * len(head))
    for label in ("average", "std"):
        lines.append(f"{label.capitalize():<12}| " + " ".join(f"{report[label][c]:9.2f}" for c in QUESTIONNAIRE_COLUMNS))
    return "\n".join(lines)


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
