"""Acceptance criteria, each at its stated tolerance, one PASS/FAIL line apiece."""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import PUBLISHED_PARTICIPANTS, build_workspace, record_acceptance
from test_cli import run_every_subcommand
from test_metrics import oracle_collision, rec, ten_frame_fixture
from test_projection import K, blank, calib, mounted, pinhole_oracle, red_pixels

from vlmdistill.annotation import (
    DEFAULT_VOCABULARY,
    PromptFamily,
    build_prompt,
    resolve_action,
)
from vlmdistill.encoding import decode_one_hot, one_hot
from vlmdistill.errors import OutOfVocabularyError
from vlmdistill.gradcheck import check_total_loss, tiny_problem
from vlmdistill.losses import (
    ALIGNMENT_VARIANTS,
    LossConfig,
    alignment_loss,
    combine,
    entropy,
    temperature_distribution,
    total_loss_and_grad,
)
from vlmdistill.metrics import aggregate_participants, annotation_stats, collision_rate, l2_displacement
from vlmdistill.projection import (
    FutureTrajectory,
    camera_to_pixels,
    pixels_to_rays,
    project_trajectory,
    render_overlay,
)
from vlmdistill.toy import TrainingConfig, generate_dataset, run_experiment

FIXTURES = Path(__file__).parent / "fixtures"
SEEDS = range(5)


# -- 1 ----------------------------------------------------------------------------------


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    res = check_total_loss(*tiny_problem(seed=0))
    elapsed = time.perf_counter() - start
    ok = res.passed(1e-4) and elapsed < 60
    record_acceptance(
        1, ok, f"max rel err {res.max_relative_error:.2e} over {res.checked} entries (tol 1e-4), {elapsed:.1f}s (< 60s)"
    )
    assert ok


# -- 2 ----------------------------------------------------------------------------------


def test_criterion_02_loss_identities():
    cfg = LossConfig()
    rng = np.random.default_rng(2)
    y = [rng.normal(size=(4, 8)) for _ in range(3)]
    matched = [v * cfg.tau_s / cfg.tau_t for v in y]
    h = sum(np.mean([entropy(temperature_distribution(row, cfg.tau_t)) for row in v]) for v in y)
    err_entropy = abs(alignment_loss(y, matched, cfg)[0] - h)
    err_uniform = abs(alignment_loss([np.zeros(4)] * 3, [np.zeros(4)] * 3, cfg)[0] - 3 * math.log(4))
    worst_linear = 0.0
    for _ in range(100):
        l1, l2, a, b = rng.uniform(0, 10, 4)
        worst_linear = max(worst_linear, abs(combine(a, b, LossConfig(lambda1=l1, lambda2=l2)) - (l1 * a + l2 * b)))
    # the weighted total reported by total_loss goes through the same combination
    heads, f_ego, y1, y2, _ = tiny_problem(seed=2)
    out = heads.forward(f_ego)
    bd, _ = total_loss_and_grad(y1, y2, out, LossConfig(lambda1=0.7, lambda2=0.3))
    worst_linear = max(worst_linear, abs(bd.total - (0.7 * bd.l_align + 0.3 * bd.l_action)))
    ok = err_entropy < 1e-9 and err_uniform < 1e-9 and worst_linear <= 1e-12
    record_acceptance(
        2, ok, f"entropy gap {err_entropy:.1e}, 3 log 4 gap {err_uniform:.1e} (tol 1e-9), linearity {worst_linear:.1e} (tol 1e-12)"
    )
    assert ok


# -- 3 ----------------------------------------------------------------------------------


def test_criterion_03_distribution_invariants():
    rng = np.random.default_rng(3)
    vectors = [rng.normal(size=rng.integers(2, 17)) for _ in range(1000)]
    worst_sum = worst_shift = 0.0
    argmax_ok = sharpen_ok = True
    for v in vectors:
        c = rng.uniform(-100, 100)
        for tau in (0.04, 0.1, 1.0):
            p = temperature_distribution(v, tau)
            worst_sum = max(worst_sum, abs(p.sum() - 1))
            worst_shift = max(worst_shift, np.max(np.abs(temperature_distribution(v + c, tau) - p)))
            argmax_ok &= int(np.argmax(p)) == int(np.argmax(v))
        if np.ptp(v) > 0:
            # compare the mass off the argmax, which stays resolvable in floating
            # point long after the argmax mass itself rounds to 1
            k = int(np.argmax(v))
            sharp, soft = temperature_distribution(v, 0.04), temperature_distribution(v, 0.1)
            sharpen_ok &= bool(sharp[k] > soft[k] or np.delete(sharp, k).sum() < np.delete(soft, k).sum())
    ok = worst_sum < 1e-9 and worst_shift < 1e-9 and argmax_ok and sharpen_ok
    record_acceptance(
        3,
        ok,
        f"sum err {worst_sum:.1e}, shift err {worst_shift:.1e} (tol 1e-9), argmax kept {argmax_ok}, sharpening {sharpen_ok}",
    )
    assert ok


# -- 4 ----------------------------------------------------------------------------------

OTHER_PHRASES = [
    "accelerate",
    "drift leftwards",
    "turn slightly up",
    "u-turn",
    "go straight ahead quickly",
    "the vehicle will turn left",
    "change lanes",
    "merge",
    "keep lane",
    "turn left or turn right",
    "",
    "none of the above",
    "shift slightly to the middle",
]


def test_criterion_04_encoding_bijection():
    labels = [(f, label) for f in ("control", "turn", "lane") for label in DEFAULT_VOCABULARY.labels(f)]
    round_trip = all(decode_one_hot(one_hot(label, f), f) == label for f, label in labels)
    merges = {
        ("turn", "turn slightly left"): "turn left",
        ("turn", "turn slightly right"): "turn right",
        ("lane", "shift slightly to the left"): "change lane to the left",
        ("lane", "shift slightly to the right"): "change lane to the right",
    }
    merges_ok = all(resolve_action(p, f) == c for (f, p), c in merges.items()) and len(DEFAULT_VOCABULARY.synonym_map) == 4
    oov = 0
    for family in ("control", "turn", "lane"):
        for phrase in OTHER_PHRASES:
            try:
                resolve_action(phrase, family)
            except OutOfVocabularyError:
                oov += 1
    ok = len(labels) == 13 and round_trip and merges_ok and oov == 3 * len(OTHER_PHRASES)
    record_acceptance(
        4, ok, f"{len(labels)} labels round-trip {round_trip}, 4 merges {merges_ok}, {oov}/{3 * len(OTHER_PHRASES)} other phrases rejected"
    )
    assert ok


# -- 5 ----------------------------------------------------------------------------------


def test_criterion_05_projection_oracle():
    rng = np.random.default_rng(5)
    pts = np.column_stack([rng.uniform(-20, 20, 4000), rng.uniform(-8, 8, 4000), rng.uniform(1, 80, 4000)])
    pix = camera_to_pixels(pts, K)
    inside = (pix[:, 0] >= 0) & (pix[:, 0] < 1600) & (pix[:, 1] >= 0) & (pix[:, 1] < 900)
    pix = pix[inside][:1000]
    round_trip = float(np.max(np.abs(camera_to_pixels(pixels_to_rays(pix, K), K) - pix)))

    traj = FutureTrajectory(np.array([[2.0, 20.0], [-3.0, 12.5], [0.7, 33.0], [-1.25, 7.5]]))
    poly = project_trajectory(traj, calib(mounted(1.5)))
    fixture_err = 0.0
    for (x, y), (u, v) in zip(traj.waypoints, poly.points):
        ou, ov = pinhole_oracle(x, y, 0, 1000, 1000, 800, 450, cam_height=1.5)
        fixture_err = max(fixture_err, abs(u - float(ou)), abs(v - float(ov)))

    behind = FutureTrajectory(np.array([[0.0, -1.0], [2.0, -5.0], [-1.0, -20.0], [0.0, 0.0]]))
    bpoly = project_trajectory(behind, calib(mounted(1.5)))
    nothing_drawn = not bpoly.visible_mask.any() and not red_pixels(render_overlay(blank(), bpoly)).size
    ok = len(pix) == 1000 and round_trip < 1e-6 and fixture_err < 1e-9 and nothing_drawn
    record_acceptance(
        5, ok, f"round trip {round_trip:.1e} px on {len(pix)} points (tol 1e-6), fixture {fixture_err:.1e} px (tol 1e-9), behind-camera hidden {nothing_drawn}"
    )
    assert ok


# -- 6 ----------------------------------------------------------------------------------


def test_criterion_06_prompt_fidelity():
    p1 = build_prompt(PromptFamily.FREEFORM).render().encode("utf-8")
    p2 = build_prompt(PromptFamily.ACTIONS).render().encode("utf-8")
    ok = p1 == (FIXTURES / "prompt_p1.txt").read_bytes() and p2 == (FIXTURES / "prompt_p2.txt").read_bytes()
    record_acceptance(6, ok, f"P1 {len(p1)} bytes, P2 {len(p2)} bytes byte-equal to transcribed fixtures")
    assert ok


# -- 7 and 8 -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_suite():
    """Validation average-L2 for aux off, aux with ``align`` and with ``mse``, per seed."""
    results, timing = {"off": [], "align": [], "mse": []}, {"off": 0.0, "align": 0.0, "mse": 0.0}
    finite = True
    for seed in SEEDS:
        for name in results:
            cfg = TrainingConfig(
                seed=seed,
                aux_enabled=name != "off",
                loss=LossConfig(alignment_variant="mse" if name == "mse" else "align"),
            )
            start = time.perf_counter()
            report, _, _ = run_experiment(cfg)
            timing[name] += time.perf_counter() - start
            results[name].append(report.val_l2["avg"])
            finite &= all(np.isfinite(v) for e in report.epochs for v in e.values())
    return results, timing, finite


@pytest.mark.slow
def test_criterion_07_toy_distillation_effect(toy_suite):
    results, timing, finite = toy_suite
    off, aux = np.array(results["off"]), np.array(results["align"])
    wins = int(np.sum(aux - off < 0))
    runtime = sum(timing.values())
    ok = finite and aux.mean() < off.mean() and wins >= 4 and runtime < 600
    record_acceptance(
        7,
        ok,
        f"mean val avg-L2 {aux.mean():.4f} with aux vs {off.mean():.4f} without, aux better on {wins}/5 seeds, "
        f"{runtime:.0f}s for all 15 runs (< 600s)",
    )
    assert ok


@pytest.mark.slow
def test_criterion_08_ablation_ordering(toy_suite):
    results, _, finite = toy_suite
    align, mse = float(np.mean(results["align"])), float(np.mean(results["mse"]))
    checks = {}
    for variant in ALIGNMENT_VARIANTS:
        heads, f_ego, y1, y2, cfg = tiny_problem(seed=8, variant=variant)
        value = total_loss_and_grad(y1, y2, heads.forward(f_ego), cfg)[0].total
        res = check_total_loss(heads, f_ego, y1, y2, cfg)
        checks[variant] = (np.isfinite(value), res.max_relative_error)
    grads_ok = all(f and err <= 1e-4 for f, err in checks.values())
    ok = finite and align <= mse and grads_ok
    worst = max(err for _, err in checks.values())
    record_acceptance(
        8, ok, f"align {align:.4f} <= mse {mse:.4f}; {len(checks)} variants finite, worst grad rel err {worst:.1e} (tol 1e-4)"
    )
    assert ok


# -- 9 ----------------------------------------------------------------------------------


def _stats_fixture():
    return [
        rec(0, "Driving straight.", actions=("go straight", "none", "none")),
        rec(1, "The car is turning left now.", actions=("move slowly", "turn left", "none")),
        rec(2, "Stopped at a red light.", actions=("stop", "none", "none")),
        rec(3, "Moving ahead in lane.", actions=("go straight", "none", "none")),
        rec(4, "Changing to the left lane quickly.", actions=("go straight", "none", "change lane to the left")),
    ]


def test_criterion_09_metrics_oracles():
    pred, obstacles = ten_frame_fixture()
    got = collision_rate(pred, obstacles)
    collision_ok = got["3s"] == 30.0 and all(
        got[name] == oracle_collision(pred, obstacles, t) for name, t in (("1s", 1), ("2s", 3), ("3s", 5))
    )

    gt = np.zeros((3, 6, 2))
    p = np.zeros((3, 6, 2))
    p[0, 1], p[1, 3], p[2, 5] = (3.0, 4.0), (0.0, 2.0), (1.0, 1.0)
    l2 = l2_displacement(p, gt)
    hand = {"1s": 5 / 3, "2s": 2 / 3, "3s": math.sqrt(2) / 3}
    hand["avg"] = sum(hand.values()) / 3
    l2_err = max(abs(l2[k] - hand[k]) for k in hand)

    stats = annotation_stats(_stats_fixture())
    stats_ok = stats["word_length"]["A_c"] == {"max": 6, "min": 2, "mean": 4.6}
    stats_ok &= stats["word_length"]["A_f"] == {"max": 3, "min": 3, "mean": 3.0}
    stats_ok &= stats["actions"]["control"]["go straight"] == 60.0

    report = aggregate_participants(PUBLISHED_PARTICIPANTS)
    averages = [round(report["average"][c], 2) for c in ("A_c", "A_f", "A_r", "A_control", "A_turn", "A_lane")]
    questionnaire_ok = averages == [4.48, 4.51, 4.42, 0.90, 0.90, 0.96]

    ok = collision_ok and l2_err < 1e-12 and stats_ok and questionnaire_ok
    record_acceptance(
        9,
        ok,
        f"collision@3s {got['3s']:.0f}% equals polygon oracle {collision_ok}, L2 err {l2_err:.1e} (tol 1e-12), "
        f"stats {stats_ok}, questionnaire average {averages[:3]} / {averages[3:]}",
    )
    assert ok


# -- 10 ---------------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path, capsys):
    ws = build_workspace(tmp_path / "ws")
    runs = []
    for tag in ("a", "b"):
        codes, files = run_every_subcommand(ws, tmp_path / tag)
        runs.append((codes, files, capsys.readouterr().out))
    ok = runs[0] == runs[1] and runs[0][0] == [0] * 8
    with capsys.disabled():
        record_acceptance(10, ok, f"8 subcommands exit 0; {len(runs[0][1])} outputs and stdout byte-identical across two runs")
    assert ok
