"""Command-line entry point: ``vlmdistill <subcommand> [flags]``.

Configuration comes from one YAML file with flat dotted keys (nested
mappings are flattened to the same keys). ``--seed``, ``--client``,
``--strict``, ``--out`` and repeated ``--set key=value`` override file
values. Machine-readable results go to ``--out``; human-readable tables go
to stdout; the resolved config is logged to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import annotation as ann
from .encoding import HashEncoder, TokenHashEncoder, encode_record, write_cache
from .errors import ConfigurationError, EmptyReportError, VlmDistillError
from .heads import AuxiliaryHeadConfig
from .losses import LossConfig
from .metrics import (
    Box,
    QuestionnaireRecord,
    aggregate_participants,
    annotation_stats,
    collision_rate,
    dumps_report,
    format_planning_table,
    format_questionnaire_table,
    format_stats_table,
    l2_displacement,
    questionnaire_report,
)
from .projection import (
    FutureTrajectory,
    LineStyle,
    load_calibration,
    load_image,
    overlay_trajectory,
    save_image,
)
from .toy import PlannerConfig, ToyPlanner, TrainingConfig, generate_dataset, run_experiment, scene_obstacles

log = logging.getLogger("vlmdistill")

FIXED_TIMESTAMP = "1970-01-01T00:00:00+00:00"

DEFAULTS: dict[str, object] = {
    "seed": None,
    "client": "mock",
    "strict": False,
    "out": None,
    "paths.manifest": None,
    "paths.store": None,
    "paths.replay": None,
    "paths.quarantine": None,
    "paths.checkpoint": None,
    "paths.predictions": None,
    "paths.questionnaire": None,
    "projection.ground_offset": 0.0,
    "projection.depth_epsilon": 0.1,
    "projection.stationary_threshold": 1.0,
    "projection.line_width": 4,
    "projection.line_color": [255, 0, 0],
    "annotate.max_workers": 4,
    "annotate.attempts": 3,
    "annotate.backoff": 0.5,
    "annotate.created_at": None,
    "encoder.kind": "hash",
    "encoder.dim": 512,
    "encoder.seed": 0,
    "heads.model_dim": 32,
    "heads.num_heads": 8,
    "heads.num_layers": 3,
    "heads.text_out_dim": 16,
    "heads.prenorm": False,
    "loss.tau_t": 0.04,
    "loss.tau_s": 0.1,
    "loss.lambda1": 1.0,
    "loss.lambda2": 0.1,
    "loss.alignment_variant": "align",
    "train.epochs": 60,
    "train.batch_size": 32,
    "train.learning_rate": 3e-3,
    "train.optimizer": "adam",
    "train.train_size": 2000,
    "train.val_size": 500,
    "train.stop_gradient": False,
    "train.compare": True,
    "train.include_timing": False,
    "eval.size": 500,
    "eval.data_seed": None,
    "report.ddof": 0,
}


def flatten(mapping: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    base_dir: Path = Path(".")

    def __getitem__(self, key: str):
        return self.values[key]

    def path(self, key: str, required: bool = True, must_exist: bool = True) -> Path | None:
        raw = self.values.get(key)
        if raw is None:
            if required:
                raise ConfigurationError(f"config key {key!r} is required for this command")
            return None
        p = Path(raw)
        if not p.is_absolute():
            p = self.base_dir / p
        if must_exist and not p.exists():
            raise ConfigurationError(f"{key}: {p} does not exist")
        return p

    def out(self) -> Path:
        if self.values.get("out") is None:
            raise ConfigurationError("an output path is required (--out or 'out' in the config)")
        return Path(self.values["out"])

    def loss(self) -> LossConfig:
        return LossConfig(
            tau_t=float(self["loss.tau_t"]),
            tau_s=float(self["loss.tau_s"]),
            lambda1=float(self["loss.lambda1"]),
            lambda2=float(self["loss.lambda2"]),
            alignment_variant=str(self["loss.alignment_variant"]),
        )

    def heads(self) -> AuxiliaryHeadConfig:
        return AuxiliaryHeadConfig(
            model_dim=int(self["heads.model_dim"]),
            num_heads=int(self["heads.num_heads"]),
            num_layers=int(self["heads.num_layers"]),
            text_out_dim=int(self["heads.text_out_dim"]),
            prenorm=bool(self["heads.prenorm"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.values, sort_keys=True, default=str)


def _parse_value(text: str):
    return yaml.safe_load(text)


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a mapping")
        flat = flatten(data)
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        cfg.values.update(flat)
        cfg.base_dir = path.parent
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or key not in DEFAULTS:
            raise ConfigurationError(f"bad override {item!r}")
        cfg.values[key] = _parse_value(value)
    for key in ("seed", "client", "out"):
        if getattr(args, key, None) is not None:
            cfg.values[key] = getattr(args, key)
    if args.strict:
        cfg.values["strict"] = True
    log.info("resolved config: %s", cfg.dumps())
    return cfg


# -- manifest -------------------------------------------------------------------


def read_manifest(cfg: RunConfig) -> list[dict]:
    """Frames listed one JSON object per line: sample_id, image, and for
    projection also calibration and waypoints. Relative paths resolve
    against the manifest's directory."""
    path = cfg.path("paths.manifest")
    frames = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}:{lineno}: {exc}") from exc
        if "sample_id" not in entry or "image" not in entry:
            raise ConfigurationError(f"{path}:{lineno}: sample_id and image are required")
        for key in ("image", "calibration"):
            if key in entry and not Path(entry[key]).is_absolute():
                entry[key] = str(path.parent / entry[key])
        frames.append(entry)
    ids = [f["sample_id"] for f in frames]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("manifest has duplicate sample_ids")
    return frames


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_report(obj), encoding="utf-8")


# -- subcommands ------------------------------------------------------------------


def cmd_project(cfg: RunConfig) -> int:
    frames = read_manifest(cfg)
    out = cfg.out()
    out.mkdir(parents=True, exist_ok=True)
    style = LineStyle(tuple(cfg["projection.line_color"]), int(cfg["projection.line_width"]))
    decisions, errors = [], 0
    for f in frames:
        sid = f["sample_id"]
        try:
            if "calibration" not in f or "waypoints" not in f:
                raise ConfigurationError("calibration and waypoints are required for projection")
            image = load_image(f["image"])
            calib = load_calibration(f["calibration"])
            traj = FutureTrajectory(np.asarray(f["waypoints"], dtype=float), float(f.get("timestep", 0.5)))
            overlay, polyline, still = overlay_trajectory(
                image,
                traj,
                calib,
                style,
                float(cfg["projection.ground_offset"]),
                float(cfg["projection.depth_epsilon"]),
                float(cfg["projection.stationary_threshold"]),
            )
            save_image(overlay, out / f"{sid}.png")
            decisions.append({"sample_id": sid, "stationary": still, "visible_points": int(polyline.visible_mask.sum())})
        except (VlmDistillError, OSError, ValueError) as exc:
            errors += 1
            log.error("%s: %s", sid, exc)
            decisions.append({"sample_id": sid, "error": str(exc)})
    _write_json(out / "projection.json", {"frames": decisions})
    for d in decisions:
        state = "error" if "error" in d else ("stationary" if d["stationary"] else f"{d['visible_points']} points")
        print(f"{d['sample_id']}: {state}")
    return 1 if errors and cfg["strict"] else 0


def _client(cfg: RunConfig):
    mode = cfg["client"]
    if mode == "mock":
        return ann.MockVlmClient(seed=int(cfg["seed"] or 0))
    if mode == "replay":
        scan = ann.store_scan(cfg.path("paths.replay"))
        return ann.ReplayClient(scan.records)
    if mode == "live":
        return ann.LiveVlmClient()
    raise ConfigurationError(f"unknown client mode {mode!r}")


def cmd_annotate(cfg: RunConfig) -> int:
    frames = read_manifest(cfg)
    client = _client(cfg)
    out = cfg.out()
    out.parent.mkdir(parents=True, exist_ok=True)
    created_at = cfg["annotate.created_at"]
    if created_at is None and cfg["client"] == "mock":
        created_at = FIXED_TIMESTAMP  # keeps mock stores byte-identical
    items = [(f["sample_id"], (lambda p=f["image"]: load_image(p))) for f in frames]
    summary = ann.annotate_batch(
        items,
        client,
        out,
        quarantine_path=cfg.path("paths.quarantine", required=False, must_exist=False),
        max_workers=int(cfg["annotate.max_workers"]),
        created_at=created_at,
        attempts=int(cfg["annotate.attempts"]),
        backoff=float(cfg["annotate.backoff"]),
    )
    print(
        f"written {len(summary.written)}, skipped {len(summary.skipped)}, "
        f"quarantined {len(summary.quarantined)}, failed {len(summary.failed)}"
    )
    return 1 if summary.has_errors and cfg["strict"] else 0


def _encoder(cfg: RunConfig):
    kind, dim, seed = cfg["encoder.kind"], int(cfg["encoder.dim"]), int(cfg["encoder.seed"])
    if kind == "hash":
        return HashEncoder(dim, seed)
    if kind == "token-hash":
        return TokenHashEncoder(dim, seed)
    raise ConfigurationError(f"unknown encoder {kind!r}")


def cmd_encode(cfg: RunConfig) -> int:
    scan = ann.store_scan(cfg.path("paths.store"), lenient=not cfg["strict"])
    if not scan.records:
        raise EmptyReportError("annotation store is empty")
    enc = _encoder(cfg)
    entries, errors = [], 0
    for rec in scan.records:
        try:
            entries.append(encode_record(rec, enc))
        except VlmDistillError as exc:
            errors += 1
            log.error("%s: %s", rec.sample_id, exc)
    n = write_cache(cfg.out(), entries)
    print(f"encoded {n} records with {enc.model_id}, {errors} errors, {len(scan.errors)} unreadable lines")
    return 1 if (errors or scan.errors) and cfg["strict"] else 0


def _training_config(cfg: RunConfig, aux: bool) -> TrainingConfig:
    heads = cfg.heads()
    return TrainingConfig(
        epochs=int(cfg["train.epochs"]),
        batch_size=int(cfg["train.batch_size"]),
        learning_rate=float(cfg["train.learning_rate"]),
        optimizer=str(cfg["train.optimizer"]),
        seed=int(cfg["seed"]),
        aux_enabled=aux,
        stop_gradient=bool(cfg["train.stop_gradient"]),
        loss=cfg.loss(),
        heads=heads,
        planner=PlannerConfig(model_dim=heads.model_dim),
        train_size=int(cfg["train.train_size"]),
        val_size=int(cfg["train.val_size"]),
    )


def cmd_train_toy(cfg: RunConfig) -> int:
    if cfg["seed"] is None:
        raise ConfigurationError("train-toy requires --seed")
    out = cfg.out()
    out.mkdir(parents=True, exist_ok=True)
    runs = {"aux": True, "baseline": False} if cfg["train.compare"] else {"aux": True}
    rows, reports = {}, {}
    for name, aux in runs.items():
        tcfg = _training_config(cfg, aux)
        report, planner, heads = run_experiment(tcfg)
        planner.save(out / f"planner_{name}.npz", {"seed": tcfg.seed, "aux_enabled": aux})
        if heads is not None:
            heads.save(out / "heads.npz", seed=tcfg.seed)
        reports[name] = report.to_dict(include_timing=bool(cfg["train.include_timing"]))
        rows[name] = {"l2": report.val_l2}
        log.info("%s run finished in %.1fs", name, report.wall_clock_s)
    _write_json(out / "training_report.json", reports)
    print(format_planning_table(rows))
    return 0


def _prediction_frames(cfg: RunConfig):
    path = cfg.path("paths.predictions", required=False)
    if path is not None:
        data = json.loads(path.read_text(encoding="utf-8"))
        frames = data.get("frames", [])
        if not frames:
            raise EmptyReportError("prediction file holds no frames")
        pred = np.array([f["pred"] for f in frames], dtype=float)
        gt = np.array([f["gt"] for f in frames], dtype=float)
        obstacles = [[[Box(**b) for b in step] for step in f.get("obstacles", [])] for f in frames]
        return pred, gt, obstacles
    planner = ToyPlanner.load(cfg.path("paths.checkpoint"))
    seed = cfg["eval.data_seed"] if cfg["eval.data_seed"] is not None else cfg["seed"]
    if seed is None:
        raise ConfigurationError("evaluating a checkpoint needs --seed or eval.data_seed")
    scenes = generate_dataset(int(cfg["eval.size"]), seed=2 * int(seed) + 1, prefix="val")
    pred = planner.predict(np.stack([s.descriptor for s in scenes]))
    gt = np.stack([s.trajectory for s in scenes])
    return pred, gt, [scene_obstacles(s) for s in scenes]


def cmd_eval(cfg: RunConfig) -> int:
    pred, gt, obstacles = _prediction_frames(cfg)
    result = {"l2": l2_displacement(pred, gt), "collision": collision_rate(pred, obstacles)}
    if cfg["out"] is not None:
        _write_json(cfg.out(), result)
    print(format_planning_table({"model": result}))
    return 0


def cmd_stats(cfg: RunConfig) -> int:
    scan = ann.store_scan(cfg.path("paths.store"), lenient=not cfg["strict"])
    stats = annotation_stats(scan.records)
    if cfg["out"] is not None:
        _write_json(cfg.out(), stats)
    print(format_stats_table(stats))
    return 1 if scan.errors and cfg["strict"] else 0


def cmd_report(cfg: RunConfig) -> int:
    """Questionnaire summary from either per-case records or per-participant rows."""
    data = json.loads(cfg.path("paths.questionnaire").read_text(encoding="utf-8"))
    ddof = int(cfg["report.ddof"])
    if "records" in data:
        records = [
            QuestionnaireRecord(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in r.items()})
            for r in data["records"]
        ]
        report = questionnaire_report(records, ddof=ddof)
    elif "participants" in data:
        report = aggregate_participants(data["participants"], ddof=ddof)
    else:
        raise EmptyReportError("questionnaire file holds neither records nor participants")
    if cfg["out"] is not None:
        _write_json(cfg.out(), report)
    print(format_questionnaire_table(report))
    return 0


COMMANDS = {
    "project": cmd_project,
    "annotate": cmd_annotate,
    "encode": cmd_encode,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "report": cmd_report,
}


COMMAND_HELP = {
    "project": "draw future trajectories onto front-view images",
    "annotate": "query the teacher for freeform and structured annotations",
    "encode": "turn an annotation store into a supervision cache",
    "train-toy": "train the synthetic planner with and without auxiliary heads",
    "eval": "L2 displacement and collision rate of predictions or a checkpoint",
    "stats": "word-length and action statistics of an annotation store",
    "report": "aggregate questionnaire scores",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlmdistill", description="Teacher annotations as auxiliary planner supervision.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name])
        p.add_argument("--config", help="YAML config with flat dotted keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--client", choices=("live", "mock", "replay"))
        p.add_argument("--strict", action="store_true", help="exit nonzero when any item fails")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("-q", "--quiet", action="store_true", help="log warnings and errors only")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except VlmDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
