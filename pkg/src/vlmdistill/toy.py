"""A desk-scale end-to-end planner for exercising the auxiliary heads.

Scenes are synthetic: a scripted maneuver drives a closed-form future
trajectory, a scene descriptor mixes the maneuver's latent factors
nonlinearly, and a template teacher writes the annotations. The planner
encodes the descriptor into ego tokens (the ego feature the heads read) and
regresses waypoints from the pooled tokens.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .annotation.records import FreeformAnnotation, StructuredActionAnnotation
from .encoding import TokenHashEncoder, encode_actions, encode_freeform
from .errors import ConfigurationError, InputError, TrainingError
from .heads import AuxiliaryHeadConfig, AuxiliaryHeads
from .losses import LossConfig, log_line, total_loss_and_grad
from .metrics import EGO_LENGTH, EGO_WIDTH, Box, l2_displacement
from .nn import MLP, ParameterStore
from .projection import DEFAULT_HORIZON, DEFAULT_TIMESTEP, FutureTrajectory, is_stationary

log = logging.getLogger(__name__)

MANEUVERS = ("straight", "left_turn", "right_turn", "stop", "lane_change_left", "lane_change_right")

# Frame shares of the teacher's action statistics on real driving logs:
# about 62% "go straight", 89.4% without a turn and 97.3% without a lane change.
DEFAULT_PROPORTIONS = {
    "straight": 0.620,
    "left_turn": 0.053,
    "right_turn": 0.053,
    "stop": 0.247,
    "lane_change_left": 0.0135,
    "lane_change_right": 0.0135,
}

MANEUVER_ACTIONS = {
    "straight": ("go straight", "none", "none"),
    "left_turn": ("move slowly", "turn left", "none"),
    "right_turn": ("move slowly", "turn right", "none"),
    "stop": ("stop", "none", "none"),
    "lane_change_left": ("go straight", "none", "change lane to the left"),
    "lane_change_right": ("go straight", "none", "change lane to the right"),
}

DESCRIPTOR_DIM = 16
WORLD_SEED = 7919  # fixes the descriptor mixing shared by every split
LANE_WIDTH = 3.5
TRAJECTORY_SCALE = 10.0  # planner outputs are in units of 10 m


@dataclass
class SyntheticScene:
    sample_id: str
    maneuver: str
    descriptor: np.ndarray
    trajectory: np.ndarray  # (T, 2) ego frame, x right, y forward
    freeform: FreeformAnnotation
    actions: StructuredActionAnnotation
    speed: float = 0.0
    lead_distance: float | None = None  # gap to the lead vehicle's rear bumper
    lead_speed: float = 0.0


# -- scene synthesis -------------------------------------------------------------


def _times(horizon: int, dt: float) -> np.ndarray:
    return dt * np.arange(1, horizon + 1)


def maneuver_curve(maneuver: str, speed: float, radius: float, t: np.ndarray) -> np.ndarray:
    """Noise-free waypoints for one maneuver at the given times."""
    if maneuver == "straight":
        return np.stack([np.zeros_like(t), speed * t], axis=1)
    if maneuver in ("left_turn", "right_turn"):
        theta = speed * t / radius
        x = radius * (1.0 - np.cos(theta))
        sign = -1.0 if maneuver == "left_turn" else 1.0
        return np.stack([sign * x, radius * np.sin(theta)], axis=1)
    if maneuver == "stop":
        # decelerate to rest by the end of the horizon
        total = t[-1]
        return np.stack([np.zeros_like(t), speed * t * (1.0 - t / (2.0 * total))], axis=1)
    if maneuver in ("lane_change_left", "lane_change_right"):
        u = t / t[-1]
        lateral = LANE_WIDTH * (3 * u**2 - 2 * u**3)
        sign = -1.0 if maneuver == "lane_change_left" else 1.0
        return np.stack([sign * lateral, speed * t], axis=1)
    raise InputError(f"unknown maneuver {maneuver!r}")


def _speed_word(v: float) -> str:
    if v < 2.0:
        return "almost at a standstill"
    if v < 6.0:
        return "slowly"
    if v < 9.0:
        return "at a steady pace"
    return "briskly"


def _describe(maneuver: str, v: float, cause: str, rng: np.random.Generator) -> FreeformAnnotation:
    pace = _speed_word(v)
    road = rng.choice(["urban road", "two-lane street", "wide avenue", "city street"])
    if maneuver == "straight":
        cur = f"The ego vehicle is driving straight {pace} along the {road}."
        fut = f"It will keep going straight in its current lane {pace}."
        why = f"The lane ahead is clear and the traffic flow is steady, so the vehicle continues straight on the {road}."
    elif maneuver in ("left_turn", "right_turn"):
        side = "left" if maneuver == "left_turn" else "right"
        cur = f"The ego vehicle is slowing {pace} and starting to turn {side} at the intersection."
        fut = f"It will complete the {side} turn and follow the road around the corner."
        why = f"The route continues to the {side} at this intersection, so the vehicle turns {side} carefully {pace}."
    elif maneuver == "stop":
        cur = f"The ego vehicle is stopped {pace} behind {cause}."
        fut = "It will remain stationary until the way ahead is clear."
        why = f"There is {cause} directly ahead, so the vehicle must stop and wait."
    else:
        side = "left" if maneuver == "lane_change_left" else "right"
        cur = f"The ego vehicle is driving {pace} and moving toward the {side} lane."
        fut = f"It will change lanes to the {side} and continue forward."
        why = f"A slow vehicle blocks the current lane while the {side} lane is free, so the vehicle changes lane to the {side}."
    return FreeformAnnotation(cur, fut, why)


@dataclass(frozen=True)
class SceneWorld:
    """Knobs of the synthetic world shared by every split.

    ``nuisance_factors`` are latent variables that enter the descriptor but
    not the trajectory. ``style_speed`` and ``style_drift`` perturb each
    trajectory with a per-scene driver style the descriptor does not reveal.
    """

    seed: int = WORLD_SEED
    descriptor_dim: int = DESCRIPTOR_DIM
    nuisance_factors: int = 6
    factor_noise: float = 0.05
    descriptor_noise: float = 0.02
    trajectory_noise: float = 0.05
    style_speed: float = 0.05
    style_drift: float = 0.1

    def mixing(self) -> tuple[np.ndarray, np.ndarray]:
        n = N_FACTORS + self.nuisance_factors
        rng = np.random.default_rng(self.seed)
        return rng.normal(0.0, 1.5 / np.sqrt(n), size=(n, self.descriptor_dim)), rng.normal(0.0, 0.3, size=self.descriptor_dim)


N_FACTORS = 7


def _sample_factors(maneuver: str, rng: np.random.Generator) -> tuple[dict, np.ndarray]:
    """Draw the latent scene state and return it with its factor vector."""
    radius = 1.0
    lead = None
    cause = ""
    red = 0.0
    signal = 0.0
    free_left, free_right = float(rng.random() < 0.5), float(rng.random() < 0.5)
    if maneuver == "straight":
        v = rng.uniform(5.0, 12.0)
        lead = rng.uniform(30.0, 60.0) if rng.random() < 0.5 else None
    elif maneuver in ("left_turn", "right_turn"):
        v = rng.uniform(3.0, 7.0)
        radius = rng.uniform(8.0, 20.0)
        signal = -1.0 if maneuver == "left_turn" else 1.0
    elif maneuver == "stop":
        v = rng.uniform(0.0, 0.5)
        if rng.random() < 0.6:
            red, cause = 1.0, "a red traffic light"
        else:
            lead, cause = rng.uniform(3.0, 8.0), "a stopped vehicle"
    else:
        v = rng.uniform(5.0, 12.0)
        lead = rng.uniform(12.0, 25.0)
        signal = -1.0 if maneuver == "lane_change_left" else 1.0
        free_left, free_right = (1.0, 0.0) if signal < 0 else (0.0, 1.0)
    curvature = (-1.0 if maneuver == "left_turn" else 1.0) * 8.0 / radius if "turn" in maneuver else 0.0
    lead_feat = 1.0 - min(lead, 60.0) / 60.0 if lead is not None else 0.0
    factors = np.array([v / 6.0 - 1.0, curvature, lead_feat, red, signal, free_left - free_right, radius / 10.0])
    lead_speed = {"straight": v, "stop": 0.0}.get(maneuver, 0.5 * v)
    state = {"speed": v, "radius": radius, "lead": lead, "cause": cause, "lead_speed": lead_speed}
    return state, factors


def make_scene(
    maneuver: str,
    rng: np.random.Generator,
    sample_id: str,
    world: SceneWorld,
    mixing: tuple[np.ndarray, np.ndarray] | None = None,
    horizon: int = DEFAULT_HORIZON,
    dt: float = DEFAULT_TIMESTEP,
) -> SyntheticScene:
    weights, bias = mixing if mixing is not None else world.mixing()
    state, factors = _sample_factors(maneuver, rng)
    latent = np.concatenate([factors, rng.normal(0.0, 1.0, size=world.nuisance_factors)])
    latent = latent + rng.normal(0.0, world.factor_noise, size=latent.shape)
    descriptor = np.tanh(latent @ weights + bias) + rng.normal(0.0, world.descriptor_noise, size=weights.shape[1])
    t = _times(horizon, dt)
    if maneuver == "stop":
        traj = maneuver_curve(maneuver, state["speed"], state["radius"], t) + rng.normal(0.0, 0.01, size=(horizon, 2))
    else:
        speed = state["speed"] * (1.0 + world.style_speed * rng.standard_normal())
        traj = maneuver_curve(maneuver, speed, state["radius"], t)
        traj[:, 0] += world.style_drift * rng.standard_normal() * t**2
        traj += rng.normal(0.0, world.trajectory_noise, size=traj.shape)
    return SyntheticScene(
        sample_id=sample_id,
        maneuver=maneuver,
        descriptor=descriptor,
        trajectory=traj,
        freeform=_describe(maneuver, state["speed"], state["cause"], rng),
        actions=StructuredActionAnnotation(*MANEUVER_ACTIONS[maneuver]),
        speed=float(state["speed"]),
        lead_distance=state["lead"],
        lead_speed=float(state["lead_speed"]),
    )


def generate_dataset(
    n: int,
    seed: int,
    proportions: dict[str, float] | None = None,
    world: SceneWorld | None = None,
    prefix: str = "scene",
) -> list[SyntheticScene]:
    if n <= 0:
        raise InputError("dataset size must be positive")
    world = world if world is not None else SceneWorld()
    props = dict(DEFAULT_PROPORTIONS if proportions is None else proportions)
    if set(props) - set(MANEUVERS) or any(p < 0 for p in props.values()) or sum(props.values()) <= 0:
        raise ConfigurationError(f"bad maneuver proportions {props}")
    names = [m for m in MANEUVERS if props.get(m, 0) > 0]
    probs = np.array([props[m] for m in names], dtype=float)
    probs /= probs.sum()
    rng = np.random.default_rng(seed)
    mixing = world.mixing()
    classes = rng.choice(len(names), size=n, p=probs)
    return [make_scene(names[c], rng, f"{prefix}-{seed}-{i:05d}", world, mixing) for i, c in enumerate(classes)]


def scene_obstacles(scene: SyntheticScene, dt: float = DEFAULT_TIMESTEP) -> list[list[Box]]:
    """Lead-vehicle boxes at each future timestep (empty lists without a lead)."""
    T = len(scene.trajectory)
    if scene.lead_distance is None:
        return [[] for _ in range(T)]
    y0 = scene.lead_distance + EGO_LENGTH / 2
    return [[Box(0.0, y0 + scene.lead_speed * dt * (k + 1), EGO_LENGTH, EGO_WIDTH, np.pi / 2)] for k in range(T)]


def class_counts(scenes: list[SyntheticScene]) -> dict[str, int]:
    return {m: sum(s.maneuver == m for s in scenes) for m in MANEUVERS}


# -- planner ---------------------------------------------------------------------


@dataclass(frozen=True)
class PlannerConfig:
    descriptor_dim: int = DESCRIPTOR_DIM
    model_dim: int = 32
    num_tokens: int = 2
    hidden_dim: int = 64
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self) -> None:
        if min(self.descriptor_dim, self.model_dim, self.num_tokens, self.hidden_dim, self.horizon) <= 0:
            raise ConfigurationError("planner dimensions must be positive")


class ToyPlanner:
    """Scene encoder (descriptor -> L x D ego tokens) and planning head."""

    def __init__(self, config: PlannerConfig = PlannerConfig(), seed: int = 0, store: ParameterStore | None = None):
        self.config = config
        self.store = store if store is not None else ParameterStore()
        rng = np.random.default_rng(seed)
        c = config
        self.encoder = MLP(self.store, "encoder", [c.descriptor_dim, c.hidden_dim, c.num_tokens * c.model_dim], rng)
        self.head = MLP(self.store, "plan", [c.model_dim, c.hidden_dim, c.horizon * 2], rng)

    def encode(self, descriptors: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(descriptors, dtype=float))
        if x.shape[-1] != self.config.descriptor_dim:
            raise ConfigurationError(f"descriptor must have {self.config.descriptor_dim} entries")
        return self.encoder.forward(x).reshape(len(x), self.config.num_tokens, self.config.model_dim)

    def plan(self, f_ego: np.ndarray) -> np.ndarray:
        out = self.head.forward(f_ego.mean(axis=1))
        return TRAJECTORY_SCALE * out.reshape(len(f_ego), self.config.horizon, 2)

    def forward(self, descriptors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        f_ego = self.encode(descriptors)
        return f_ego, self.plan(f_ego)

    def backward_plan(self, grad_traj: np.ndarray) -> np.ndarray:
        g = self.head.backward(TRAJECTORY_SCALE * grad_traj.reshape(len(grad_traj), -1))
        return np.repeat(g[:, None, :] / self.config.num_tokens, self.config.num_tokens, axis=1)

    def backward_encode(self, grad_ego: np.ndarray) -> None:
        self.encoder.backward(grad_ego.reshape(len(grad_ego), -1))

    def predict(self, descriptors: np.ndarray) -> np.ndarray:
        return self.forward(descriptors)[1]

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        self.store.save(path, {"planner": asdict(self.config), **(extra or {})})

    @classmethod
    def load(cls, path: str | Path) -> ToyPlanner:
        store, header = ParameterStore.load(path)
        return cls(PlannerConfig(**header["planner"]), store=store)


# -- optimizers --------------------------------------------------------------------


class SGD:
    def __init__(self, stores: list[ParameterStore], lr: float):
        self.lr = lr
        self.buffers = [s.flatten() for s in stores]

    def step(self) -> None:
        for p, g in self.buffers:
            p -= self.lr * g


class Adam:
    def __init__(self, stores: list[ParameterStore], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.buffers = [s.flatten() for s in stores]
        self.m = [np.zeros_like(p) for p, _ in self.buffers]
        self.v = [np.zeros_like(p) for p, _ in self.buffers]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        step_size = self.lr / (1 - b1**self.t)
        c2 = 1 - b2**self.t
        for (p, g), m, v in zip(self.buffers, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= step_size * m / (np.sqrt(v / c2) + self.eps)


# -- training ------------------------------------------------------------------------


@dataclass
class TrainingConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0
    aux_enabled: bool = True
    stop_gradient: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    heads: AuxiliaryHeadConfig = field(default_factory=lambda: AuxiliaryHeadConfig(model_dim=32, text_out_dim=16))
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    world: SceneWorld = field(default_factory=SceneWorld)
    train_size: int = 2000
    val_size: int = 500
    log_every: int = 0

    def __post_init__(self) -> None:
        if min(self.epochs, self.batch_size, self.train_size, self.val_size) <= 0:
            raise ConfigurationError("epochs, batch size and dataset sizes must be positive")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.heads.model_dim != self.planner.model_dim:
            raise ConfigurationError("head and planner model_dim must agree")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = self.heads.to_dict()
        return d


@dataclass
class TrainingReport:
    seed: int
    config: dict
    epochs: list[dict]
    val_l2: dict[str, float] | None = None
    steps: int = 0
    wall_clock_s: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_s")
        return d


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for planner init, head init and batch order."""
    planner, heads, batches = np.random.SeedSequence(seed).spawn(3)
    return {
        "planner": np.random.default_rng(planner),
        "heads": np.random.default_rng(heads),
        "batches": np.random.default_rng(batches),
    }


def _stream_seed(gen: np.random.Generator) -> int:
    return int(gen.integers(0, 2**31 - 1))


@dataclass
class Supervision:
    y_text: list[np.ndarray]  # three (N, C)
    y_action: list[np.ndarray]  # (N, 4), (N, 4), (N, 5)


def build_supervision(scenes: list[SyntheticScene], dim: int, seed: int = 0) -> Supervision:
    enc = TokenHashEncoder(dim, seed)
    text = [encode_freeform(s.freeform, enc) for s in scenes]
    acts = [encode_actions(s.actions) for s in scenes]
    return Supervision(
        y_text=[np.stack([getattr(t, k) for t in text]) for k in ("y_c", "y_f", "y_r")],
        y_action=[np.stack([a.as_tuple()[i] for a in acts]) for i in range(3)],
    )


def planning_loss_and_grad(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared waypoint error over batch, waypoints and coordinates."""
    diff = pred - gt
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def build_models(cfg: TrainingConfig) -> tuple[ToyPlanner, AuxiliaryHeads | None, np.random.Generator]:
    streams = rng_streams(cfg.seed)
    planner = ToyPlanner(cfg.planner, seed=_stream_seed(streams["planner"]))
    heads = AuxiliaryHeads(cfg.heads, seed=_stream_seed(streams["heads"])) if cfg.aux_enabled else None
    return planner, heads, streams["batches"]


def train(
    planner: ToyPlanner,
    dataset: list[SyntheticScene],
    cfg: TrainingConfig,
    heads: AuxiliaryHeads | None = None,
    supervision: Supervision | None = None,
    batch_rng: np.random.Generator | None = None,
    val: list[SyntheticScene] | None = None,
) -> TrainingReport:
    """Joint training: planning loss plus, with ``aux_enabled``, the weighted
    auxiliary losses computed by ``heads`` on the planner's ego tokens."""
    if not dataset:
        raise InputError("training set is empty")
    if cfg.aux_enabled and heads is None:
        raise ConfigurationError("aux_enabled requires auxiliary heads")
    start = time.perf_counter()
    X = np.stack([s.descriptor for s in dataset])
    Y = np.stack([s.trajectory for s in dataset])
    if cfg.aux_enabled and supervision is None:
        supervision = build_supervision(dataset, cfg.heads.text_out_dim)
    rng = batch_rng if batch_rng is not None else rng_streams(cfg.seed)["batches"]
    stores = [planner.store] + ([heads.store] if cfg.aux_enabled else [])
    opt = Adam(stores, cfg.learning_rate) if cfg.optimizer == "adam" else SGD(stores, cfg.learning_rate)
    epochs, step = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        sums = {"planning_loss": 0.0, "l_align": 0.0, "l_action": 0.0}
        batches = 0
        for lo in range(0, len(X), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            for s in stores:
                s.zero_grad()
            f_ego, pred = planner.forward(X[idx])
            loss, g_pred = planning_loss_and_grad(pred, Y[idx])
            g_ego = planner.backward_plan(g_pred)
            total = loss
            if cfg.aux_enabled:
                outputs = heads.forward(f_ego)
                breakdown, g_out = total_loss_and_grad(
                    [y[idx] for y in supervision.y_text], [y[idx] for y in supervision.y_action], outputs, cfg.loss
                )
                g_aux = heads.backward(g_out)
                if not cfg.stop_gradient:
                    g_ego = g_ego + g_aux
                total += breakdown.total
                sums["l_align"] += breakdown.l_align
                sums["l_action"] += breakdown.l_action
                if cfg.log_every and step % cfg.log_every == 0:
                    log.info(log_line(step, breakdown))
            if not np.isfinite(total):
                raise TrainingError("non-finite training loss", step)
            planner.backward_encode(g_ego)
            opt.step()
            sums["planning_loss"] += loss
            batches += 1
            step += 1
        row = {"epoch": epoch, "planning_loss": sums["planning_loss"] / batches}
        if cfg.aux_enabled:
            row["l_align"] = sums["l_align"] / batches
            row["l_action"] = sums["l_action"] / batches
        epochs.append(row)
    report = TrainingReport(seed=cfg.seed, config=cfg.to_dict(), epochs=epochs, steps=step)
    if val:
        report.val_l2 = evaluate(planner, val)
    report.wall_clock_s = time.perf_counter() - start
    return report


def evaluate(planner: ToyPlanner, dataset: list[SyntheticScene]) -> dict[str, float]:
    """Validation L2 at 1 s / 2 s / 3 s and their average."""
    if not dataset:
        raise InputError("evaluation set is empty")
    X = np.stack([s.descriptor for s in dataset])
    gt = np.stack([s.trajectory for s in dataset])
    return l2_displacement(planner.predict(X), gt)


def run_experiment(cfg: TrainingConfig, data_seed: int | None = None) -> tuple[TrainingReport, ToyPlanner, AuxiliaryHeads | None]:
    """Generate train/validation scenes, build models from ``cfg.seed`` and train."""
    ds = cfg.seed if data_seed is None else data_seed
    train_set = generate_dataset(cfg.train_size, seed=2 * ds, world=cfg.world, prefix="train")
    val_set = generate_dataset(cfg.val_size, seed=2 * ds + 1, world=cfg.world, prefix="val")
    planner, heads, batch_rng = build_models(cfg)
    report = train(planner, train_set, cfg, heads=heads, batch_rng=batch_rng, val=val_set)
    return report, planner, heads


def stationary_ok(scene: SyntheticScene) -> bool:
    return is_stationary(FutureTrajectory(scene.trajectory, DEFAULT_TIMESTEP))
