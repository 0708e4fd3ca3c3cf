"""Joint optimisation of scene, trajectory, exposure times and tone curve.

One frame is rendered per step; frames are visited in shuffled epochs drawn
from a seeded generator whose state is part of the checkpoint, so a resumed
run repeats an uninterrupted one exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import losses
from .datagen import Dataset, crf_fit_samples
from .imaging import CrfModel, ExposureSchedule, ImagingConfig, apply_crf, fit_crf_to_gamma, log_exposure, \
    synthesize_exposure
from .io import read_container, write_container
from .lie import Pose
from .losses import LossWeights
from .metrics import psnr, ssim
from .scene import Camera, GaussianScene, RasterConfig, rasterize
from .trajectory import SplineTrajectory, fit_knots

CHECKPOINT_KIND = "checkpoint"
GROUPS = ("means", "log_scales", "quats", "opacity_raw", "log_colors", "knots", "log_dt", "crf", "wb")


class ConfigError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    iterations: int = 4000
    lr_means: float = 1.6e-4
    lr_means_final: float = 0.01
    lr_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 1e-2
    lr_knots: float = 1e-3
    lr_log_dt: float = 2e-2
    lr_crf: float = 1e-4
    lr_wb: float = 1e-3
    crf_warmup: int = 2500
    lr_decay_final: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    clip_norm: float = 10.0
    seed: int = 0
    optimize_exposure: bool = True
    optimize_crf: bool = True
    optimize_trajectory: bool = True
    blur_model: bool = True
    exposure_init: str = "random"
    dt_guess_fraction: float = 0.25
    knot_ratio: float = 3.0
    fit_threshold: float = 1e-6
    prune_every: int = 500
    prune_threshold: float = 0.005
    log_every: int = 100
    init_opacity: float = 0.5

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.exposure_init not in ("random", "gt"):
            raise ConfigError("exposure_init must be 'random' or 'gt'")
        if self.lr_means_final <= 0 or self.lr_decay_final <= 0:
            raise ConfigError("final learning-rate multipliers must be positive")
        if self.crf_warmup < 0:
            raise ConfigError("crf_warmup must be non-negative")
        if self.knot_ratio <= 0:
            raise ConfigError("knot_ratio must be positive")

    def group_lr(self, name: str) -> float:
        return {
            "means": self.lr_means, "log_scales": self.lr_scales, "quats": self.lr_quats,
            "opacity_raw": self.lr_opacity, "log_colors": self.lr_colors, "knots": self.lr_knots,
            "log_dt": self.lr_log_dt, "crf": self.lr_crf, "wb": self.lr_wb,
        }[name]

    def enabled(self, name: str) -> bool:
        if name == "knots":
            return self.optimize_trajectory
        if name == "log_dt":
            return self.optimize_exposure
        if name in ("crf", "wb"):
            return self.optimize_crf
        return True


@dataclass
class TrainingState:
    scene: GaussianScene
    trajectory: SplineTrajectory
    schedule: ExposureSchedule
    crf: CrfModel
    config: TrainingConfig
    imaging: ImagingConfig
    weights: LossWeights
    raster: RasterConfig
    dt_max: float
    camera: Camera
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    order: list[int] = field(default_factory=list)
    fit_residual: float = 0.0
    optimizer: torch.optim.Adam | None = None

    def group_tensors(self) -> dict[str, list[torch.Tensor]]:
        return {
            "means": [self.scene.means], "log_scales": [self.scene.log_scales], "quats": [self.scene.quats],
            "opacity_raw": [self.scene.opacity_raw], "log_colors": [self.scene.log_colors],
            "knots": [self.trajectory.delta], "log_dt": [self.schedule.log_dt],
            "crf": self.crf.tm_parameters(), "wb": [self.crf.log_wb],
        }

    def enabled_groups(self) -> list[str]:
        return [g for g in GROUPS if self.config.enabled(g)]


# ---------------------------------------------------------------------------
# initialisation

def _build_optimizer(state: TrainingState) -> torch.optim.Adam:
    cfg = state.config
    tensors = state.group_tensors()
    groups = []
    for name in GROUPS:
        for t in tensors[name]:
            t.requires_grad_(cfg.enabled(name))
        if cfg.enabled(name):
            groups.append({"params": tensors[name], "lr": cfg.group_lr(name), "name": name})
    return torch.optim.Adam(groups, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def _initial_scene(points: np.ndarray, colors_linear: np.ndarray, opacity: float) -> GaussianScene:
    means = points[:, :3]
    k = min(4, len(means))
    if k > 1:
        dist, _ = cKDTree(means).query(means, k=k)
        spacing = dist[:, 1:].mean(1)
    else:
        spacing = np.ones(len(means))
    scales = np.repeat(np.maximum(0.5 * spacing, 1e-3)[:, None], 3, axis=1)
    return GaussianScene.from_values(means, scales, np.full(len(means), opacity), colors_linear)


def init_state(dataset: Dataset, cfg: TrainingConfig = TrainingConfig(), imaging: ImagingConfig = ImagingConfig(),
               weights: LossWeights = LossWeights(), raster: RasterConfig = RasterConfig()) -> TrainingState:
    """Initial state from the dataset's noisy poses, seed points and frames."""
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    t_b = dataset.schedule.t_b.clone()
    period = float(np.median(np.diff(t_b.numpy()))) if n > 1 else 1.0
    span_end = float(t_b[-1]) + period
    dt_max = period * (1.0 - 1e-6)

    fit = fit_knots(list(zip(dataset.noisy_times.tolist(), [dataset.noisy_poses[i] for i in range(n)])),
                    cfg.knot_ratio, span=(float(t_b[0]), span_end))
    traj = fit.trajectory

    if cfg.exposure_init == "gt":
        log_dt = dataset.schedule.log_dt.clone()
    else:
        guess = cfg.dt_guess_fraction * period
        log_dt = torch.as_tensor(np.log(guess) + rng.uniform(math.log(0.3), math.log(3.0), n))
    if bool((torch.exp(log_dt) > dt_max).any()):
        raise ConfigError("an exposure window is longer than the frame interval")
    schedule = ExposureSchedule(t_b, log_dt)
    lo, hi = traj.domain
    if float(t_b.min()) < lo or float(t_b.max()) + float(torch.exp(log_dt).max()) >= hi:
        raise ConfigError("exposure windows fall outside the fitted trajectory domain")

    # linear colours from observed LDR values through the inverse of the reference gamma curve
    median_dt = float(torch.exp(log_dt).median())
    ldr = np.clip(dataset.points[:, 3:6], 1e-3, 1.0)
    scene = _initial_scene(dataset.points, ldr ** 2.2 / median_dt, cfg.init_opacity)

    crf = CrfModel(n, global_wb=imaging.global_wb, seed=cfg.seed)
    with torch.no_grad():
        samples = []
        for k in range(n):
            e = synthesize_exposure(scene, traj, dataset.camera, t_b[k], log_dt[k], ImagingConfig(n_virtual=1),
                                    raster, k)
            samples.append(log_exposure(crf.wb(k) * e, imaging).reshape(-1))
        z = torch.cat(samples).numpy()
    z_fit = np.concatenate([np.quantile(z, np.linspace(0, 1, 120)), crf_fit_samples(imaging.eps_log)])
    fit_crf_to_gamma(crf, np.unique(z_fit))

    state = TrainingState(scene, traj, schedule, crf, cfg, imaging, weights, raster, dt_max, dataset.camera,
                          rng=rng, fit_residual=fit.residual)
    state.optimizer = _build_optimizer(state)
    return state


# ---------------------------------------------------------------------------
# stepping

def _next_frame(state: TrainingState, n: int) -> int:
    if not state.order:
        state.order = state.rng.permutation(n).tolist()
    return state.order.pop(0)


def _frame_imaging(state: TrainingState) -> ImagingConfig:
    if state.config.blur_model:
        return state.imaging
    return dataclasses.replace(state.imaging, n_virtual=1)


def render_frame(state: TrainingState, dataset: Dataset, k: int) -> torch.Tensor:
    e = synthesize_exposure(state.scene, state.trajectory, dataset.camera, state.schedule.t_b[k],
                            state.schedule.log_dt[k], _frame_imaging(state), state.raster, k)
    return apply_crf(e, state.crf, k, state.imaging)


def _set_learning_rates(state: TrainingState) -> None:
    cfg = state.config
    frac = min(state.iteration / max(cfg.iterations, 1), 1.0)
    for group in state.optimizer.param_groups:
        lr = cfg.group_lr(group["name"])
        if group["name"] == "means":
            lr = lr * cfg.lr_means_final ** frac
        else:
            # every other group decays exponentially to lr_decay_final of its rate
            lr = lr * cfg.lr_decay_final ** frac
        if group["name"] == "crf" and state.iteration < cfg.crf_warmup:
            lr = 0.0
        group["lr"] = lr


def step(state: TrainingState, dataset: Dataset, frame: int | None = None) -> dict[str, float]:
    """One Adam update on a single frame; returns the loss terms."""
    k = _next_frame(state, len(dataset)) if frame is None else frame
    _set_learning_rates(state)
    state.optimizer.zero_grad(set_to_none=True)
    rendered = render_frame(state, dataset, k)
    terms = losses.loss_terms(rendered, dataset.frames[k], state.weights)
    loss = terms["total"]
    if not torch.isfinite(loss):
        raise NonFiniteLoss(
            f"non-finite loss at iteration {state.iteration}, frame {k}: "
            f"dt={float(torch.exp(state.schedule.log_dt[k].detach()))!r}, "
            f"rendered range=({float(rendered.min())!r}, {float(rendered.max())!r})"
        )
    loss.backward()
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    torch.nn.utils.clip_grad_norm_(params, state.config.clip_norm)
    state.optimizer.step()
    with torch.no_grad():
        state.schedule.log_dt.clamp_(max=math.log(state.dt_max))
    state.iteration += 1
    out = {name: float(v.detach()) for name, v in terms.items()}
    out["frame"] = k
    return out


def prune(state: TrainingState) -> int:
    """Drop Gaussians whose opacity fell below the threshold; keeps Adam moments aligned."""
    with torch.no_grad():
        keep = state.scene.opacity() >= state.config.prune_threshold
    removed = int((~keep).sum())
    if removed == 0 or int(keep.sum()) == 0:
        return 0
    opt = state.optimizer
    new_scene = {}
    for group in opt.param_groups:
        if group["name"] not in GaussianScene.FIELDS:
            continue
        old = group["params"][0]
        new = old.detach()[keep].clone().requires_grad_(True)
        st = opt.state.pop(old, None)
        if st:
            st = {k: (v[keep].clone() if torch.is_tensor(v) and v.dim() > 0 else v) for k, v in st.items()}
            opt.state[new] = st
        group["params"][0] = new
        new_scene[group["name"]] = new
    for name in GaussianScene.FIELDS:
        setattr(state.scene, name, new_scene.get(name, getattr(state.scene, name).detach()[keep].clone()))
    return removed


# ---------------------------------------------------------------------------
# evaluation

def evaluate_sharp(state: TrainingState, dataset: Dataset, frames: list[int] | None = None) -> dict[str, float]:
    """PSNR/SSIM of sharp renders at each exposure midpoint against the sharp references."""
    frames = list(range(len(dataset))) if frames is None else frames
    p, s = [], []
    with torch.no_grad():
        for k in frames:
            dt = torch.exp(state.schedule.log_dt[k])
            pose = state.trajectory.pose_at(state.schedule.t_b[k] + dt / 2)
            hdr = rasterize(state.scene, pose, dataset.camera, state.raster)
            ldr = apply_crf(hdr * dt, state.crf, k, state.imaging).numpy()
            ref = dataset.sharp_ldr(k)
            p.append(psnr(ldr, ref))
            s.append(ssim(ldr, ref))
    return {"psnr": float(np.mean(p)), "ssim": float(np.mean(s))}


def train(dataset: Dataset, cfg: TrainingConfig = TrainingConfig(), imaging: ImagingConfig = ImagingConfig(),
          weights: LossWeights = LossWeights(), raster: RasterConfig = RasterConfig(),
          state: TrainingState | None = None, log_path=None,
          callback: Callable[[TrainingState, dict], None] | None = None,
          until: int | None = None) -> tuple[TrainingState, list[dict]]:
    """Run (or continue) optimisation up to ``cfg.iterations`` steps, or ``until`` if given.

    Every ``log_every`` steps a metrics record is appended to ``log_path``
    (JSON lines) and to the returned list.
    """
    if state is None:
        state = init_state(dataset, cfg, imaging, weights, raster)
    log = []
    window = []
    stop = state.config.iterations if until is None else min(until, state.config.iterations)
    while state.iteration < stop:
        terms = step(state, dataset)
        window.append(terms)
        if state.config.prune_every and state.iteration % state.config.prune_every == 0:
            prune(state)
        if state.iteration % state.config.log_every == 0 or state.iteration == state.config.iterations:
            record = {"iteration": state.iteration}
            for key in ("total", "rec", "exp", "l1", "d_ssim"):
                record[key] = float(np.mean([w[key] for w in window]))
            window = []
            if dataset.has_sharp():
                record.update({f"heldout_{k}": v for k, v in evaluate_sharp(state, dataset).items()})
            record["dt"] = torch.exp(state.schedule.log_dt).detach().tolist()
            record["gaussians"] = len(state.scene)
            log.append(record)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(record, sort_keys=True) + "\n")
            if callback is not None:
                callback(state, record)
    return state, log


# ---------------------------------------------------------------------------
# checkpoints

def _param_list(state: TrainingState) -> list[tuple[str, torch.Tensor]]:
    named = []
    for group in state.optimizer.param_groups:
        for j, p in enumerate(group["params"]):
            named.append((f"{group['name']}.{j}", p))
    return named


def save_checkpoint(state: TrainingState, path) -> None:
    arrays = {f"scene.{k}": v.detach().numpy() for k, v in state.scene.tensors().items()}
    arrays["traj.q"] = state.trajectory.knots.q.detach().numpy()
    arrays["traj.t"] = state.trajectory.knots.t.detach().numpy()
    arrays["traj.delta"] = state.trajectory.delta.detach().numpy()
    arrays["schedule.t_b"] = state.schedule.t_b.detach().numpy()
    arrays["schedule.log_dt"] = state.schedule.log_dt.detach().numpy()
    arrays.update({f"crf.{k}": v for k, v in state.crf.arrays().items()})
    steps = {}
    for name, p in _param_list(state):
        st = state.optimizer.state.get(p)
        if st:
            arrays[f"adam.{name}.m"] = st["exp_avg"].numpy()
            arrays[f"adam.{name}.v"] = st["exp_avg_sq"].numpy()
            steps[name] = float(st["step"])
    meta = {
        "config": dataclasses.asdict(state.config),
        "imaging": dataclasses.asdict(state.imaging),
        "weights": dataclasses.asdict(state.weights),
        "raster": dataclasses.asdict(state.raster),
        "trajectory": {"t0": state.trajectory.t0, "tau": state.trajectory.tau,
                       "coupled": state.trajectory.coupled},
        "crf": state.crf.meta(),
        "iteration": state.iteration,
        "dt_max": state.dt_max,
        "camera": state.camera.to_dict(),
        "fit_residual": state.fit_residual,
        "order": list(state.order),
        "rng": state.rng.bit_generator.state,
        "adam_steps": steps,
    }
    write_container(path, CHECKPOINT_KIND, arrays, meta)


def load_checkpoint(path) -> TrainingState:
    arrays, meta = read_container(path, CHECKPOINT_KIND)
    t = lambda name: torch.from_numpy(arrays[name])
    scene = GaussianScene(*(t(f"scene.{k}") for k in GaussianScene.FIELDS))
    tm = meta["trajectory"]
    traj = SplineTrajectory(Pose(t("traj.q"), t("traj.t")), tm["t0"], tm["tau"], tm["coupled"], t("traj.delta"))
    schedule = ExposureSchedule(t("schedule.t_b"), t("schedule.log_dt"))
    crf = CrfModel.from_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("crf.")}, meta["crf"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainingState(scene, traj, schedule, crf, TrainingConfig(**meta["config"]),
                          ImagingConfig(**meta["imaging"]), LossWeights(**meta["weights"]),
                          RasterConfig(**meta["raster"]), meta["dt_max"], Camera(**meta["camera"]),
                          meta["iteration"], rng, list(meta["order"]), meta["fit_residual"])
    state.optimizer = _build_optimizer(state)
    for name, p in _param_list(state):
        if name in meta["adam_steps"]:
            state.optimizer.state[p] = {
                "step": torch.tensor(meta["adam_steps"][name]),
                "exp_avg": t(f"adam.{name}.m"),
                "exp_avg_sq": t(f"adam.{name}.v"),
            }
    return state


def state_curve(state: TrainingState):
    """Tone curve of the state as a numpy function of ``(n, 3)`` log-exposures."""
    def curve(z):
        with torch.no_grad():
            return state.crf.tone_map(torch.as_tensor(np.asarray(z, dtype=np.float64))).numpy()
    return curve


def evaluate(state: TrainingState, dataset: Dataset) -> dict:
    """Full report: sharp-frame quality, ATE, exposure correlation, tone-curve error."""
    from .metrics import ate, crf_curve_error, exposure_correlation

    report = {"heldout": evaluate_sharp(state, dataset)}
    t_b = state.schedule.t_b
    tol = state.trajectory.tau / 2
    with torch.no_grad():
        est = state.trajectory.pose_at(t_b).t.numpy()
        ref = dataset.gt_trajectory().pose_at(t_b).t.numpy()
    report["ate"] = ate(t_b.numpy(), est, t_b.numpy(), ref, tol).to_dict()
    report["ate_init"] = ate(dataset.noisy_times, dataset.noisy_poses.t.numpy(), t_b.numpy(), ref, tol).to_dict()
    report["exposure"] = exposure_correlation(torch.exp(state.schedule.log_dt).detach().numpy(),
                                              dataset.schedule.dt().numpy()).to_dict()
    z_table, values = dataset.crf_table()
    z_range = dataset.meta.get("populated_log_exposure")
    report["crf"] = crf_curve_error(state_curve(state), z_table, values, z_range).to_dict()
    report["fit_residual"] = state.fit_residual
    report["iteration"] = state.iteration
    return report
