"""Synthetic auto-exposure video with full ground truth.

A random Gaussian scene is filmed along a continuous trajectory. Every frame
is formed with the production image-formation model using a large number of
virtual views, so recovery from the frames is well posed by construction.

Directory layout::

    frames/frame_0000.png      blurred LDR frames
    sharp/frame_0000.pfm       sharp irradiance at each exposure midpoint
    sharp_ldr/frame_0000.png   sharp frame tone-mapped with that frame's dt and gains
    exposures.csv              index,t_b,dt
    trajectory_gt.txt          ground-truth spline knots
    poses_noisy.txt            perturbed poses at each t_b (initialisation input)
    points3d.txt               x y z r g b seed points
    crf_gt.csv                 log-exposure, r, g, b tone-curve samples
    ground_truth.chs           scene, tone curve and white balance
    meta.json                  intrinsics, settings, populated exposure range
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .imaging import (CrfModel, ExposureSchedule, ImagingConfig, apply_crf, crf_table, fit_crf_to_gamma,
                      form_frame, log_exposure, render_hdr)
from .io import read_container, read_pfm, read_png, read_pose_list, write_container, write_pfm, write_png, \
    write_pose_list
from .lie import Pose, se3_exp, so3_exp
from .scene import Camera, GaussianScene
from .trajectory import SplineTrajectory, geodesic_trajectory

TRAJECTORIES = ("orbit", "shake", "screw")
EXPOSURE_LAWS = ("constant", "ae", "random")
AE_TARGET = 0.45


@dataclass(frozen=True)
class SynthSpec:
    n_gaussians: int = 60
    width: int = 64
    height: int = 64
    n_frames: int = 40
    trajectory: str = "shake"
    shake_rotation: float = 0.04
    shake_translation: float = 0.05
    drift: float = 0.4
    exposure_law: str = "random"
    dt_min: float = 0.01
    dt_max: float = 0.08
    dt_constant: float = 0.03
    gamma: float = 2.2
    wb_jitter: float = 0.1
    n_gt: int = 64
    seed: int = 0
    frame_period: float = 0.1
    color_min: float = 0.05
    color_decades: float = 3.0
    pose_noise_deg: float = 0.5
    pose_noise_frac: float = 0.01
    point_noise: float = 0.05
    png_bits: int = 16

    def __post_init__(self):
        if min(self.width, self.height) < 8:
            raise ValueError("image size must be at least 8")
        if self.n_frames < 8:
            raise ValueError("need at least 8 frames")
        if not 0 < self.dt_min <= self.dt_max:
            raise ValueError("exposure range must be positive and ordered")
        if self.dt_max >= self.frame_period:
            raise ValueError("dt_max must be shorter than the frame period")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}")
        if self.exposure_law not in EXPOSURE_LAWS:
            raise ValueError(f"exposure_law must be one of {EXPOSURE_LAWS}")
        if self.n_gaussians < 1 or self.n_gt < 1:
            raise ValueError("n_gaussians and n_gt must be positive")

    def camera(self) -> Camera:
        f = float(self.width)
        return Camera(f, f, self.width / 2, self.height / 2, self.width, self.height)


def ae_controller(prev_brightness: float, prev_dt: float, dt_min: float = 0.0, dt_max: float = math.inf,
                  target: float = AE_TARGET) -> float:
    """Multiplicative auto-exposure update bounded to ``[dt_min, dt_max]``."""
    gain = min(max(target / max(prev_brightness, 1e-12), 0.7), 1.4)
    return min(max(prev_dt * gain, dt_min), dt_max)


# ---------------------------------------------------------------------------
# scene, trajectory and tone curve

def make_scene(spec: SynthSpec, rng: np.random.Generator) -> GaussianScene:
    n = spec.n_gaussians
    # spread over the view frustum with a wide depth range so parallax constrains translation
    depth = rng.uniform(2.5, 7.0, n)
    means = np.column_stack([rng.uniform(-0.45, 0.45, (n, 2)) * depth[:, None], depth])
    scales = depth[:, None] * np.exp(rng.uniform(math.log(0.04), math.log(0.09), (n, 3)))
    quats = rng.normal(size=(n, 4))
    opacity = rng.uniform(0.7, 0.98, n)
    level = np.exp(rng.uniform(0.0, spec.color_decades * math.log(10.0), n))
    tint = np.exp(rng.uniform(-0.3, 0.3, (n, 3)))
    colors = spec.color_min * level[:, None] * tint
    return GaussianScene.from_values(means, scales, opacity, colors, quats)


def _knot_layout(spec: SynthSpec) -> tuple[float, float, int]:
    tau = spec.frame_period / 4
    t_end = (spec.n_frames - 1) * spec.frame_period + spec.dt_max
    t0 = -2.0 * tau
    count = math.ceil((t_end + tau) / tau) + 4
    return tau, t0, count


def make_trajectory(spec: SynthSpec, rng: np.random.Generator) -> SplineTrajectory:
    tau, t0, count = _knot_layout(spec)
    times = t0 + tau * np.arange(count)
    duration = spec.n_frames * spec.frame_period
    if spec.trajectory == "screw":
        xi = np.array([0.0, 0.04, 0.0, 0.08, 0.0, 0.02]) * rng.choice([-1.0, 1.0])
        return geodesic_trajectory(xi, tau=tau, num_knots=count, t0=t0)
    if spec.trajectory == "orbit":
        center = np.array([0.0, 0.0, 4.75])
        theta = 0.15 * (2 * times / duration - 1)
        rot = np.column_stack([np.zeros(count), theta, np.zeros(count)])
        q = so3_exp(torch.as_tensor(rot))
        t = torch.as_tensor(center) - Pose(q, torch.zeros(count, 3, dtype=torch.float64)).rotation_matrix() \
            @ torch.as_tensor(center)
        return SplineTrajectory(Pose(q, t), t0, tau)
    # shake: slow drift plus sinusoidal jitter on every axis
    freq = rng.uniform(0.15, 0.4, (6,)) / spec.frame_period
    phase = rng.uniform(0, 2 * math.pi, (6,))
    wave = np.sin(2 * math.pi * freq[None] * times[:, None] + phase[None])
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    rot = spec.shake_rotation * wave[:, :3]
    trans = spec.shake_translation * wave[:, 3:] + spec.drift * (times[:, None] / duration) * direction
    return SplineTrajectory(Pose(so3_exp(torch.as_tensor(rot)), torch.as_tensor(trans)), t0, tau)


def make_crf(spec: SynthSpec, n_frames: int, rng: np.random.Generator) -> CrfModel:
    crf = CrfModel(n_frames, seed=spec.seed)
    fit_crf_to_gamma(crf, crf_fit_samples(), spec.gamma)
    gains = np.exp(rng.uniform(-spec.wb_jitter, spec.wb_jitter, (n_frames, 3)))
    crf.set_wb(gains)
    return crf


def crf_fit_samples(eps: float = 1e-6) -> np.ndarray:
    return np.linspace(math.log(eps), 4.0, 240)


# ---------------------------------------------------------------------------
# generation

def _noisy_poses(spec: SynthSpec, poses: Pose, scale: float, rng: np.random.Generator) -> Pose:
    n = len(poses)
    rot_sigma = math.radians(spec.pose_noise_deg) / math.sqrt(3)
    trans_sigma = spec.pose_noise_frac * scale / math.sqrt(3)
    noise = np.column_stack([rng.normal(0, rot_sigma, (n, 3)), rng.normal(0, trans_sigma, (n, 3))])
    return poses @ se3_exp(torch.as_tensor(noise), coupled=False)


def _seed_colors(scene: GaussianScene, poses: Pose, cam: Camera, frames: np.ndarray) -> np.ndarray:
    """Average LDR colour at each mean's projection over the frames that see it."""
    from .scene import project
    with torch.no_grad():
        uv = project(scene, poses, cam).means2d.numpy()
        valid = project(scene, poses, cam).valid.numpy()
    colors = np.zeros((len(scene), 3))
    counts = np.zeros(len(scene))
    for v in range(len(poses)):
        for i in range(len(scene)):
            col, row = int(math.floor(uv[v, i, 0])), int(math.floor(uv[v, i, 1]))
            if valid[v, i] and 0 <= col < cam.width and 0 <= row < cam.height:
                colors[i] += frames[v, row, col]
                counts[i] += 1
    counts = np.maximum(counts, 1)
    colors = colors / counts[:, None]
    return np.where(colors.sum(1, keepdims=True) > 0, colors, 0.5)


def _frame_times(spec: SynthSpec) -> np.ndarray:
    return spec.frame_period * np.arange(spec.n_frames, dtype=np.float64)


def _exposure_start(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.exposure_law == "random":
        return np.exp(rng.uniform(math.log(spec.dt_min), math.log(spec.dt_max), spec.n_frames))
    return np.full(spec.n_frames, spec.dt_constant)


def generate(spec: SynthSpec, out_dir) -> Path:
    """Write a complete dataset for ``spec`` into ``out_dir``."""
    out = Path(out_dir)
    for sub in ("frames", "sharp", "sharp_ldr"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    cam = spec.camera()
    scene = make_scene(spec, rng)
    traj = make_trajectory(spec, rng)
    crf = make_crf(spec, spec.n_frames, rng)
    t_b = _frame_times(spec)
    dt = _exposure_start(spec, rng)
    cfg = ImagingConfig(n_virtual=spec.n_gt)

    frames = np.zeros((spec.n_frames, spec.height, spec.width, 3))
    exposures = []
    with torch.no_grad():
        if spec.exposure_law == "ae":
            # let the controller settle on the first view before recording
            for _ in range(12):
                sched = ExposureSchedule.from_durations(t_b[:1], dt[:1])
                b = float(form_frame(scene, traj, cam, crf, sched, 0, cfg).mean())
                dt[0] = ae_controller(b, dt[0], spec.dt_min, spec.dt_max)
        for k in range(spec.n_frames):
            if spec.exposure_law == "ae" and k > 0:
                dt[k] = ae_controller(float(frames[k - 1].mean()), dt[k - 1], spec.dt_min, spec.dt_max)
            sched = ExposureSchedule.from_durations(t_b, dt)
            frames[k] = form_frame(scene, traj, cam, crf, sched, k, cfg).numpy()
            write_png(out / "frames" / f"frame_{k:04d}.png", frames[k], spec.png_bits)
            mid = traj.pose_at(torch.tensor(t_b[k] + dt[k] / 2, dtype=torch.float64))
            sharp = render_hdr(scene, mid, cam)
            write_pfm(out / "sharp" / f"frame_{k:04d}.pfm", sharp.numpy())
            sharp_ldr = apply_crf(sharp * dt[k], crf, k)
            write_png(out / "sharp_ldr" / f"frame_{k:04d}.png", sharp_ldr.numpy(), spec.png_bits)
            exposures.append(crf.wb(k) * sharp * dt[k])
        schedule = ExposureSchedule.from_durations(t_b, dt)
        schedule.save(out / "exposures.csv")
        traj.save(out / "trajectory_gt.txt")

        gt_poses = traj.pose_at(torch.as_tensor(t_b))
        centers = gt_poses.t.numpy()
        scale = float(np.linalg.norm(scene.means.numpy() - centers[0], axis=1).mean())
        noisy = _noisy_poses(spec, gt_poses, scale, rng)
        write_pose_list(out / "poses_noisy.txt", t_b, noisy.vector().numpy(), "t qw qx qy qz tx ty tz")

        points = scene.means.numpy() + rng.normal(0, spec.point_noise, (len(scene), 3))
        colors = _seed_colors(scene, gt_poses, cam, frames)
        lines = ["# x y z r g b"] + [" ".join(repr(float(v)) for v in row) for row in np.hstack([points, colors])]
        (out / "points3d.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

        z_all = log_exposure(torch.stack(exposures)).numpy().reshape(-1)
        z_range = [float(np.quantile(z_all, 0.01)), float(np.quantile(z_all, 0.99))]
        z_table = np.linspace(math.log(cfg.eps_log), math.log(1e3), 400)
        table = crf_table(crf, z_table)
        rows = ["log_exposure,r,g,b"] + [",".join(repr(float(v)) for v in (z, *vals)) for z, vals in zip(z_table, table)]
        (out / "crf_gt.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")

        arrays = {f"scene.{k}": v.numpy() for k, v in scene.tensors().items()}
        arrays.update({f"crf.{k}": v for k, v in crf.arrays().items()})
        write_container(out / "ground_truth.chs", "ground_truth", arrays, {"crf": crf.meta()})

    meta = {
        "camera": cam.to_dict(),
        "spec": dataclasses.asdict(spec),
        "populated_log_exposure": z_range,
        "scene_scale": scale,
        "frame_period": spec.frame_period,
        "eps_log": cfg.eps_log,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# loading

@dataclass
class Dataset:
    root: Path
    camera: Camera
    frames: torch.Tensor           # (F, H, W, 3) LDR
    schedule: ExposureSchedule     # ground-truth t_b and dt
    noisy_times: np.ndarray
    noisy_poses: Pose
    points: np.ndarray             # (N, 6)
    meta: dict

    def __len__(self) -> int:
        return self.frames.shape[0]

    def sharp_hdr(self, k: int) -> np.ndarray:
        return read_pfm(self.root / "sharp" / f"frame_{k:04d}.pfm").astype(np.float64)

    def sharp_ldr(self, k: int) -> np.ndarray:
        return read_png(self.root / "sharp_ldr" / f"frame_{k:04d}.png")

    def has_sharp(self) -> bool:
        return (self.root / "sharp_ldr").is_dir()

    def gt_trajectory(self) -> SplineTrajectory:
        return SplineTrajectory.load(self.root / "trajectory_gt.txt")

    def crf_table(self) -> tuple[np.ndarray, np.ndarray]:
        data = np.loadtxt(self.root / "crf_gt.csv", delimiter=",", skiprows=1)
        return data[:, 0], data[:, 1:]

    def ground_truth(self) -> tuple[GaussianScene, CrfModel]:
        arrays, meta = read_container(self.root / "ground_truth.chs", "ground_truth")
        scene = GaussianScene(*(torch.from_numpy(arrays[f"scene.{k}"]) for k in GaussianScene.FIELDS))
        crf = CrfModel.from_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("crf.")}, meta["crf"])
        return scene, crf


class DataError(ValueError):
    pass


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
        cam = Camera(**meta["camera"])
        schedule = ExposureSchedule.load(root / "exposures.csv")
        frames = np.stack([read_png(root / "frames" / f"frame_{k:04d}.png") for k in range(len(schedule))])
        times, vectors = read_pose_list(root / "poses_noisy.txt")
        points = np.loadtxt(root / "points3d.txt", comments="#", ndmin=2)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load dataset from {root}: {exc}") from exc
    if frames.shape[1:3] != (cam.height, cam.width):
        raise DataError("frame size does not match the camera")
    return Dataset(root, cam, torch.from_numpy(frames), schedule, times, Pose.from_vector(vectors), points, meta)
