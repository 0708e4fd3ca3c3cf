"""Image formation: exposure-window blur, white balance and per-channel tone mapping.

An LDR frame is produced as

    e   = dt * mean_k H(P(t_b + dt * (k + offset) / N))     (exposure)
    v   = wb * e                                             (white balance)
    out = TM(ln(v + eps))                                    (tone mapping, per channel)

where ``H`` is the sharp irradiance render and ``offset`` is 0 (left endpoints)
or 0.5 (midpoints).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import least_squares

from .io import read_container, write_container
from .lie import Pose, as_tensor
from .scene import Camera, GaussianScene, RasterConfig, rasterize
from .trajectory import OutOfDomain, SplineTrajectory

HIDDEN = 16
# float64 sigmoid stays strictly inside (0, 1) for |logit| <= 36
LOGIT_LIMIT = 36.0


@dataclass(frozen=True)
class ImagingConfig:
    n_virtual: int = 10
    eps_log: float = 1e-6
    midpoint: bool = False
    global_wb: bool = False

    def __post_init__(self):
        if self.n_virtual < 1:
            raise ValueError("n_virtual must be >= 1")
        if self.eps_log <= 0:
            raise ValueError("eps_log must be positive")


@dataclass
class ExposureSchedule:
    """Shutter-open times and log exposure durations, one entry per frame."""

    t_b: torch.Tensor
    log_dt: torch.Tensor

    @classmethod
    def from_durations(cls, t_b, dt) -> "ExposureSchedule":
        dt = as_tensor(dt)
        if bool((dt <= 0).any()):
            raise ValueError("exposure durations must be positive")
        return cls(as_tensor(t_b).clone(), torch.log(dt))

    def __len__(self) -> int:
        return self.t_b.shape[0]

    def dt(self) -> torch.Tensor:
        return torch.exp(self.log_dt)

    def copy(self) -> "ExposureSchedule":
        return ExposureSchedule(self.t_b.detach().clone(), self.log_dt.detach().clone())

    def to_csv(self) -> str:
        lines = ["index,t_b,dt"]
        for k, (tb, dt) in enumerate(zip(self.t_b.tolist(), self.dt().detach().tolist())):
            lines.append(f"{k},{tb!r},{dt!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "ExposureSchedule":
        rows = [line.split(",") for line in text.strip().splitlines()[1:] if line.strip()]
        rows.sort(key=lambda r: int(r[0]))
        return cls.from_durations([float(r[1]) for r in rows], [float(r[2]) for r in rows])

    @classmethod
    def load(cls, path) -> "ExposureSchedule":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


class CrfModel:
    """Per-channel tone-mapping MLPs plus per-frame white-balance gains.

    Each channel maps ``z = ln(v + eps)`` through a fixed affine normalisation,
    two softplus layers of 16 units and a sigmoid. The three networks are
    stored as stacked tensors with a leading channel axis.

    White-balance gains are stored as logs and normalised to a geometric mean
    of 1 per frame, so a uniform brightness change is carried by the exposure
    time alone.
    """

    PARAMS = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, n_frames: int, *, global_wb: bool = False, z_center: float = -6.0,
                 z_scale: float = 6.0, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        # first-layer kinks spread over the normalised input range
        self.w1 = torch.full((3, HIDDEN), 1.5, dtype=torch.float64)
        self.b1 = -1.5 * torch.linspace(-1.6, 1.6, HIDDEN, dtype=torch.float64).repeat(3, 1)
        self.w2 = torch.randn(3, HIDDEN, HIDDEN, generator=gen, dtype=torch.float64) / HIDDEN
        self.b2 = torch.zeros(3, HIDDEN, dtype=torch.float64)
        self.w3 = torch.randn(3, HIDDEN, generator=gen, dtype=torch.float64) / math.sqrt(HIDDEN)
        self.b3 = torch.zeros(3, dtype=torch.float64)
        self.log_wb = torch.zeros(1 if global_wb else n_frames, 3, dtype=torch.float64)
        self.n_frames = n_frames
        self.z_center = z_center
        self.z_scale = z_scale

    # parameters --------------------------------------------------------
    def tm_parameters(self) -> list[torch.Tensor]:
        return [getattr(self, name) for name in self.PARAMS]

    def flat_tm(self, channel: int) -> torch.Tensor:
        return torch.cat([p[channel].reshape(-1) for p in self.tm_parameters()])

    def set_flat_tm(self, channel: int, flat) -> None:
        flat = as_tensor(flat)
        offset = 0
        with torch.no_grad():
            for p in self.tm_parameters():
                n = p[channel].numel()
                p[channel] = flat[offset:offset + n].reshape(p[channel].shape)
                offset += n

    def copy(self) -> "CrfModel":
        out = CrfModel.__new__(CrfModel)
        out.__dict__.update({k: (v.detach().clone() if torch.is_tensor(v) else v) for k, v in self.__dict__.items()})
        return out

    @property
    def global_wb(self) -> bool:
        return self.log_wb.shape[0] == 1 and self.n_frames != 1

    # evaluation --------------------------------------------------------
    def wb(self, frame) -> torch.Tensor:
        """Normalised gains of one frame (or a tensor of frames)."""
        idx = frame if not self.global_wb else 0
        lw = self.log_wb[idx]
        return torch.exp(lw - lw.mean(-1, keepdim=True))

    def set_wb(self, gains) -> None:
        """Set raw gains, shape ``(frames, 3)`` or ``(3,)`` for all frames."""
        logs = torch.log(as_tensor(gains))
        with torch.no_grad():
            self.log_wb[:] = logs.expand_as(self.log_wb)

    def tone_map(self, z: torch.Tensor, params: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Apply TM to log-exposures ``z`` of shape ``(..., 3)``."""
        w1, b1, w2, b2, w3, b3 = params if params is not None else self.tm_parameters()
        x = (z - self.z_center) / self.z_scale
        h = torch.nn.functional.softplus(x[..., :, None] * w1 + b1)          # (...,3,16)
        h = torch.nn.functional.softplus(torch.einsum("...ci,cji->...cj", h, w2) + b2)
        return torch.sigmoid(torch.clamp((h * w3).sum(-1) + b3, -LOGIT_LIMIT, LOGIT_LIMIT))

    def tone_map_channel(self, z: torch.Tensor, channel: int, flat: torch.Tensor | None = None,
                         logits: bool = False) -> torch.Tensor:
        """TM of one channel for a 1-D tensor of log-exposures (pre-sigmoid if ``logits``)."""
        if flat is None:
            flat = self.flat_tm(channel)
        sizes = [p[channel].numel() for p in self.tm_parameters()]
        w1, b1, w2, b2, w3, b3 = torch.split(flat, sizes)
        x = (z - self.z_center) / self.z_scale
        h = torch.nn.functional.softplus(x[:, None] * w1 + b1)
        h = torch.nn.functional.softplus(h @ w2.reshape(HIDDEN, HIDDEN).T + b2)
        out = h @ w3 + b3
        return out if logits else torch.sigmoid(torch.clamp(out, -LOGIT_LIMIT, LOGIT_LIMIT))

    # serialization -----------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name).detach().numpy() for name in self.PARAMS}
        out["log_wb"] = self.log_wb.detach().numpy()
        return out

    def meta(self) -> dict:
        return {"n_frames": self.n_frames, "z_center": self.z_center, "z_scale": self.z_scale}

    @classmethod
    def from_arrays(cls, arrays, meta) -> "CrfModel":
        out = cls(int(meta["n_frames"]), z_center=float(meta["z_center"]), z_scale=float(meta["z_scale"]))
        for name in cls.PARAMS + ("log_wb",):
            setattr(out, name, torch.from_numpy(np.array(arrays[name])))
        return out

    def save(self, path) -> None:
        write_container(path, "crf", self.arrays(), self.meta())

    @classmethod
    def load(cls, path) -> "CrfModel":
        arrays, meta = read_container(path, "crf")
        return cls.from_arrays(arrays, meta)


def log_exposure(v: torch.Tensor, cfg: ImagingConfig = ImagingConfig()) -> torch.Tensor:
    return torch.log(v + cfg.eps_log)


def virtual_times(t_b, log_dt, cfg: ImagingConfig = ImagingConfig()) -> torch.Tensor:
    dt = torch.exp(as_tensor(log_dt))
    offset = 0.5 if cfg.midpoint else 0.0
    k = torch.arange(cfg.n_virtual, dtype=torch.float64)
    return as_tensor(t_b) + dt * (k + offset) / cfg.n_virtual


def synthesize_exposure(scene: GaussianScene, traj: SplineTrajectory, cam: Camera, t_b, log_dt,
                        cfg: ImagingConfig = ImagingConfig(), raster: RasterConfig = RasterConfig(),
                        frame: int | None = None) -> torch.Tensor:
    """Blurred exposure ``dt * mean_k H_k`` of one frame, shape ``(H, W, 3)``."""
    log_dt = as_tensor(log_dt)
    times = virtual_times(t_b, log_dt, cfg)
    try:
        poses = traj.pose_at(times)
    except OutOfDomain as exc:
        where = "" if frame is None else f"frame {frame}: "
        raise OutOfDomain(f"{where}{exc}") from None
    sharp = rasterize(scene, poses, cam, raster)
    return torch.exp(log_dt) * sharp.mean(0)


def apply_crf(e: torch.Tensor, crf: CrfModel, frame, cfg: ImagingConfig = ImagingConfig()) -> torch.Tensor:
    """LDR values ``TM(ln(wb * e + eps))`` in ``(0, 1)``."""
    return crf.tone_map(log_exposure(crf.wb(frame) * e, cfg))


def form_frame(scene: GaussianScene, traj: SplineTrajectory, cam: Camera, crf: CrfModel,
               schedule: ExposureSchedule, frame: int, cfg: ImagingConfig = ImagingConfig(),
               raster: RasterConfig = RasterConfig()) -> torch.Tensor:
    e = synthesize_exposure(scene, traj, cam, schedule.t_b[frame], schedule.log_dt[frame], cfg, raster, frame)
    return apply_crf(e, crf, frame, cfg)


def render_hdr(scene: GaussianScene, pose: Pose, cam: Camera, raster: RasterConfig = RasterConfig()) -> torch.Tensor:
    """Sharp linear irradiance at an arbitrary pose."""
    return rasterize(scene, pose, cam, raster)


def retint(e: torch.Tensor, crf: CrfModel, frame: int, dt_virtual: float, dt: float,
           cfg: ImagingConfig = ImagingConfig()) -> torch.Tensor:
    """Re-tone-map exposure ``e`` (taken at ``dt``) as if exposed for ``dt_virtual``."""
    if dt_virtual <= 0 or dt <= 0:
        raise ValueError("exposure times must be positive")
    return apply_crf(e * (dt_virtual / dt), crf, frame, cfg)


def gamma_curve(z, gamma: float = 2.2) -> np.ndarray:
    """``x ** (1 / gamma)`` at ``x = exp(z)``."""
    return np.exp(np.asarray(z, dtype=np.float64) / gamma)


def fit_crf_to_gamma(crf: CrfModel, z_samples, gamma: float = 2.2, ceiling: float = 0.997,
                     max_nfev: int = 200) -> float:
    """Least-squares fit of every TM channel to the gamma curve at ``z_samples``.

    Samples above unit exposure are fitted in logit space to the constant
    ``logit(ceiling)`` so the sigmoid saturates gently instead of
    extrapolating steeply. All channels receive the same fitted weights.
    Returns the max abs error of the fitted curve on the samples.
    """
    z = torch.as_tensor(np.sort(np.asarray(z_samples, dtype=np.float64)))
    target = torch.as_tensor(np.minimum(gamma_curve(z.numpy(), gamma), ceiling))
    over = z > 0.25
    top = math.log(ceiling / (1.0 - ceiling))

    def model(flat):
        pre = crf.tone_map_channel(z, 0, flat, logits=True)
        return torch.where(over, 0.02 * (pre - top), torch.sigmoid(pre) - target)

    def residual(p):
        return model(torch.as_tensor(p)).numpy()

    def jacobian(p):
        return torch.autograd.functional.jacobian(model, torch.as_tensor(p), vectorize=True).numpy()

    x0 = crf.flat_tm(0).numpy().copy()
    sol = least_squares(residual, x0, jac=jacobian, method="trf", max_nfev=max_nfev, xtol=1e-12, ftol=1e-12)
    for ch in range(3):
        crf.set_flat_tm(ch, sol.x)
    fitted = crf.tone_map_channel(z, 0).detach()
    return float((fitted - target).abs().max())


def crf_table(crf: CrfModel, z) -> np.ndarray:
    """TM sampled at log-exposures ``z``: ``(len(z), 3)``."""
    zt = as_tensor(z)
    with torch.no_grad():
        return crf.tone_map(zt[:, None].expand(-1, 3)).numpy()
