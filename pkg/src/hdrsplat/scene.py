"""3D Gaussian scene, pinhole projection and a deterministic CPU rasterizer.

Poses passed to the renderer are camera-to-world; the camera looks down +z
with x to the right and y down. Pixel ``(row, col)`` has its centre at
``(col + 0.5, row + 0.5)``. Rendered images hold linear irradiance composited
over a black background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch

from . import _blend
from .io import read_container, write_container
from .lie import Pose, as_tensor, quat_normalize, quat_to_matrix, se3_exp, pose_compose


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class RasterConfig:
    cov_floor: float = 0.3
    alpha_max: float = 0.999
    min_transmittance: float = 1e-4
    near: float = 0.01
    cull_sigma: float | None = 3.0
    tile: int = 16


@dataclass
class GaussianScene:
    """Gaussian primitives in their unconstrained storage form.

    ``log_scales``, ``opacity_raw`` (sigmoid) and ``log_colors`` keep scales,
    opacities and irradiance colours valid under any parameter update.
    """

    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_raw: torch.Tensor
    log_colors: torch.Tensor

    FIELDS = ("means", "quats", "log_scales", "opacity_raw", "log_colors")

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def from_values(cls, means, scales, opacity, colors, quats=None) -> "GaussianScene":
        means = as_tensor(means).reshape(-1, 3)
        n = means.shape[0]
        if quats is None:
            quats = torch.zeros(n, 4, dtype=torch.float64)
            quats[:, 0] = 1.0
        opacity = as_tensor(opacity).reshape(n)
        return cls(
            means.clone(),
            quat_normalize(as_tensor(quats).reshape(n, 4)),
            torch.log(as_tensor(scales).reshape(n, 3)),
            torch.log(opacity) - torch.log1p(-opacity),
            torch.log(as_tensor(colors).reshape(n, 3)),
        )

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(*(torch.zeros(0, d, dtype=torch.float64) for d in (3, 4, 3)),
                   torch.zeros(0, dtype=torch.float64), torch.zeros(0, 3, dtype=torch.float64))

    def tensors(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_raw)

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def colors(self) -> torch.Tensor:
        return torch.exp(self.log_colors)

    def covariances(self) -> torch.Tensor:
        r = quat_to_matrix(self.quats / torch.linalg.norm(self.quats, dim=-1, keepdim=True))
        m = r * self.scales()[:, None, :]
        return m @ m.transpose(-1, -2)

    def detach(self) -> "GaussianScene":
        return GaussianScene(*(t.detach().clone() for t in self.tensors().values()))

    def subset(self, keep) -> "GaussianScene":
        return GaussianScene(*(t.detach()[keep].clone() for t in self.tensors().values()))

    def scaled_colors(self, factor: float) -> "GaussianScene":
        s = self.detach()
        s.log_colors = s.log_colors + math.log(factor)
        return s

    # serialization -----------------------------------------------------
    def save(self, path) -> None:
        write_container(path, "scene", {k: v.detach().numpy() for k, v in self.tensors().items()})

    @classmethod
    def load(cls, path) -> "GaussianScene":
        arrays, _ = read_container(path, "scene")
        return cls(*(torch.from_numpy(arrays[k]) for k in cls.FIELDS))

    def to_text(self) -> str:
        """Human-readable dump, one primitive per line in declaration order."""
        lines = ["# mean(3) quat(4) log_scale(3) opacity_raw log_color(3)"]
        arr = torch.cat([self.means, self.quats, self.log_scales, self.opacity_raw[:, None], self.log_colors], 1)
        for row in arr.detach().numpy():
            lines.append(" ".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"


@dataclass
class Projection:
    means2d: torch.Tensor   # (V, G, 2)
    cov2d: torch.Tensor     # (V, G, 2, 2)
    depth: torch.Tensor     # (V, G)
    valid: torch.Tensor     # (V, G) bool


def _batch_pose(pose: Pose) -> tuple[Pose, bool]:
    if pose.q.dim() == 1:
        return Pose(pose.q[None], pose.t[None]), True
    return pose, False


def project(scene: GaussianScene, pose: Pose, cam: Camera, cfg: RasterConfig = RasterConfig()) -> Projection:
    """Pinhole projection of means and EWA projection of covariances.

    ``cov2d = J W Sigma W^T J^T + cov_floor * I`` with ``W`` the world-to-camera
    rotation and ``J`` the affine Jacobian of the pinhole map at the mean.
    """
    pose, _ = _batch_pose(pose)
    rot = quat_to_matrix(pose.q)                                 # (V,3,3) cam -> world
    xc = (scene.means[None] - pose.t[:, None]) @ rot             # (V,G,3)
    z = xc[..., 2]
    valid = z.detach() > cfg.near
    zs = torch.where(valid, z, torch.ones_like(z))
    x, y = xc[..., 0], xc[..., 1]
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    zero = torch.zeros_like(zs)
    jac = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * x / (zs * zs)], -1),
        torch.stack([zero, cam.fy / zs, -cam.fy * y / (zs * zs)], -1),
    ], -2)                                                       # (V,G,2,3)
    sigma_cam = rot.transpose(-1, -2)[:, None] @ scene.covariances()[None] @ rot[:, None]
    cov2d = jac @ sigma_cam @ jac.transpose(-1, -2)
    cov2d = cov2d + cfg.cov_floor * torch.eye(2, dtype=cov2d.dtype)
    return Projection(torch.stack([u, v], -1), cov2d, z, valid)


class _Blend(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conics, opacity, colors, counts, lists, settings):
        arrays = (np.ascontiguousarray(x.detach().numpy()) for x in (means2d, conics, opacity, colors))
        args = (*arrays, counts, lists) + settings
        ctx.args = args
        return torch.from_numpy(_blend.blend_forward(*args))

    @staticmethod
    def backward(ctx, grad):
        gm, gc, go, gcol = _blend.blend_backward(*ctx.args, np.ascontiguousarray(grad.numpy()))
        return (torch.from_numpy(gm), torch.from_numpy(gc), torch.from_numpy(go),
                torch.from_numpy(gcol).sum(0), None, None, None)


def rasterize(scene: GaussianScene, pose: Pose, cam: Camera, cfg: RasterConfig = RasterConfig()) -> torch.Tensor:
    """Render linear irradiance, ``(H, W, 3)`` or ``(V, H, W, 3)`` for batched poses."""
    pose, single = _batch_pose(pose)
    nviews = pose.q.shape[0]
    if len(scene) == 0:
        img = torch.zeros(nviews, cam.height, cam.width, 3, dtype=torch.float64)
        return img[0] if single else img
    proj = project(scene, pose, cam, cfg)
    cov = proj.cov2d
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    det = a * c - b * b
    conics = torch.stack([c / det, -b / det, a / det], -1)
    opacity = scene.opacity()[None].expand(nviews, -1) * proj.valid
    with torch.no_grad():
        depth = torch.where(proj.valid, proj.depth, torch.full_like(proj.depth, math.inf))
        order = torch.sort(depth, dim=1, stable=True).indices.numpy().astype(np.int64)
        if cfg.cull_sigma is None:
            radius = np.full(opacity.shape, np.inf)
            cull_power = np.inf
        else:
            mid = 0.5 * (a + c)
            lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
            radius = (cfg.cull_sigma * torch.sqrt(lam)).numpy()
            cull_power = 0.5 * cfg.cull_sigma ** 2
        counts, lists = _blend.bin_tiles(proj.means2d.detach().numpy(), radius, opacity.detach().numpy(),
                                         order, cam.width, cam.height, cfg.tile)
    settings = (cam.width, cam.height, cfg.tile, cfg.alpha_max, cfg.min_transmittance, float(cull_power))
    img = _Blend.apply(proj.means2d, conics, opacity, scene.colors(), counts, lists, settings)
    return img[0] if single else img


def rasterize_with_adjoint(scene: GaussianScene, pose: Pose, cam: Camera, upstream,
                           cfg: RasterConfig = RasterConfig()) -> dict[str, torch.Tensor]:
    """Gradients of ``sum(upstream * rasterize(...))``.

    Returns one entry per scene field plus ``pose``: the gradient with respect
    to a right perturbation ``pose * exp(eps)`` of the camera-to-world pose.
    """
    params = {k: v.detach().clone().requires_grad_(True) for k, v in scene.tensors().items()}
    eps = torch.zeros(*pose.q.shape[:-1], 6, dtype=torch.float64, requires_grad=True)
    moved = pose_compose(pose.detach(), se3_exp(eps))
    img = rasterize(GaussianScene(**params), moved, cam, cfg)
    loss = (img * as_tensor(upstream)).sum()
    names = list(params) + ["pose"]
    grads = torch.autograd.grad(loss, list(params.values()) + [eps], allow_unused=True)
    out = {}
    for name, g, ref in zip(names, grads, list(params.values()) + [eps]):
        out[name] = torch.zeros_like(ref) if g is None else g
    return out
