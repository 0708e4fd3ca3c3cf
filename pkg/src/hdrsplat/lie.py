"""SO(3) / SE(3) group and algebra operations on unit quaternions.

All functions are batched over leading dimensions and differentiable with
torch autograd. Quaternions are ``(w, x, y, z)``, twists are ``(omega, v)``.
Small-angle branches switch below ``SMALL_ANGLE`` and are written so that
the unused branch never produces NaN gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

SMALL_ANGLE = 1e-6
NEAR_PI = 1e-6


class AngleNearPi(ValueError):
    """Rotation angle too close to pi for a principal-branch logarithm."""


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def hat(w: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric matrix of a 3-vector."""
    x, y, z = w.unbind(-1)
    o = torch.zeros_like(x)
    return torch.stack([
        torch.stack([o, -z, y], -1),
        torch.stack([z, o, -x], -1),
        torch.stack([-y, x, o], -1),
    ], -2)


def vee(m: torch.Tensor) -> torch.Tensor:
    return torch.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], -1)


# ---------------------------------------------------------------------------
# quaternions

def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    """Unit norm and w >= 0."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    return torch.where(q[..., :1] < 0, -q, q)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], -1)


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quat_rotate(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    u = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * torch.linalg.cross(u, v)
    return v + w * t + torch.linalg.cross(u, t)


# ---------------------------------------------------------------------------
# SO(3)

def _split_angle(theta2: torch.Tensor, threshold: float):
    small = theta2 < threshold * threshold
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    return small, theta


def _so3_exp_coeffs(theta2: torch.Tensor, taylor: bool | None = None):
    """(cos(theta/2), sin(theta/2)/theta); ``taylor`` forces a branch."""
    if taylor is None:
        small, theta = _split_angle(theta2, SMALL_ANGLE)
    else:
        small = torch.full_like(theta2, bool(taylor), dtype=torch.bool)
        theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    w = torch.where(small, 1.0 - theta2 / 8.0, torch.cos(theta / 2))
    k = torch.where(small, 0.5 - theta2 / 48.0, torch.sin(theta / 2) / theta)
    return w, k


def so3_exp(omega, *, taylor: bool | None = None) -> torch.Tensor:
    """Rotation vector to unit quaternion (Rodrigues)."""
    omega = as_tensor(omega)
    theta2 = (omega * omega).sum(-1)
    w, k = _so3_exp_coeffs(theta2, taylor)
    return quat_normalize(torch.cat([w[..., None], k[..., None] * omega], -1))


def _check_angle(theta: torch.Tensor) -> None:
    if bool((theta.detach() >= math.pi - NEAR_PI).any()):
        raise AngleNearPi(
            f"rotation angle {float(theta.detach().max()):.9f} rad is within "
            f"{NEAR_PI} of pi; the logarithm is ill-conditioned (knots too far apart?)"
        )


def so3_log(q, *, taylor: bool | None = None) -> torch.Tensor:
    """Unit quaternion to rotation vector on the principal branch."""
    q = quat_normalize(as_tensor(q))
    w, v = q[..., 0], q[..., 1:]
    n2 = (v * v).sum(-1)
    if taylor is None:
        small, n = _split_angle(n2, SMALL_ANGLE / 2)
    else:
        small = torch.full_like(n2, bool(taylor), dtype=torch.bool)
        n = torch.sqrt(torch.where(small, torch.ones_like(n2), n2))
    theta = 2.0 * torch.atan2(n, w)
    _check_angle(torch.where(small, torch.zeros_like(theta), theta))
    f = torch.where(small, 2.0 / w - 2.0 * n2 / (3.0 * w ** 3), theta / n)
    return f[..., None] * v


def rotation_angle(q) -> torch.Tensor:
    q = quat_normalize(as_tensor(q))
    return 2.0 * torch.atan2(torch.linalg.norm(q[..., 1:], dim=-1), q[..., 0])


# ---------------------------------------------------------------------------
# SE(3)

@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R(q) x + t``; fields may carry batch dims."""

    q: torch.Tensor
    t: torch.Tensor

    @staticmethod
    def identity(*batch: int) -> "Pose":
        q = torch.zeros(*batch, 4, dtype=torch.float64)
        q[..., 0] = 1.0
        return Pose(q, torch.zeros(*batch, 3, dtype=torch.float64))

    @staticmethod
    def from_vector(vec) -> "Pose":
        """From ``(qw, qx, qy, qz, tx, ty, tz)``."""
        vec = as_tensor(vec)
        return Pose(quat_normalize(vec[..., :4]), vec[..., 4:7])

    @staticmethod
    def stack(poses) -> "Pose":
        poses = list(poses)
        return Pose(torch.stack([p.q for p in poses]), torch.stack([p.t for p in poses]))

    @property
    def batch_shape(self) -> torch.Size:
        return self.q.shape[:-1]

    def vector(self) -> torch.Tensor:
        return torch.cat([self.q, self.t], -1)

    def rotation_matrix(self) -> torch.Tensor:
        return quat_to_matrix(self.q)

    def matrix(self) -> torch.Tensor:
        top = torch.cat([quat_to_matrix(self.q), self.t[..., :, None]], -1)
        bottom = torch.zeros(*top.shape[:-2], 1, 4, dtype=top.dtype)
        bottom[..., 0, 3] = 1.0
        return torch.cat([top, bottom], -2)

    def inverse(self) -> "Pose":
        return pose_inverse(self)

    def detach(self) -> "Pose":
        return Pose(self.q.detach(), self.t.detach())

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def __getitem__(self, idx) -> "Pose":
        """Index batch dimensions only."""
        idx = (idx if isinstance(idx, tuple) else (idx,)) + (slice(None),)
        return Pose(self.q[idx], self.t[idx])

    def __len__(self) -> int:
        return self.q.shape[0]


def pose_compose(a: Pose, b: Pose) -> Pose:
    q = quat_normalize(quat_multiply(a.q, b.q))
    return Pose(q, a.t + quat_rotate(a.q, b.t))


def pose_inverse(a: Pose) -> Pose:
    qi = quat_conjugate(a.q)
    return Pose(quat_normalize(qi), -quat_rotate(qi, a.t))


def _se3_coeffs(theta2: torch.Tensor, taylor: bool | None = None):
    """B = (1-cos)/th^2, C = (th-sin)/th^3 of the V matrix."""
    if taylor is None:
        small, theta = _split_angle(theta2, SMALL_ANGLE)
    else:
        small = torch.full_like(theta2, bool(taylor), dtype=torch.bool)
        theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    sh = torch.sin(theta / 2)
    b = torch.where(small, 0.5 - theta2 / 24.0, 2.0 * sh * sh / (theta * theta))
    c = torch.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - torch.sin(theta)) / theta ** 3)
    return b, c


def _se3_inv_coeff(theta2: torch.Tensor, taylor: bool | None = None):
    """D = (1 - (th/2) cot(th/2)) / th^2 of the inverse V matrix."""
    if taylor is None:
        small, theta = _split_angle(theta2, SMALL_ANGLE)
    else:
        small = torch.full_like(theta2, bool(taylor), dtype=torch.bool)
        theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    half = theta / 2
    d = (1.0 - half * torch.cos(half) / torch.sin(half)) / (theta * theta)
    return torch.where(small, 1.0 / 12.0 + theta2 / 720.0, d)


def se3_exp(xi, *, coupled: bool = True, taylor: bool | None = None) -> Pose:
    """Twist ``(omega, v)`` to pose.

    ``coupled=True`` is the group exponential (translation ``V v``);
    ``coupled=False`` treats rotation and translation independently.
    """
    xi = as_tensor(xi)
    omega, v = xi[..., :3], xi[..., 3:]
    q = so3_exp(omega, taylor=taylor)
    if not coupled:
        return Pose(q, v)
    theta2 = (omega * omega).sum(-1)
    b, c = _se3_coeffs(theta2, taylor)
    wv = torch.linalg.cross(omega, v)
    wwv = torch.linalg.cross(omega, wv)
    return Pose(q, v + b[..., None] * wv + c[..., None] * wwv)


def se3_log(p: Pose, *, coupled: bool = True, taylor: bool | None = None) -> torch.Tensor:
    """Pose to twist ``(omega, v)``; inverse of :func:`se3_exp`."""
    omega = so3_log(p.q, taylor=taylor)
    if not coupled:
        return torch.cat([omega, p.t], -1)
    theta2 = (omega * omega).sum(-1)
    d = _se3_inv_coeff(theta2, taylor)
    wt = torch.linalg.cross(omega, p.t)
    wwt = torch.linalg.cross(omega, wt)
    v = p.t - 0.5 * wt + d[..., None] * wwt
    return torch.cat([omega, v], -1)


def adjoint(p: Pose) -> torch.Tensor:
    """6x6 adjoint acting on ``(omega, v)`` twists."""
    r = quat_to_matrix(p.q)
    z = torch.zeros_like(r)
    top = torch.cat([r, z], -1)
    bottom = torch.cat([hat(p.t) @ r, r], -1)
    return torch.cat([top, bottom], -2)


def twist_hat(xi: torch.Tensor) -> torch.Tensor:
    """4x4 matrix form of a twist."""
    top = torch.cat([hat(xi[..., :3]), xi[..., 3:, None]], -1)
    bottom = torch.zeros(*top.shape[:-2], 1, 4, dtype=top.dtype)
    return torch.cat([top, bottom], -2)


def twist_vee(m: torch.Tensor) -> torch.Tensor:
    return torch.cat([vee(m[..., :3, :3]), m[..., :3, 3]], -1)


def retract(p: Pose, delta: torch.Tensor, *, coupled: bool = True) -> Pose:
    """Right perturbation ``p * exp(delta)``."""
    return pose_compose(p, se3_exp(delta, coupled=coupled))
