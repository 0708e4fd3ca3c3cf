"""Continuous-time camera trajectory as a cumulative cubic B-spline on SE(3).

A pose at time ``t`` is built from the four knots bracketing ``t``::

    P(t) = T0 * exp(b1(u) W0) * exp(b2(u) W1) * exp(b3(u) W2),  Wj = log(Tj^-1 Tj+1)

where ``u`` is the fractional position inside the knot segment and
``b(u) = C [1, u, u^2, u^3]``. Knots are uniformly spaced by ``tau``; knot
``j`` sits at ``t0 + j * tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .lie import Pose, as_tensor, pose_compose, pose_inverse, se3_exp, se3_log, twist_hat, twist_vee

BASIS_RATIONAL = tuple(
    tuple(Fraction(v, 6) for v in row)
    for row in ((6, 0, 0, 0), (5, 3, -3, 1), (1, 3, 3, -2), (0, 0, 0, 1))
)
BASIS_MATRIX = torch.tensor([[float(v) for v in row] for row in BASIS_RATIONAL], dtype=torch.float64)


class DomainError(ValueError):
    pass


class OutOfDomain(ValueError):
    pass


class DegenerateInput(ValueError):
    pass


def basis(u):
    """Cumulative basis vector ``C [1, u, u^2, u^3]`` for ``0 <= u < 1``.

    Accepts a float, a :class:`~fractions.Fraction` (exact arithmetic) or a
    tensor of any shape (result gains a trailing dimension of 4).
    """
    if isinstance(u, Fraction):
        if not 0 <= u < 1:
            raise DomainError(f"u={u} outside [0, 1)")
        powers = (Fraction(1), u, u * u, u * u * u)
        return tuple(sum(c * p for c, p in zip(row, powers)) for row in BASIS_RATIONAL)
    ut = as_tensor(u)
    if bool(((ut < 0) | (ut >= 1)).any()):
        raise DomainError(f"u outside [0, 1): {ut}")
    powers = torch.stack([torch.ones_like(ut), ut, ut * ut, ut * ut * ut], -1)
    return powers @ BASIS_MATRIX.T


def basis_derivative(u) -> torch.Tensor:
    """d basis / du = C [0, 1, 2u, 3u^2]."""
    ut = as_tensor(u)
    powers = torch.stack([torch.zeros_like(ut), torch.ones_like(ut), 2 * ut, 3 * ut * ut], -1)
    return powers @ BASIS_MATRIX.T


@dataclass
class SplineTrajectory:
    """Uniform cumulative B-spline over SE(3) camera-to-world poses."""

    knots: Pose
    t0: float
    tau: float
    coupled: bool = True
    delta: torch.Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("knot interval tau must be positive")
        if self.num_knots < 4:
            raise ValueError("a cubic spline needs at least 4 knots")
        if self.delta is None:
            self.delta = torch.zeros(self.num_knots, 6, dtype=torch.float64)

    @property
    def num_knots(self) -> int:
        return self.knots.q.shape[0]

    @property
    def domain(self) -> tuple[float, float]:
        """Half-open query interval ``[lo, hi)``."""
        return self.t0 + self.tau, self.t0 + (self.num_knots - 2) * self.tau

    def knot_times(self) -> np.ndarray:
        return self.t0 + self.tau * np.arange(self.num_knots)

    def control_poses(self) -> Pose:
        """Knots with the optimizable local perturbation applied."""
        return pose_compose(self.knots, se3_exp(self.delta, coupled=self.coupled))

    def bake(self) -> "SplineTrajectory":
        """Fold the perturbation into the base knots (detached)."""
        with torch.no_grad():
            k = self.control_poses()
        return SplineTrajectory(k.detach(), self.t0, self.tau, self.coupled)

    def copy(self) -> "SplineTrajectory":
        return SplineTrajectory(
            Pose(self.knots.q.clone(), self.knots.t.clone()), self.t0, self.tau, self.coupled,
            self.delta.detach().clone(),
        )

    def segment(self, t) -> tuple[torch.Tensor, torch.Tensor]:
        """Segment index ``i`` (window uses knots i-1..i+2) and local ``u``."""
        t = as_tensor(t)
        lo, hi = self.domain
        td = t.detach()
        if bool(((td < lo) | (td >= hi)).any()):
            bad = td[(td < lo) | (td >= hi)]
            raise OutOfDomain(
                f"time(s) {bad.tolist()} outside trajectory domain [{lo:.9g}, {hi:.9g})"
            )
        s = (t - self.t0) / self.tau
        i = torch.floor(s.detach()).long().clamp(1, self.num_knots - 3)
        u = (s - i).clamp(0.0, 1.0 - 2.0 ** -52)
        return i, u

    def _window(self, i: torch.Tensor, knots: Pose):
        idx = i[..., None] + torch.arange(-1, 3)
        return Pose(knots.q[idx], knots.t[idx])

    def pose_at(self, t, knots: Pose | None = None) -> Pose:
        """Pose at time(s) ``t``; batched over the shape of ``t``."""
        knots = self.control_poses() if knots is None else knots
        i, u = self.segment(t)
        w = self._window(i, knots)
        rel = pose_compose(pose_inverse(w[..., :3]), w[..., 1:])
        omega = se3_log(rel, coupled=self.coupled)
        b = _basis_unchecked(u)
        p = w[..., 0]
        for j in range(3):
            p = pose_compose(p, se3_exp(b[..., j + 1, None] * omega[..., j, :], coupled=self.coupled))
        return p

    def velocity_at(self, t) -> torch.Tensor:
        """Body-frame twist ``vee(P^-1 dP/dt)`` per second."""
        knots = self.control_poses()
        i, u = self.segment(t)
        w = self._window(i, knots)
        rel = pose_compose(pose_inverse(w[..., :3]), w[..., 1:])
        omega = se3_log(rel, coupled=self.coupled)
        b = _basis_unchecked(u)
        db = basis_derivative(u) / self.tau
        mats, dmats = [], []
        for j in range(3):
            a = se3_exp(b[..., j + 1, None] * omega[..., j, :], coupled=self.coupled).matrix()
            rate = db[..., j + 1, None] * omega[..., j, :]
            if self.coupled:
                da = a @ twist_hat(rate)
            else:
                da = torch.zeros_like(a)
                da[..., :3, :3] = a[..., :3, :3] @ twist_hat(rate)[..., :3, :3]
                da[..., :3, 3] = rate[..., 3:]
            mats.append(a)
            dmats.append(da)
        prod = mats[0] @ mats[1] @ mats[2]
        dprod = dmats[0] @ mats[1] @ mats[2] + mats[0] @ dmats[1] @ mats[2] + mats[0] @ mats[1] @ dmats[2]
        return twist_vee(torch.linalg.inv(prod) @ dprod)

    def to_text(self) -> str:
        lines = [f"# tau={self.tau!r} t0={self.t0!r}"]
        k = self.control_poses().detach()
        for tk, q, tr in zip(self.knot_times(), k.q.numpy(), k.t.numpy()):
            vals = [tk, *q, *tr]
            lines.append(" ".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str, coupled: bool = True) -> "SplineTrajectory":
        tau = t0 = None
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "tau":
                        tau = float(val)
                    elif key == "t0":
                        t0 = float(val)
                continue
            rows.append([float(v) for v in line.split()])
        if tau is None or t0 is None:
            raise ValueError("trajectory file lacks '# tau=... t0=...' header")
        arr = torch.tensor(rows, dtype=torch.float64)
        knots = Pose(arr[:, 1:5], arr[:, 5:8])
        return cls(knots, t0, tau, coupled)

    @classmethod
    def load(cls, path, coupled: bool = True) -> "SplineTrajectory":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), coupled)


def _basis_unchecked(u: torch.Tensor) -> torch.Tensor:
    powers = torch.stack([torch.ones_like(u), u, u * u, u * u * u], -1)
    return powers @ BASIS_MATRIX.T


def pose_at(traj: SplineTrajectory, t) -> Pose:
    return traj.pose_at(t)


def velocity_at(traj: SplineTrajectory, t) -> torch.Tensor:
    return traj.velocity_at(t)


def pose_at_with_adjoint(traj: SplineTrajectory, t: float, upstream) -> tuple[torch.Tensor, torch.Tensor]:
    """Back-propagate a gradient on the output pose to the bracketing knots.

    ``upstream`` is dL/d(eps) for a right perturbation ``P(t) exp(eps)`` of
    the queried pose. Returns ``(knot_indices, grads)`` where ``grads[j]`` is
    dL/d(delta_j) for the right perturbation ``T_j exp(delta_j)`` of knot
    ``knot_indices[j]``.
    """
    upstream = as_tensor(upstream)
    i, _ = traj.segment(torch.tensor(float(t)))
    idx = torch.arange(-1, 3) + i
    base = traj.control_poses().detach()
    delta = torch.zeros(4, 6, dtype=torch.float64, requires_grad=True)
    pert = se3_exp(delta, coupled=traj.coupled)
    q = base.q.clone()
    tr = base.t.clone()
    window = pose_compose(Pose(base.q[idx], base.t[idx]), pert)
    q = q.index_put((idx,), window.q)
    tr = tr.index_put((idx,), window.t)
    p0 = traj.pose_at(torch.tensor(float(t)), knots=base).detach()
    p = traj.pose_at(torch.tensor(float(t)), knots=Pose(q, tr))
    eps = se3_log(pose_compose(pose_inverse(p0), p))
    (grad,) = torch.autograd.grad((eps * upstream).sum(), delta, allow_unused=True)
    if grad is None:
        grad = torch.zeros(4, 6, dtype=torch.float64)
    return idx, grad


class KnotFit(NamedTuple):
    trajectory: SplineTrajectory
    residual: float
    iterations: int


def _interpolate_inputs(times: np.ndarray, poses: Pose, query: np.ndarray, coupled: bool) -> Pose:
    out = []
    for tq in query:
        j = int(np.searchsorted(times, tq, side="right")) - 1
        if j < 0:
            out.append(poses[0])
            continue
        if j >= len(times) - 1:
            out.append(poses[len(times) - 1])
            continue
        a = (tq - times[j]) / (times[j + 1] - times[j])
        rel = se3_log(pose_compose(pose_inverse(poses[j]), poses[j + 1]), coupled=coupled)
        out.append(pose_compose(poses[j], se3_exp(a * rel, coupled=coupled)))
    return Pose.stack(out)


def fit_knots(
    poses: Sequence[tuple[float, Pose]],
    ratio: float = 3.0,
    *,
    span: tuple[float, float] | None = None,
    max_iterations: int = 50,
    coupled: bool = True,
) -> KnotFit:
    """Fit a uniform spline to timestamped poses.

    Uses ``ceil(ratio * M) + 3`` knots for ``M`` inputs. The query domain
    covers every input timestamp and, if given, the interval ``span``.
    Knots start from geodesic interpolation of the inputs and are refined by
    Gauss-Newton on ``sum ||log(P(t_i)^-1 P_i)||^2`` (minimum-norm steps, since
    dense knots leave some directions unconstrained).
    """
    if len(poses) < 2:
        raise DegenerateInput("need at least 2 timestamped poses")
    times = np.array([float(t) for t, _ in poses])
    if np.any(np.diff(times) <= 0):
        raise DegenerateInput("timestamps must be strictly increasing")
    if ratio <= 0:
        raise DegenerateInput("ratio must be positive")
    target = Pose.stack([p for _, p in poses]).detach()
    m = len(times)
    k = int(math.ceil(ratio * m)) + 3
    lo, hi = times[0], times[-1]
    if span is not None:
        lo, hi = min(lo, span[0]), max(hi, span[1])
    margin = 1e-6 * (hi - lo)
    tau = (hi - lo + 2 * margin) / (k - 3)
    t0 = lo - margin - tau

    knot_times = t0 + tau * np.arange(k)
    init = _interpolate_inputs(times, target, knot_times, coupled)
    traj = SplineTrajectory(init, float(t0), float(tau), coupled)
    tt = torch.tensor(times, dtype=torch.float64)

    def residuals(delta: torch.Tensor) -> torch.Tensor:
        knots = pose_compose(traj.knots, se3_exp(delta.reshape(k, 6), coupled=coupled))
        p = traj.pose_at(tt, knots=knots)
        return se3_log(pose_compose(pose_inverse(p), target)).reshape(-1)

    zero = torch.zeros(k * 6, dtype=torch.float64)
    r = residuals(zero).detach()
    cost = float(r @ r)
    it = 0
    for it in range(1, max_iterations + 1):
        jac = torch.autograd.functional.jacobian(residuals, zero, vectorize=True)
        step = -torch.linalg.lstsq(jac, r[:, None], driver="gelsd").solution[:, 0]
        new_knots = pose_compose(traj.knots, se3_exp(step.reshape(k, 6), coupled=coupled)).detach()
        candidate = SplineTrajectory(new_knots, traj.t0, traj.tau, coupled)
        saved, traj = traj, candidate
        r_new = residuals(zero).detach()
        new_cost = float(r_new @ r_new)
        if not math.isfinite(new_cost) or new_cost > cost:
            traj = saved
            break
        improvement = cost - new_cost
        r, cost = r_new, new_cost
        if cost < 1e-28 or improvement <= 1e-15 * max(cost, 1e-300) or float(step.abs().max()) < 1e-14:
            break
    return KnotFit(traj, cost, it)


def geodesic_trajectory(xi, *, tau: float, num_knots: int, t0: float = 0.0, start: Pose | None = None,
                        coupled: bool = True) -> SplineTrajectory:
    """Knots on a one-parameter subgroup ``T_j = start * exp(j * tau * xi)``."""
    xi = as_tensor(xi)
    j = torch.arange(num_knots, dtype=torch.float64)[:, None]
    knots = se3_exp(j * tau * xi, coupled=coupled)
    if start is not None:
        knots = pose_compose(Pose(start.q.expand(num_knots, 4), start.t.expand(num_knots, 3)), knots)
    return SplineTrajectory(knots, t0, tau, coupled)
