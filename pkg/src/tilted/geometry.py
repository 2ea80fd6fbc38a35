"""Rotation manifolds (S^1, S^3) and tangent-space optimization.

Rotations are stored as points on the unit circle (2D) or as unit
quaternions (3D).  Gradients live in the right-trivialized Lie algebra:
a scalar for so(2), a rotation vector in R^3 for so(3).  Updates compose
the stored rotation with the exponential of a tangent step, so iterates
stay on the manifold by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, StructureError

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class UnitRotation2:
    """Point on S^1, stored as (cos, sin) of the rotation angle."""

    re: float
    im: float

    tangent_dim = 1

    @staticmethod
    def identity() -> "UnitRotation2":
        return UnitRotation2(1.0, 0.0)

    @staticmethod
    def from_angle(theta: float) -> "UnitRotation2":
        return UnitRotation2(math.cos(theta), math.sin(theta))

    def angle(self) -> float:
        return math.atan2(self.im, self.re)

    def compose(self, other: "UnitRotation2") -> "UnitRotation2":
        # Complex multiplication: self * other.
        return UnitRotation2(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    def inverse(self) -> "UnitRotation2":
        return UnitRotation2(self.re, -self.im)

    def matrix(self) -> np.ndarray:
        return np.array([[self.re, -self.im], [self.im, self.re]])

    def normalized(self) -> "UnitRotation2":
        n = math.hypot(self.re, self.im)
        return UnitRotation2(self.re / n, self.im / n)

    def norm_error(self) -> float:
        return abs(self.re * self.re + self.im * self.im - 1.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.re, self.im])


@dataclass(frozen=True)
class UnitQuaternion:
    """Point on S^3 (scalar-first unit quaternion)."""

    w: float
    x: float
    y: float
    z: float

    tangent_dim = 3

    @staticmethod
    def identity() -> "UnitQuaternion":
        return UnitQuaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_rotvec(omega) -> "UnitQuaternion":
        return _exp_s3(np.asarray(omega, dtype=float))

    def compose(self, other: "UnitQuaternion") -> "UnitQuaternion":
        # Hamilton product: self * other.
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def inverse(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def normalized(self) -> "UnitQuaternion":
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        q = UnitQuaternion(self.w / n, self.x / n, self.y / n, self.z / n)
        return q.canonical()

    def canonical(self) -> "UnitQuaternion":
        # q and -q act identically; pin w >= 0 for stable serialization.
        if self.w < 0.0:
            return UnitQuaternion(-self.w, -self.x, -self.y, -self.z)
        return self

    def norm_error(self) -> float:
        return abs(self.w**2 + self.x**2 + self.y**2 + self.z**2 - 1.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])


Rotation = UnitRotation2 | UnitQuaternion


def _exp_s3(omega: np.ndarray) -> UnitQuaternion:
    """Quaternion exponential of a rotation vector (angle = |omega|)."""
    theta = float(np.linalg.norm(omega))
    half = 0.5 * theta
    if theta < 1e-8:
        # sin(theta/2)/theta = 1/2 - theta^2/48 + O(theta^4)
        s = 0.5 - theta * theta / 48.0
        return UnitQuaternion(math.cos(half), *(s * omega))
    s = math.sin(half) / theta
    return UnitQuaternion(math.cos(half), *(s * omega))


def exp_map(base: Rotation, xi) -> Rotation:
    """Compose `base` with the exponential of tangent step `xi`.

    For S^1, `xi` is the rotation angle increment; for S^3 it is a
    rotation vector whose norm is the angle.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if not np.all(np.isfinite(xi)):
        raise NumericError(f"non-finite tangent step: {xi}")
    if isinstance(base, UnitRotation2):
        if xi.shape != (1,):
            raise StructureError(f"S^1 tangent step must be a scalar, got shape {xi.shape}")
        return base.compose(UnitRotation2.from_angle(float(xi[0]))).normalized()
    if isinstance(base, UnitQuaternion):
        if xi.shape != (3,):
            raise StructureError(f"S^3 tangent step must have 3 entries, got shape {xi.shape}")
        return base.compose(_exp_s3(xi)).normalized()
    raise StructureError(f"unsupported manifold point {type(base)!r}")


def apply_rotation(tau: Rotation, p) -> np.ndarray:
    """Rotate point(s) `p`; accepts shape (dim,) or (..., dim)."""
    p = np.asarray(p, dtype=float)
    return p @ tau.matrix().T


def tangent_basis(tau: Rotation) -> np.ndarray:
    """Ambient representation of the right-trivialized tangent basis at tau.

    Row i is d/dt [tau * Exp(t e_i)] at t = 0, as a vector in the embedding
    space (R^2 for S^1, R^4 for S^3).
    """
    if isinstance(tau, UnitRotation2):
        return np.array([[-tau.im, tau.re]])
    w, x, y, z = tau.w, tau.x, tau.y, tau.z
    # 0.5 * tau * (0, e_i) for each Lie-algebra direction e_i.
    return 0.5 * np.array(
        [
            [-x, w, z, -y],
            [-y, -z, w, x],
            [-z, y, -x, w],
        ]
    )


def euclidean_to_tangent(tau: Rotation, euclidean_grad) -> np.ndarray:
    """Project an ambient-space gradient onto the tangent basis at tau."""
    g = np.asarray(euclidean_grad, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite ambient gradient")
    return tangent_basis(tau) @ g


def rotation_point_backward(tau: Rotation, p: np.ndarray, dq: np.ndarray):
    """Backward pass of q = apply_rotation(tau, p).

    `p`, `dq` have shape (..., dim).  Returns (dp, dxi) where dp is the
    gradient with respect to the input points and dxi the tangent-space
    gradient with respect to the rotation, summed over the batch.
    """
    R = tau.matrix()
    dp = dq @ R
    if isinstance(tau, UnitRotation2):
        # d/dtheta [R(tau) R(theta) p] at 0 = R J p with J = [[0,-1],[1,0]].
        Jp = np.stack([-p[..., 1], p[..., 0]], axis=-1)
        dxi = np.array([np.sum(dq * (Jp @ R.T))])
    else:
        # d/dt [R(tau) Exp(t e_i) p] at 0 = R (e_i x p), and with g = R^T dq
        # the triple product gives <g, e_i x p> = (p x g)_i.
        dq_body = dq @ R
        dxi = np.sum(np.cross(p, dq_body, axis=-1), axis=tuple(range(p.ndim - 1)))
    return dp, dxi


@dataclass
class RiemannianAdamState:
    """ADAM moments for a list of rotations, kept in tangent coordinates."""

    m: np.ndarray  # (n_params, tangent_dim)
    v: np.ndarray  # (n_params, tangent_dim)
    step: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float | object = 1e-2  # float or callable step -> rate

    @staticmethod
    def init(n_params: int, tangent_dim: int, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        return RiemannianAdamState(
            m=np.zeros((n_params, tangent_dim)),
            v=np.zeros((n_params, tangent_dim)),
            step=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            lr=lr,
        )

    def rate(self, k: int) -> float:
        return float(self.lr(k)) if callable(self.lr) else float(self.lr)


def riemannian_adam_step(params, state: RiemannianAdamState, grads):
    """One ADAM step in tangent space, applied through the exponential map.

    Returns the updated parameter list; `state` is mutated in place.
    """
    if len(params) != state.m.shape[0]:
        raise StructureError(
            f"{len(params)} parameters but state holds {state.m.shape[0]} moment rows"
        )
    if len(grads) != len(params):
        raise StructureError(f"{len(params)} parameters but {len(grads)} gradients")
    g = np.asarray(grads, dtype=float).reshape(len(params), -1)
    if g.shape[1] != state.m.shape[1]:
        raise StructureError(
            f"tangent dim mismatch: gradients {g.shape[1]}, state {state.m.shape[1]}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1**state.step)
    vhat = state.v / (1.0 - state.beta2**state.step)
    xi = -state.rate(state.step) * mhat / (np.sqrt(vhat) + state.eps)
    return [exp_map(tau, xi[i]) for i, tau in enumerate(params)]
