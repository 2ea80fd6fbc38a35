"""Factored feature volumes.

A decomposition turns a dense latent grid into 1D/2D factors that are
queried with a project / interpolate / reduce pipeline.  The query here
additionally owns a set of learnable rotations: the latent channels are
split into one group per rotation, each group evaluating its factors on
the rotated input point.  All operations return analytic gradients with
respect to factor values, rotation tangents, and the input point.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, StructureError
from .geometry import (
    Rotation,
    UnitQuaternion,
    UnitRotation2,
    apply_rotation,
    rotation_point_backward,
)

KINDS = ("cp2d", "cp3d", "kplanes", "vm")

# Axis subsets each factor reads after rotation, per decomposition family.
AXIS_SELECTORS = {
    "cp2d": ((0,), (1,)),
    "cp3d": ((0,), (1,), (2,)),
    "kplanes": ((0, 1), (1, 2), (0, 2)),
    "vm": ((0,), (1, 2), (1,), (0, 2), (2,), (0, 1)),
}


@dataclass(frozen=True)
class Resolution:
    scale: float
    size: int


@dataclass(frozen=True)
class DecompositionSpec:
    kind: str
    channels: int
    resolutions: tuple[Resolution, ...]
    transforms: int = 1
    boundary: str = "clamp"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructureError(f"unknown decomposition kind {self.kind!r}")
        if self.channels < 1:
            raise StructureError("channels must be >= 1")
        if self.transforms < 1:
            raise StructureError("transform count must be >= 1")
        if self.channels % self.transforms != 0:
            raise StructureError(
                f"transform count {self.transforms} must divide channels {self.channels}"
            )
        if not self.resolutions:
            raise StructureError("at least one resolution level is required")
        scales = [r.scale for r in self.resolutions]
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise StructureError(f"resolution scales must be strictly increasing: {scales}")
        if any(r.size < 2 for r in self.resolutions):
            raise StructureError("grid sizes must be >= 2")
        if self.boundary not in ("clamp", "wrap"):
            raise StructureError(f"unknown boundary policy {self.boundary!r}")

    @property
    def point_dim(self) -> int:
        return 2 if self.kind == "cp2d" else 3

    @property
    def group_channels(self) -> int:
        return self.channels // self.transforms

    @property
    def factors_per_level(self) -> int:
        return len(AXIS_SELECTORS[self.kind])

    @property
    def block_channels(self) -> int:
        """Latent channels contributed by one resolution level of one group."""
        per_level = 3 if self.kind == "vm" else 1
        return per_level * self.group_channels

    @property
    def latent_dim(self) -> int:
        return self.transforms * len(self.resolutions) * self.block_channels

    def factor_shapes(self, level: int) -> list[tuple[int, ...]]:
        n, cg = self.resolutions[level].size, self.group_channels
        shapes = []
        for axes in AXIS_SELECTORS[self.kind]:
            shapes.append((n, cg) if len(axes) == 1 else (n, n, cg))
        return shapes


@dataclass
class TransformSet:
    rotations: list[Rotation]

    def __post_init__(self):
        if not self.rotations:
            raise StructureError("TransformSet needs at least one rotation")
        for r in self.rotations:
            if r.norm_error() > 1e-9:
                raise StructureError(f"rotation off manifold: {r}")

    def __len__(self):
        return len(self.rotations)

    @staticmethod
    def identity(count: int, dim: int) -> "TransformSet":
        base = UnitRotation2.identity() if dim == 2 else UnitQuaternion.identity()
        return TransformSet([base] * count)

    @staticmethod
    def random(count: int, dim: int, rng: np.random.Generator) -> "TransformSet":
        rots: list[Rotation] = []
        for _ in range(count):
            if dim == 2:
                rots.append(UnitRotation2.from_angle(rng.uniform(0.0, 2.0 * np.pi)))
            else:
                q = rng.normal(size=4)
                q /= np.linalg.norm(q)
                rots.append(UnitQuaternion(*q).canonical())
        return TransformSet(rots)


@dataclass
class FactoredVolume:
    spec: DecompositionSpec
    factors: list[list[list[np.ndarray]]]  # [group][level][factor]
    transforms: TransformSet

    def __post_init__(self):
        s = self.spec
        if len(self.transforms) != s.transforms:
            raise StructureError(
                f"spec wants {s.transforms} transforms, got {len(self.transforms)}"
            )
        if len(self.factors) != s.transforms:
            raise StructureError("one factor group per transform is required")
        for group in self.factors:
            if len(group) != len(s.resolutions):
                raise StructureError("one factor list per resolution level is required")
            for level, fs in enumerate(group):
                want = s.factor_shapes(level)
                got = [f.shape for f in fs]
                if got != want:
                    raise StructureError(f"factor shapes {got} do not match spec {want}")

    @staticmethod
    def create(
        spec: DecompositionSpec,
        rng: np.random.Generator,
        init_scale: float = 0.1,
        random_transforms: bool = True,
    ) -> "FactoredVolume":
        factors = [
            [
                [rng.uniform(-init_scale, init_scale, size=shape) for shape in spec.factor_shapes(r)]
                for r in range(len(spec.resolutions))
            ]
            for _ in range(spec.transforms)
        ]
        if random_transforms:
            transforms = TransformSet.random(spec.transforms, spec.point_dim, rng)
        else:
            transforms = TransformSet.identity(spec.transforms, spec.point_dim)
        return FactoredVolume(spec, factors, transforms)

    def factor_items(self):
        """Yields ((group, level, factor), array) over every stored grid."""
        for t, group in enumerate(self.factors):
            for r, fs in enumerate(group):
                for f, arr in enumerate(fs):
                    yield (t, r, f), arr

    def zero_like_factors(self):
        return [
            [[np.zeros_like(a) for a in fs] for fs in group] for group in self.factors
        ]

    def copy(self) -> "FactoredVolume":
        return FactoredVolume(
            self.spec,
            [[[a.copy() for a in fs] for fs in group] for group in self.factors],
            TransformSet(list(self.transforms.rotations)),
        )

    def parameter_count(self) -> int:
        return sum(a.size for _, a in self.factor_items())


def project(spec: DecompositionSpec, factor_index: int, transform: Rotation, p, level: int = 0):
    """Rotate `p`, select this factor's axes, and apply the level scale.

    Returns a scalar for 1D factors when `p` is a single point.  The level
    scale s_r cancels inside `query` (each level's grid spans the scaled
    domain), so this is the bookkeeping form of the projection.
    """
    q = apply_rotation(transform, np.asarray(p, dtype=float))
    axes = AXIS_SELECTORS[spec.kind][factor_index]
    out = spec.resolutions[level].scale * q[..., list(axes)]
    if len(axes) == 1:
        return out[..., 0]
    return out


def _map_boundary(x: np.ndarray, boundary: str):
    """Map coordinates into [-1, 1]; returns (mapped, dmapped/dx)."""
    if boundary == "wrap":
        return ((x + 1.0) % 2.0) - 1.0, np.ones_like(x)
    xc = np.clip(x, -1.0, 1.0)
    return xc, ((x >= -1.0) & (x <= 1.0)).astype(float)


def interp_linear(values: np.ndarray, x, boundary: str = "clamp"):
    """Piecewise-linear interpolation of a (n, C) grid at coords in [-1, 1].

    Returns (out, cache); `x` may be scalar or a batch.  Node i sits at
    -1 + 2 i / (n - 1).  Coordinates outside the domain follow `boundary`.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = values.shape[0]
    xc, dmask = _map_boundary(x, boundary)
    g = (xc + 1.0) * 0.5 * (n - 1)
    i0 = np.clip(np.floor(g).astype(int), 0, n - 2)
    w = g - i0
    out = values[i0] * (1.0 - w)[:, None] + values[i0 + 1] * w[:, None]
    cache = (values, i0, w, dmask, n)
    return out, cache


def interp_linear_backward(cache, dout: np.ndarray):
    """Returns (dvalues, dx) for the forward pass described by `cache`."""
    values, i0, w, dmask, n = cache
    dvalues = np.zeros_like(values)
    np.add.at(dvalues, i0, dout * (1.0 - w)[:, None])
    np.add.at(dvalues, i0 + 1, dout * w[:, None])
    dx = np.sum(dout * (values[i0 + 1] - values[i0]), axis=1) * (0.5 * (n - 1)) * dmask
    return dvalues, dx


def interp_bilinear(values: np.ndarray, uv, boundary: str = "clamp"):
    """Bilinear interpolation of a (H, W, C) grid at (..., 2) coords."""
    uv = np.asarray(uv, dtype=float)
    if uv.ndim == 1:
        uv = uv[None, :]
    h, w_, _ = values.shape
    u, du = _map_boundary(uv[:, 0], boundary)
    v, dv = _map_boundary(uv[:, 1], boundary)
    gu = (u + 1.0) * 0.5 * (h - 1)
    gv = (v + 1.0) * 0.5 * (w_ - 1)
    i0 = np.clip(np.floor(gu).astype(int), 0, h - 2)
    j0 = np.clip(np.floor(gv).astype(int), 0, w_ - 2)
    a = gu - i0
    b = gv - j0
    v00 = values[i0, j0]
    v01 = values[i0, j0 + 1]
    v10 = values[i0 + 1, j0]
    v11 = values[i0 + 1, j0 + 1]
    out = (
        v00 * ((1 - a) * (1 - b))[:, None]
        + v01 * ((1 - a) * b)[:, None]
        + v10 * (a * (1 - b))[:, None]
        + v11 * (a * b)[:, None]
    )
    cache = (values, i0, j0, a, b, du, dv, h, w_)
    return out, cache


def interp_bilinear_backward(cache, dout: np.ndarray):
    values, i0, j0, a, b, du, dv, h, w_ = cache
    v00 = values[i0, j0]
    v01 = values[i0, j0 + 1]
    v10 = values[i0 + 1, j0]
    v11 = values[i0 + 1, j0 + 1]
    dvalues = np.zeros_like(values).reshape(h * w_, -1)
    flat = i0 * w_ + j0
    np.add.at(dvalues, flat, dout * ((1 - a) * (1 - b))[:, None])
    np.add.at(dvalues, flat + 1, dout * ((1 - a) * b)[:, None])
    np.add.at(dvalues, flat + w_, dout * (a * (1 - b))[:, None])
    np.add.at(dvalues, flat + w_ + 1, dout * (a * b)[:, None])
    dvalues = dvalues.reshape(values.shape)
    d_da = np.sum(dout * ((v10 - v00) * (1 - b)[:, None] + (v11 - v01) * b[:, None]), axis=1)
    d_db = np.sum(dout * ((v01 - v00) * (1 - a)[:, None] + (v11 - v10) * a[:, None]), axis=1)
    duv = np.stack(
        [d_da * (0.5 * (h - 1)) * du, d_db * (0.5 * (w_ - 1)) * dv], axis=1
    )
    return dvalues, duv


def reduce(spec: DecompositionSpec, per_factor_latents):
    """Combine interpolated latents into the final vector for one group.

    Expects `factors_per_level * len(resolutions)` latents, ordered level by
    level.  CP and K-Planes families multiply elementwise within a level;
    the vector-matrix family multiplies pairs and concatenates; levels are
    concatenated in order.
    """
    fpl = spec.factors_per_level
    want = fpl * len(spec.resolutions)
    if len(per_factor_latents) != want:
        raise StructureError(
            f"{spec.kind} with {len(spec.resolutions)} levels expects {want} latents, "
            f"got {len(per_factor_latents)}"
        )
    shapes = {l.shape for l in per_factor_latents}
    if len(shapes) != 1:
        raise StructureError(f"latent shapes disagree: {sorted(shapes)}")
    blocks = []
    for r in range(len(spec.resolutions)):
        ls = per_factor_latents[r * fpl : (r + 1) * fpl]
        if spec.kind == "vm":
            blocks.extend(ls[i] * ls[i + 1] for i in (0, 2, 4))
        else:
            prod = ls[0].copy()
            for l in ls[1:]:
                prod *= l
            blocks.append(prod)
    return np.concatenate(blocks, axis=-1)


def _interp_factor(arr: np.ndarray, coords: np.ndarray, boundary: str):
    if arr.ndim == 2:
        return interp_linear(arr, coords[:, 0], boundary)
    return interp_bilinear(arr, coords, boundary)


def query(volume: FactoredVolume, p: np.ndarray):
    """Evaluate the factored volume at points `p` of shape (B, dim).

    Returns (Z, cache) with Z of shape (B, latent_dim): one contiguous
    channel block per transform, levels concatenated inside each block.
    """
    spec = volume.spec
    p = np.asarray(p, dtype=float)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None, :]
    if p.shape[1] != spec.point_dim:
        raise StructureError(f"points have dim {p.shape[1]}, spec wants {spec.point_dim}")
    selectors = AXIS_SELECTORS[spec.kind]
    group_blocks = []
    caches = []
    for t, tau in enumerate(volume.transforms.rotations):
        q = apply_rotation(tau, p)
        level_caches = []
        latents = []
        for r in range(len(spec.resolutions)):
            f_caches = []
            for f, axes in enumerate(selectors):
                arr = volume.factors[t][r][f]
                out, cache = _interp_factor(arr, q[:, list(axes)], spec.boundary)
                latents.append(out)
                f_caches.append(cache)
            level_caches.append(f_caches)
        group_blocks.append(_reduce_forward(spec, latents))
        caches.append((q, level_caches, latents))
    Z = np.concatenate(group_blocks, axis=1)
    cache = (p, caches, squeeze)
    return (Z[0] if squeeze else Z), cache


def _reduce_forward(spec: DecompositionSpec, latents):
    fpl = spec.factors_per_level
    blocks = []
    for r in range(len(spec.resolutions)):
        ls = latents[r * fpl : (r + 1) * fpl]
        if spec.kind == "vm":
            blocks.extend(ls[i] * ls[i + 1] for i in (0, 2, 4))
        else:
            prod = ls[0].copy()
            for l in ls[1:]:
                prod *= l
            blocks.append(prod)
    return np.concatenate(blocks, axis=-1)


def _reduce_backward(spec: DecompositionSpec, latents, dblock):
    """Gradient of the per-group reduction with respect to each latent."""
    fpl = spec.factors_per_level
    cg = spec.group_channels
    dlatents = []
    offset = 0
    for r in range(len(spec.resolutions)):
        ls = latents[r * fpl : (r + 1) * fpl]
        if spec.kind == "vm":
            for i in (0, 2, 4):
                dz = dblock[:, offset : offset + cg]
                dlatents.append(dz * ls[i + 1])
                dlatents.append(dz * ls[i])
                offset += cg
        else:
            dz = dblock[:, offset : offset + cg]
            offset += cg
            for f in range(fpl):
                grad = dz.copy()
                for g in range(fpl):
                    if g != f:
                        grad = grad * ls[g]
                dlatents.append(grad)
    return dlatents


def query_backward(volume: FactoredVolume, cache, dZ: np.ndarray):
    """Backward pass of `query`.

    Returns (dfactors, dtau, dp): factor-value gradients with the same
    nesting as `volume.factors`, tangent-space rotation gradients of shape
    (T, tangent_dim), and the gradient with respect to the input points.
    """
    spec = volume.spec
    p, caches, squeeze = cache
    dZ = np.asarray(dZ, dtype=float)
    if squeeze:
        dZ = dZ[None, :]
    selectors = AXIS_SELECTORS[spec.kind]
    block = spec.latent_dim // spec.transforms
    dfactors = volume.zero_like_factors()
    tdim = volume.transforms.rotations[0].tangent_dim
    dtau = np.zeros((spec.transforms, tdim))
    dp = np.zeros_like(p)
    for t, tau in enumerate(volume.transforms.rotations):
        q, level_caches, latents = caches[t]
        dblock = dZ[:, t * block : (t + 1) * block]
        dlatents = _reduce_backward(spec, latents, dblock)
        dq = np.zeros_like(q)
        for r in range(len(spec.resolutions)):
            for f, axes in enumerate(selectors):
                dl = dlatents[r * len(selectors) + f]
                fcache = level_caches[r][f]
                if len(axes) == 1:
                    dvals, dx = interp_linear_backward(fcache, dl)
                    dq[:, axes[0]] += dx
                else:
                    dvals, duv = interp_bilinear_backward(fcache, dl)
                    dq[:, axes[0]] += duv[:, 0]
                    dq[:, axes[1]] += duv[:, 1]
                dfactors[t][r][f] += dvals
        dp_t, dxi = rotation_point_backward(tau, p, dq)
        dp += dp_t
        dtau[t] = dxi
    return dfactors, dtau, (dp[0] if squeeze else dp)


def contract(p):
    """L-infinity scene contraction mapping R^3 into the open cube (-2, 2)^3."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    q = np.atleast_2d(p)
    m = np.max(np.abs(q), axis=1)
    out = q.copy()
    far = m > 1.0
    if np.any(far):
        mf = m[far][:, None]
        out[far] = (2.0 - 1.0 / mf) * (q[far] / mf)
    return out[0] if single else out


def contract_vjp(p, dout):
    """Vector-Jacobian product of `contract` (used when contraction is on)."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    q = np.atleast_2d(p)
    dO = np.atleast_2d(np.asarray(dout, dtype=float))
    m = np.max(np.abs(q), axis=1)
    dp = dO.copy()
    far = np.where(m > 1.0)[0]
    for i in far:
        mi = m[i]
        j = int(np.argmax(np.abs(q[i])))
        s = np.sign(q[i, j])
        scale = 2.0 / mi - 1.0 / (mi * mi)
        dscale_dm = -2.0 / mi**2 + 2.0 / mi**3
        dp[i] = scale * dO[i]
        dp[i, j] += float(np.dot(q[i], dO[i])) * dscale_dm * s
    return dp[0] if single else dp


def tv_regularizer(values: np.ndarray):
    """Mean squared adjacent-node difference, per channel, with gradient."""
    if values.ndim == 2:
        d = values[1:] - values[:-1]
        count = d.size
        loss = float(np.sum(d * d)) / count
        grad = np.zeros_like(values)
        dd = (2.0 / count) * d
        grad[1:] += dd
        grad[:-1] -= dd
        return loss, grad
    if values.ndim == 3:
        d0 = values[1:, :, :] - values[:-1, :, :]
        d1 = values[:, 1:, :] - values[:, :-1, :]
        count = d0.size + d1.size
        loss = (float(np.sum(d0 * d0)) + float(np.sum(d1 * d1))) / count
        grad = np.zeros_like(values)
        dd0 = (2.0 / count) * d0
        dd1 = (2.0 / count) * d1
        grad[1:, :, :] += dd0
        grad[:-1, :, :] -= dd0
        grad[:, 1:, :] += dd1
        grad[:, :-1, :] -= dd1
        return loss, grad
    raise StructureError(f"expected a 1D or 2D feature grid, got ndim={values.ndim}")


def l21_regularizer(volume: FactoredVolume):
    """Sum of per-(transform, factor) parameter group L2 norms, with gradients."""
    loss = 0.0
    grads = volume.zero_like_factors()
    for (t, r, f), arr in volume.factor_items():
        n = float(np.linalg.norm(arr))
        loss += n
        if n > 0.0:
            grads[t][r][f] = arr / n
    return loss, grads


# ---------------------------------------------------------------------------
# Checkpoint container: factors as little-endian float32, transforms and any
# extra arrays (decoder weights) as little-endian float64.

_MAGIC = b"TLTD"
_VERSION = 1


def save_checkpoint(path, volume: FactoredVolume, extras: dict[str, np.ndarray] | None = None):
    extras = extras or {}
    spec = volume.spec
    manifold = "s1" if spec.point_dim == 2 else "s3"
    header = {
        "kind": spec.kind,
        "channels": spec.channels,
        "resolutions": [[r.scale, r.size] for r in spec.resolutions],
        "transforms": spec.transforms,
        "boundary": spec.boundary,
        "manifold": manifold,
        "extras": [[k, list(extras[k].shape)] for k in sorted(extras)],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for _, arr in volume.factor_items():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for tau in volume.transforms.rotations:
            fh.write(tau.as_array().astype("<f8").tobytes())
        for k in sorted(extras):
            fh.write(np.ascontiguousarray(extras[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise StructureError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise StructureError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        spec = DecompositionSpec(
            kind=header["kind"],
            channels=header["channels"],
            resolutions=tuple(Resolution(s, int(n)) for s, n in header["resolutions"]),
            transforms=header["transforms"],
            boundary=header["boundary"],
        )
        factors = []
        for _ in range(spec.transforms):
            group = []
            for r in range(len(spec.resolutions)):
                fs = []
                for shape in spec.factor_shapes(r):
                    count = int(np.prod(shape))
                    data = np.frombuffer(fh.read(4 * count), dtype="<f4")
                    fs.append(data.reshape(shape).astype(float))
                group.append(fs)
            factors.append(group)
        rots: list[Rotation] = []
        width = 2 if header["manifold"] == "s1" else 4
        for _ in range(spec.transforms):
            vals = np.frombuffer(fh.read(8 * width), dtype="<f8")
            if width == 2:
                rots.append(UnitRotation2(*vals).normalized())
            else:
                rots.append(UnitQuaternion(*vals).normalized())
        extras = {}
        for name, shape in header["extras"]:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            extras[name] = data.reshape(shape)
    return FactoredVolume(spec, factors, TransformSet(rots)), extras
