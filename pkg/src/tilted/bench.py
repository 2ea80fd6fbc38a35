"""Experiment harness: 2D rotation/resolution sweeps and analytic-SDF fits.

Every sweep cell is an independent (configuration, seed) training run; a
bounded worker pool may execute cells in parallel, with results merged in
configuration order so report bytes do not depend on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import StructureError
from .field import FourierEncoding, HybridField, Mlp
from .geometry import UnitQuaternion, apply_rotation
from .grids import DecompositionSpec, FactoredVolume, Resolution, TransformSet
from .theory import resample_rotate
from .train import PointDataset, TrainConfig, holdout_split, predict, psnr, train_field

DEG = math.pi / 180.0


# ---------------------------------------------------------------------------
# Report container


@dataclass(frozen=True)
class ReportRow:
    config: str
    variant: str
    key: str  # angle, shape, resolution, or "all"
    seed: int
    metric: str
    value: float


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)

    def add(self, config, variant, key, seed, metric, value):
        self.rows.append(ReportRow(config, variant, str(key), seed, metric, float(value)))

    def extend(self, other: "ExperimentReport"):
        self.rows.extend(other.rows)

    def values(self, **filters) -> list[float]:
        out = []
        for r in self.rows:
            if all(getattr(r, k) == v for k, v in filters.items()):
                out.append(r.value)
        return out

    def to_csv_text(self) -> str:
        lines = ["config,variant,key,seed,metric,value"]
        for r in self.rows:
            lines.append(f"{r.config},{r.variant},{r.key},{r.seed},{r.metric},{r.value:.10g}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())


# ---------------------------------------------------------------------------
# Procedural test images (the published evaluation images are not ours to
# redistribute, so direction-of-effect claims use these instead)


def brick_texture(size: int = 128, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    img = np.full((size, size), 0.15)
    bh = max(4, size // 8)
    bw = max(8, size // 4)
    mortar = max(1, size // 64)
    for row_i, top in enumerate(range(0, size, bh)):
        offset = (bw // 2) if row_i % 2 else 0
        for left in range(-bw + offset, size, bw):
            shade = 0.55 + 0.3 * rng.random()
            r0, r1 = top, min(top + bh - mortar, size)
            c0, c1 = max(left, 0), min(left + bw - mortar, size)
            if r1 > r0 and c1 > c0:
                img[r0:r1, c0:c1] = shade
    return img


def stripe_texture(size: int = 128, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size))
    c = 0
    while c < size:
        w = int(rng.integers(max(2, size // 32), max(4, size // 10)))
        img[:, c : c + w] = 0.2 + 0.7 * rng.random()
        c += w
    # a few horizontal bands keep both axes populated
    for _ in range(3):
        r = int(rng.integers(0, size - size // 16))
        img[r : r + size // 16, :] = 0.2 + 0.7 * rng.random()
    return img


def checker_texture(size: int = 128, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    cell = max(4, size // 8)
    img = np.zeros((size, size))
    for i0 in range(0, size, cell):
        for j0 in range(0, size, cell):
            base = 0.75 if ((i0 // cell) + (j0 // cell)) % 2 == 0 else 0.2
            img[i0 : i0 + cell, j0 : j0 + cell] = base + 0.1 * (rng.random() - 0.5)
    return np.clip(img, 0.0, 1.0)


TEXTURES = {"bricks": brick_texture, "stripes": stripe_texture, "checker": checker_texture}


def load_image(path_or_name, size: int = 128) -> np.ndarray:
    """Bundled texture by name, or an 8-bit PNG from disk scaled to [0, 1]."""
    if isinstance(path_or_name, np.ndarray):
        return np.asarray(path_or_name, dtype=float)
    if path_or_name in TEXTURES:
        return TEXTURES[path_or_name](size)
    from PIL import Image

    img = np.asarray(Image.open(path_or_name), dtype=float) / 255.0
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    return img


def save_png(path, image: np.ndarray):
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# Analytic signed distance fields


@dataclass(frozen=True)
class AnalyticSdf:
    """Exact signed distance function built from primitive shapes."""

    kind: str  # sphere | box | rotated_box | union
    radius: float = 0.0
    half_extents: tuple = ()
    rotation: UnitQuaternion | None = None
    parts: tuple = ()

    @staticmethod
    def sphere(radius: float) -> "AnalyticSdf":
        return AnalyticSdf("sphere", radius=radius)

    @staticmethod
    def box(half_extents) -> "AnalyticSdf":
        return AnalyticSdf("box", half_extents=tuple(half_extents))

    @staticmethod
    def rotated_box(half_extents, rotation: UnitQuaternion) -> "AnalyticSdf":
        return AnalyticSdf("rotated_box", half_extents=tuple(half_extents), rotation=rotation)

    @staticmethod
    def union(parts) -> "AnalyticSdf":
        return AnalyticSdf("union", parts=tuple(parts))

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=float))
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=1) - self.radius
        if self.kind == "box":
            q = np.abs(p) - np.asarray(self.half_extents)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            return outside + inside
        if self.kind == "rotated_box":
            local = apply_rotation(self.rotation.inverse(), p)
            return AnalyticSdf.box(self.half_extents).sdf(local)
        if self.kind == "union":
            return np.min(np.stack([s.sdf(p) for s in self.parts]), axis=0)
        raise StructureError(f"unknown sdf kind {self.kind!r}")


def sample_sdf_points(shape: AnalyticSdf, count: int, seed: int,
                      near_fraction: float = 0.5, near_sigma: float = 0.01):
    """Training mixture: uniform box samples plus near-surface samples.

    Near-surface points are uniform samples projected along the SDF
    gradient and jittered with Gaussian noise of scale `near_sigma`.
    """
    rng = np.random.default_rng(seed)
    n_near = int(count * near_fraction)
    n_uni = count - n_near
    uni = rng.uniform(-1.0, 1.0, size=(n_uni, 3))
    base = rng.uniform(-1.0, 1.0, size=(n_near, 3))
    d = shape.sdf(base)
    h = 1e-5
    grad = np.stack(
        [
            (shape.sdf(base + h * e) - shape.sdf(base - h * e)) / (2 * h)
            for e in np.eye(3)
        ],
        axis=1,
    )
    norms = np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-9)
    surface = base - d[:, None] * grad / norms
    near = np.clip(surface + rng.normal(scale=near_sigma, size=surface.shape), -1.0, 1.0)
    pts = np.concatenate([uni, near], axis=0)
    return pts, shape.sdf(pts)[:, None]


def eval_grid_points(resolution: int = 64) -> np.ndarray:
    xs = np.linspace(-1.0, 1.0, resolution)
    g = np.meshgrid(xs, xs, xs, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def iou(pred_sdf_samples, gt_sdf_samples) -> float:
    """Sign-agreement intersection-over-union of the interiors (sdf <= 0)."""
    pred = np.asarray(pred_sdf_samples, dtype=float).ravel()
    gt = np.asarray(gt_sdf_samples, dtype=float).ravel()
    if pred.shape != gt.shape:
        raise StructureError(f"sample count mismatch: {pred.shape} vs {gt.shape}")
    p_in = pred <= 0.0
    g_in = gt <= 0.0
    union = np.count_nonzero(p_in | g_in)
    if union == 0:
        return 1.0
    return np.count_nonzero(p_in & g_in) / union


# ---------------------------------------------------------------------------
# Model builders


def build_image_field(seed: int, tilted: bool, grid_size: int = 128, channels: int = 64,
                      transforms: int = 8, hidden: tuple = (32, 32), frequencies: int = 6,
                      out_channels: int = 1) -> HybridField:
    """2D CP field: `channels` vector pairs at `grid_size`, optionally split
    across learned rotations."""
    rng = np.random.default_rng(seed)
    T = transforms if tilted else 1
    spec = DecompositionSpec("cp2d", channels=channels,
                             resolutions=(Resolution(1.0, grid_size),), transforms=T)
    vol = FactoredVolume.create(spec, rng, random_transforms=tilted)
    enc = FourierEncoding(frequencies)
    dec = Mlp.create([enc.output_dim(spec.latent_dim), *hidden, out_channels], rng,
                     output_activation="sigmoid")
    return HybridField(vol, enc, dec)


def build_sdf_field(seed: int, decomposition: str, tilted: bool, channels: int = 15,
                    transforms: int = 5, sizes: tuple = (32, 64, 128),
                    hidden: tuple = (64, 64, 64), frequencies: int = 4) -> HybridField:
    """3D field on K-Planes or vector-matrix factors at three resolutions."""
    if decomposition not in ("kplanes", "vm"):
        raise StructureError(f"unsupported decomposition {decomposition!r}")
    rng = np.random.default_rng(seed)
    T = transforms if tilted else 1
    res = tuple(Resolution(float(2**i), s) for i, s in enumerate(sizes))
    spec = DecompositionSpec(decomposition, channels=channels, resolutions=res, transforms=T)
    vol = FactoredVolume.create(spec, rng, random_transforms=tilted)
    enc = FourierEncoding(frequencies)
    dec = Mlp.create([enc.output_dim(spec.latent_dim), *hidden, 1], rng,
                     output_activation="identity")
    return HybridField(vol, enc, dec)


# ---------------------------------------------------------------------------
# 2D rotation and resolution sweeps


@dataclass(frozen=True)
class RotationSweepConfig:
    """2D sweep protocol: CP vector pairs, half-pixel holdout, two variants.

    The rotation-learning variant trains in two phases: a channel-limited
    bottleneck recovers the transforms, which then initialize the full
    model (only the rotations survive the hand-off).  Field random
    initialization depends on the seed but not the angle, so angle curves
    compare like against like.
    """

    image: str = "bricks"
    image_size: int = 128
    angles_deg: tuple = tuple(range(0, 181, 10))
    seeds: tuple = (0, 1, 2, 3, 4)
    variants: tuple = ("axis", "tilted")
    transforms: int = 8
    channels: int = 64
    grid_size: int = 128
    hidden: tuple = (32, 32)
    frequencies: int = 2
    axis_steps: int = 720
    phase1_channels: int = 8
    phase1_steps: int = 800
    phase1_batch: int = 512
    phase1_lr_transform: float = 0.015
    phase1_lowpass_steps: int = 320
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=800, batch_size=192, lr_grid=0.03, lr_decoder=3e-3, lr_transform=0.006,
        lowpass_steps=0, tv_weight=1e-4, l21_weight=1e-5))
    threads: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise StructureError("at least one seed is required")
        if any(a < 0 or a > 180 for a in self.angles_deg):
            raise StructureError("angles must lie in [0, 180] degrees")


def _image_cell(args):
    (angle_deg, seed, variant, image, cfg) = args
    rotated = np.clip(resample_rotate(image, angle_deg * DEG), 0.0, 1.0)
    ds = PointDataset.from_image(rotated, seed=seed)
    out_ch = ds.targets.shape[1]
    if variant != "tilted":
        f = build_image_field(seed=1000 + seed, tilted=False, grid_size=cfg.grid_size,
                              channels=cfg.channels, hidden=cfg.hidden,
                              frequencies=cfg.frequencies, out_channels=out_ch)
        tc = replace(cfg.train, steps=cfg.axis_steps, seed=seed, train_transforms=False)
        _, rep = train_field(f, ds, tc)
        return rep.holdout_psnr
    bneck = build_image_field(seed=1000 + seed, tilted=True, grid_size=cfg.grid_size,
                              channels=cfg.phase1_channels, transforms=cfg.transforms,
                              hidden=cfg.hidden, frequencies=cfg.frequencies,
                              out_channels=out_ch)
    cfg1 = replace(cfg.train, steps=cfg.phase1_steps, batch_size=cfg.phase1_batch,
                   lr_transform=cfg.phase1_lr_transform,
                   lowpass_steps=cfg.phase1_lowpass_steps, seed=seed, train_transforms=True)
    bneck, _ = train_field(bneck, ds, cfg1)
    f = build_image_field(seed=2000 + seed, tilted=True, grid_size=cfg.grid_size,
                          channels=cfg.channels, transforms=cfg.transforms,
                          hidden=cfg.hidden, frequencies=cfg.frequencies,
                          out_channels=out_ch)
    f.volume.transforms = TransformSet(list(bneck.volume.transforms.rotations))
    tc = replace(cfg.train, seed=seed, train_transforms=True)
    _, rep = train_field(f, ds, tc)
    return rep.holdout_psnr


def _run_cells(fn, cells, threads: int):
    if threads <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, cells, chunksize=1))


def rotation_sweep(cfg: RotationSweepConfig) -> ExperimentReport:
    """Train axis-aligned and rotation-learning variants across image
    rotations; reports per-cell holdout PSNR plus per-variant spread."""
    image = load_image(cfg.image, cfg.image_size)
    cells = [
        (a, s, v, image, cfg)
        for v in cfg.variants
        for s in cfg.seeds
        for a in cfg.angles_deg
    ]
    psnrs = _run_cells(_image_cell, cells, cfg.threads)
    report = ExperimentReport()
    cid = f"rotation_sweep_{cfg.image}"
    for (a, s, v, _, _), val in zip(cells, psnrs):
        report.add(cid, v, a, s, "holdout_psnr", val)
    for v in cfg.variants:
        for s in cfg.seeds:
            vals = np.array(
                [val for (a, sd, vv, _, _), val in zip(cells, psnrs) if vv == v and sd == s]
            )
            report.add(cid, v, "all", s, "psnr_std_across_angles", vals.std())
            report.add(cid, v, "all", s, "psnr_mean_across_angles", vals.mean())
            report.add(cid, v, "all", s, "psnr_range_across_angles", vals.max() - vals.min())
    return report


def resolution_sweep(image, resolutions=(32, 64, 128, 256), variants=("axis", "tilted"),
                     angle_deg: float = 30.0, seeds=(0,), base: RotationSweepConfig | None = None,
                     threads: int = 1) -> ExperimentReport:
    """Holdout PSNR as the latent grid resolution varies, at a fixed angle."""
    base = base or RotationSweepConfig()
    img = load_image(image, base.image_size)
    report = ExperimentReport()
    cells = []
    for v in variants:
        for s in seeds:
            for r in resolutions:
                cells.append((angle_deg, s, v, img, replace(base, grid_size=int(r))))
    psnrs = _run_cells(_image_cell, cells, threads)
    cid = "resolution_sweep"
    for (a, s, v, _, c), val in zip(cells, psnrs):
        report.add(cid, v, c.grid_size, s, "holdout_psnr", val)
    return report


# ---------------------------------------------------------------------------
# SDF fitting


@dataclass(frozen=True)
class SdfFitConfig:
    decomposition: str = "kplanes"
    tilted: bool = True
    channels: int = 15
    transforms: int = 5
    sizes: tuple = (32, 64, 128)
    hidden: tuple = (64, 64, 64)
    frequencies: int = 4
    train_points: int = 200_000
    eval_resolution: int = 64
    near_sigma: float = 0.01
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=1200, batch_size=512, lr_grid=0.02, lr_decoder=2e-3, lr_transform=0.02,
        tv_weight=1e-5, l21_weight=1e-6))


def sdf_fit(shape: AnalyticSdf, cfg: SdfFitConfig, seed: int = 0,
            config_id: str = "sdf_fit", shape_name: str = "shape") -> ExperimentReport:
    """Regress the signed distance of `shape` and report interior IoU on a
    held-out uniform evaluation grid."""
    pts, targets = sample_sdf_points(shape, cfg.train_points, seed=seed,
                                     near_sigma=cfg.near_sigma)
    ds = PointDataset(pts, targets, np.arange(len(pts)), np.arange(0))
    f = build_sdf_field(seed=seed * 9173 + 11, decomposition=cfg.decomposition,
                        tilted=cfg.tilted, channels=cfg.channels,
                        transforms=cfg.transforms, sizes=cfg.sizes,
                        hidden=cfg.hidden, frequencies=cfg.frequencies)
    tc = replace(cfg.train, seed=seed, train_transforms=cfg.tilted)
    _, rep = train_field(f, ds, tc)
    eval_pts = eval_grid_points(cfg.eval_resolution)
    pred = predict(f, eval_pts, k=tc.steps, chunk=16384)[:, 0]
    gt = shape.sdf(eval_pts)
    report = ExperimentReport()
    variant = "tilted" if cfg.tilted else "axis"
    report.add(config_id, variant, shape_name, seed, "iou", iou(pred, gt))
    report.add(config_id, variant, shape_name, seed, "train_loss_final", rep.losses[-1])
    return report


# ---------------------------------------------------------------------------
# Qualitative outputs


def render_image(f: HybridField, height: int, width: int, k: int = 10**9) -> np.ndarray:
    rows = -1.0 + 2.0 * np.arange(height) / (height - 1)
    cols = -1.0 + 2.0 * np.arange(width) / (width - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1)
    out = predict(f, pts, k=k)
    if out.shape[1] == 1:
        return out.reshape(height, width)
    return out.reshape(height, width, -1)


def latent_norm_image(f: HybridField, height: int, width: int) -> np.ndarray:
    """Per-pixel L2 norm of the interpolated latent, scaled to [0, 1]."""
    from .grids import query

    rows = -1.0 + 2.0 * np.arange(height) / (height - 1)
    cols = -1.0 + 2.0 * np.arange(width) / (width - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1)
    Z, _ = query(f.volume, pts)
    norms = np.linalg.norm(Z, axis=1).reshape(height, width)
    peak = norms.max()
    return norms / peak if peak > 0 else norms
