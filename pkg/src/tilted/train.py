"""Training loops for hybrid fields.

Grids and decoder parameters take Euclidean ADAM steps; rotations take
Riemannian ADAM steps through the exponential map.  Batches are drawn
with replacement using a counter-based RNG keyed on (seed, step), so a
run is a pure function of its configuration.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, StructureError
from .field import HybridField, LowPassSchedule, field_backward, field_forward
from .grids import TransformSet, l21_regularizer, tv_regularizer
from .geometry import RiemannianAdamState, riemannian_adam_step


@dataclass(frozen=True)
class TwoPhaseConfig:
    enabled: bool = False
    bottleneck_channels: int = 8
    bottleneck_steps: int = 500


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 256
    lr_grid: float = 0.02
    lr_decoder: float = 2e-3
    lr_transform: float = 0.02
    tv_weight: float = 1e-4
    l21_weight: float = 1e-5
    lowpass_steps: int = -1  # -1: anneal over 70% of steps; 0: disabled
    seed: int = 0
    train_transforms: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    two_phase: TwoPhaseConfig = field(default_factory=TwoPhaseConfig)

    def __post_init__(self):
        for name in ("lr_grid", "lr_decoder", "lr_transform"):
            if getattr(self, name) <= 0:
                raise StructureError(f"{name} must be positive")


@dataclass
class PointDataset:
    """Coordinate/target pairs plus a train/holdout split."""

    points: np.ndarray  # (N, dim)
    targets: np.ndarray  # (N, out)
    train_idx: np.ndarray
    eval_idx: np.ndarray

    @staticmethod
    def from_image(image: np.ndarray, seed: int) -> "PointDataset":
        img = np.asarray(image, dtype=float)
        if img.ndim == 2:
            img = img[:, :, None]
        h, w, c = img.shape
        rows = -1.0 + 2.0 * np.arange(h) / (h - 1)
        cols = -1.0 + 2.0 * np.arange(w) / (w - 1)
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        points = np.stack([rr.ravel(), cc.ravel()], axis=1)
        targets = img.reshape(h * w, c)
        train_mask, eval_mask = holdout_split(h * w, seed)
        return PointDataset(points, targets,
                            np.where(train_mask)[0], np.where(eval_mask)[0])


@dataclass
class TrainReport:
    losses: np.ndarray
    final_train_psnr: float
    holdout_psnr: float
    wall_clock: float
    final_tau: list[np.ndarray]
    events: list[str] = field(default_factory=list)

    def trace_csv_text(self) -> str:
        lines = ["step,loss"]
        lines += [f"{k},{v:.12g}" for k, v in enumerate(self.losses)]
        return "\n".join(lines) + "\n"

    def summary_csv_text(self) -> str:
        taus = ";".join(",".join(f"{x:.17g}" for x in t) for t in self.final_tau)
        return (
            "steps,final_train_psnr,holdout_psnr,final_tau\n"
            f"{len(self.losses)},{self.final_train_psnr:.12g},"
            f"{self.holdout_psnr:.12g},\"{taus}\"\n"
        )


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range signals, capped at 99."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise StructureError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * math.log10(1.0 / mse))


def holdout_split(n: int, seed: int):
    """Disjoint, exhaustive boolean masks with |train| = ceil(n / 2)."""
    if n < 2:
        raise StructureError("need at least 2 samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    k = (n + 1) // 2
    train = np.zeros(n, dtype=bool)
    train[perm[:k]] = True
    return train, ~train


class _Adam:
    """Plain elementwise ADAM over a list of arrays, updated in place."""

    def __init__(self, arrays, lr, beta1, beta2, eps):
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0

    def step(self, arrays, grads):
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _batch_rng(seed: int, step: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(step)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _flatten_factor_grads(volume, nested):
    return [nested[t][r][f] for (t, r, f), _ in volume.factor_items()]


def _snapshot(field: HybridField):
    return {
        "factors": [[[a.copy() for a in fs] for fs in g] for g in field.volume.factors],
        "transforms": list(field.volume.transforms.rotations),
        "weights": [w.copy() for w in field.decoder.weights],
        "biases": [b.copy() for b in field.decoder.biases],
    }


def train_field(field: HybridField, dataset: PointDataset, cfg: TrainConfig):
    """Optimize `field` on the dataset's train split; returns (field, report).

    The loss is mean squared reconstruction error plus weighted TV and
    column-norm (L2,1) regularizers.  Aborts with the last finite state if
    the loss goes non-finite; halves all learning rates once if the loss
    exceeds 10x its initial value.
    """
    t_start = time.perf_counter()
    volume = field.volume
    if cfg.lowpass_steps != 0:
        n = cfg.lowpass_steps if cfg.lowpass_steps > 0 else max(1, int(0.7 * cfg.steps))
        field.schedule = LowPassSchedule(n, 0.0, float(field.encoding.frequencies))
    else:
        field.schedule = None

    grid_arrays = [arr for _, arr in volume.factor_items()]
    dec_arrays = field.decoder.weights + field.decoder.biases
    opt_grid = _Adam(grid_arrays, cfg.lr_grid, cfg.beta1, cfg.beta2, cfg.eps)
    opt_dec = _Adam(dec_arrays, cfg.lr_decoder, cfg.beta1, cfg.beta2, cfg.eps)
    tdim = volume.transforms.rotations[0].tangent_dim
    opt_tau = RiemannianAdamState.init(
        len(volume.transforms), tdim, lr=cfg.lr_transform,
        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
    )

    pts = dataset.points
    tgs = dataset.targets
    train_idx = dataset.train_idx
    losses = np.zeros(cfg.steps)
    events: list[str] = []
    initial_loss = None
    halved = False
    last_good = None

    for k in range(cfg.steps):
        rng = _batch_rng(cfg.seed, k)
        idx = train_idx[rng.integers(0, len(train_idx), size=cfg.batch_size)]
        loss, _out, grads = field_backward(field, pts[idx], tgs[idx], k=k)
        gfac = grads.factors
        if cfg.tv_weight != 0.0:
            for (t, r, f), arr in volume.factor_items():
                tvl, tvg = tv_regularizer(arr)
                loss += cfg.tv_weight * tvl
                gfac[t][r][f] += cfg.tv_weight * tvg
        if cfg.l21_weight != 0.0:
            l21l, l21g = l21_regularizer(volume)
            loss += cfg.l21_weight * l21l
            for (t, r, f), _ in volume.factor_items():
                gfac[t][r][f] += cfg.l21_weight * l21g[t][r][f]

        if not math.isfinite(loss):
            raise DivergenceError(
                f"non-finite loss at step {k}", last_good=last_good, step=k
            )
        losses[k] = loss
        last_good = _snapshot(field)
        if initial_loss is None:
            initial_loss = loss
        elif not halved and loss > 10.0 * initial_loss:
            opt_grid.lr *= 0.5
            opt_dec.lr *= 0.5
            opt_tau.lr = opt_tau.rate(opt_tau.step) * 0.5
            halved = True
            events.append(f"step {k}: loss {loss:.4g} > 10x initial, halved learning rates")

        opt_grid.step(grid_arrays, _flatten_factor_grads(volume, gfac))
        opt_dec.step(dec_arrays, grads.dweights + grads.dbiases)
        if cfg.train_transforms:
            volume.transforms.rotations = riemannian_adam_step(
                volume.transforms.rotations, opt_tau, grads.tau
            )

    final_k = cfg.steps
    train_psnr = _eval_psnr(field, pts[train_idx], tgs[train_idx], final_k)
    holdout_psnr = (
        _eval_psnr(field, pts[dataset.eval_idx], tgs[dataset.eval_idx], final_k)
        if len(dataset.eval_idx)
        else float("nan")
    )
    report = TrainReport(
        losses=losses,
        final_train_psnr=train_psnr,
        holdout_psnr=holdout_psnr,
        wall_clock=time.perf_counter() - t_start,
        final_tau=[t.as_array() for t in volume.transforms.rotations],
        events=events,
    )
    return field, report


def _eval_psnr(field, pts, tgs, k, chunk=8192):
    preds = predict(field, pts, k=k, chunk=chunk)
    return psnr(preds, tgs)


def predict(field: HybridField, pts: np.ndarray, k: int = 0, chunk: int = 8192):
    outs = []
    for i in range(0, len(pts), chunk):
        outs.append(field_forward(field, pts[i : i + chunk], k=k, check=False))
    return np.concatenate(outs, axis=0)


def two_phase_train(make_bottleneck, make_full, dataset: PointDataset, cfg: TrainConfig):
    """Bottleneck-then-full training; only the rotations survive phase one.

    `make_bottleneck` and `make_full` build fresh fields (the bottleneck one
    is expected to use a channel-limited CP decomposition).  Returns
    (full_field, report, phase1_report); the full field starts from exactly
    the phase-one transforms.
    """
    if not cfg.two_phase.enabled:
        raise StructureError("two_phase.enabled must be set")
    bneck = make_bottleneck()
    cfg1 = replace(cfg, steps=cfg.two_phase.bottleneck_steps)
    bneck, rep1 = train_field(bneck, dataset, cfg1)
    carried = TransformSet(list(bneck.volume.transforms.rotations))

    full = make_full()
    if full.volume.spec.transforms != len(carried):
        raise StructureError(
            f"full field wants {full.volume.spec.transforms} transforms, "
            f"bottleneck provided {len(carried)}"
        )
    full.volume.transforms = carried
    full, rep2 = train_field(full, dataset, cfg)
    rep2.events = rep1.events + rep2.events
    return full, rep2, rep1
