"""Hybrid field: factored volume -> Fourier features -> small MLP.

The Fourier encoding carries per-frequency weights that are annealed from
0 to 1 during training (coarse-to-fine), so early optimization only sees
low-frequency structure.  Forward and reverse passes are written out by
hand; every trainable scalar (factor grids, rotation tangents, decoder
weights) receives an analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, StructureError
from .grids import FactoredVolume, contract, contract_vjp, query, query_backward


@dataclass(frozen=True)
class FourierEncoding:
    frequencies: int  # J
    include_identity: bool = True

    def output_dim(self, in_dim: int) -> int:
        per = 2 * self.frequencies + (1 if self.include_identity else 0)
        return in_dim * per


@dataclass(frozen=True)
class LowPassSchedule:
    """Linear ramp of the frequency cutoff eta over training steps."""

    total_steps: int
    eta_start: float = 0.0
    eta_end: float = 0.0

    def eta(self, k: int) -> float:
        if self.total_steps <= 0:
            return self.eta_end
        frac = min(max(k / self.total_steps, 0.0), 1.0)
        return self.eta_start + (self.eta_end - self.eta_start) * frac


def lowpass_weights(k: int, schedule: LowPassSchedule, frequencies: int) -> np.ndarray:
    """Per-band weights w_j = (1 - cos(pi clamp(eta_k - j, 0, 1))) / 2."""
    eta = schedule.eta(k)
    j = np.arange(frequencies, dtype=float)
    t = np.clip(eta - j, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def fourier_encode(z: np.ndarray, weights: np.ndarray, include_identity: bool = True):
    """Encode each latent channel as [z, w_j sin(2^j pi z), w_j cos(2^j pi z)]_j.

    `z` has shape (B, C); output (B, C * (1 + 2J)) with the identity slot
    first inside each channel block.  Returns (encoded, cache).
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    w = np.asarray(weights, dtype=float)
    J = w.shape[0]
    freqs = np.pi * (2.0 ** np.arange(J))
    B, C = z.shape
    per = 2 * J + (1 if include_identity else 0)
    out = np.empty((B, C, per))
    off = 0
    if include_identity:
        out[:, :, 0] = z
        off = 1
    ang = z[:, :, None] * freqs  # (B, C, J)
    sv = out[:, :, off::2]
    cv = out[:, :, off + 1 :: 2]
    np.sin(ang, out=sv)
    np.cos(ang, out=cv)
    sv *= w
    cv *= w
    # sv, cv now hold w_j sin / w_j cos; they stay views into the output.
    cache = (sv, cv, freqs, include_identity, z.shape)
    return out.reshape(B, C * per), cache


def fourier_encode_backward(cache, dout: np.ndarray) -> np.ndarray:
    sw, cw, freqs, include_identity, zshape = cache
    B, C = zshape
    per = 2 * freqs.shape[0] + (1 if include_identity else 0)
    d = dout.reshape(B, C, per)
    off = 1 if include_identity else 0
    ds = d[:, :, off::2]
    dc = d[:, :, off + 1 :: 2]
    # d/dz [w sin(f z)] = w f cos(f z); the w factor is already inside cw/sw.
    tmp = ds * cw
    tmp -= dc * sw
    tmp *= freqs
    dz = tmp.sum(axis=2)
    if include_identity:
        dz += d[:, :, 0]
    return dz


@dataclass
class Mlp:
    """Fully-connected decoder with rectifier hidden units."""

    weights: list[np.ndarray]  # (in, out) each
    biases: list[np.ndarray]
    output_activation: str = "identity"  # or "sigmoid"

    @staticmethod
    def create(sizes, rng: np.random.Generator, output_activation="identity") -> "Mlp":
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        return Mlp(ws, bs, output_activation)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameter_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.output_activation)

    def forward(self, x: np.ndarray):
        acts = [np.atleast_2d(x)]
        h = acts[0]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        if self.output_activation == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-h))
            acts.append(h)
        return h, acts

    def backward(self, acts, dout: np.ndarray):
        d = np.atleast_2d(dout)
        if self.output_activation == "sigmoid":
            y = acts[-1]
            d = d * y * (1.0 - y)
            acts = acts[:-1]
        dws = [None] * len(self.weights)
        dbs = [None] * len(self.biases)
        for i in reversed(range(len(self.weights))):
            pre = acts[i + 1]
            if i < len(self.weights) - 1:
                d = d * (pre > 0.0)
            x = acts[i]
            dws[i] = x.T @ d
            dbs[i] = d.sum(axis=0)
            d = d @ self.weights[i].T
        return d, dws, dbs


@dataclass
class HybridField:
    volume: FactoredVolume
    encoding: FourierEncoding
    decoder: Mlp
    schedule: LowPassSchedule | None = None
    use_contraction: bool = False

    def __post_init__(self):
        want = self.encoding.output_dim(self.volume.spec.latent_dim)
        if self.decoder.in_dim != want:
            raise StructureError(
                f"decoder expects input dim {self.decoder.in_dim}, encoded latent is {want}"
            )

    def weights_at(self, k: int) -> np.ndarray:
        if self.schedule is None:
            return np.ones(self.encoding.frequencies)
        return lowpass_weights(k, self.schedule, self.encoding.frequencies)

    def copy(self) -> "HybridField":
        return HybridField(self.volume.copy(), self.encoding, self.decoder.copy(),
                           self.schedule, self.use_contraction)


@dataclass
class FieldGradients:
    factors: list  # same nesting as volume.factors
    tau: np.ndarray  # (T, tangent_dim)
    dweights: list
    dbiases: list


def _check_finite(field: HybridField):
    for (t, r, f), arr in field.volume.factor_items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"factor grid ({t},{r},{f}) contains non-finite values")
    for i, w in enumerate(field.decoder.weights):
        if not np.all(np.isfinite(w)):
            raise NumericError(f"decoder weight matrix {i} contains non-finite values")
    for i, b in enumerate(field.decoder.biases):
        if not np.all(np.isfinite(b)):
            raise NumericError(f"decoder bias vector {i} contains non-finite values")


def field_forward(field: HybridField, p: np.ndarray, k: int = 0, check: bool = True):
    """Evaluate the field at points `p`; returns outputs of shape (B, out)."""
    out, _ = _forward_cached(field, p, k, check=check)
    return out


def _forward_cached(field: HybridField, p: np.ndarray, k: int, check: bool = True):
    if check:
        _check_finite(field)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    p_in = contract(p) if field.use_contraction else p
    Z, qcache = query(field.volume, p_in)
    w = field.weights_at(k)
    enc, ecache = fourier_encode(Z, w, field.encoding.include_identity)
    out, acts = field.decoder.forward(enc)
    return out, (p, qcache, ecache, acts)


def field_backward(field: HybridField, points, targets, k: int = 0, reduction: str = "mean"):
    """Squared-error loss and gradients for every trainable parameter class.

    Returns (loss, out, FieldGradients).  With `reduction="mean"` the loss
    averages over batch and output channels; `"sum"` sums instead.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if points.shape[0] == 0:
        raise StructureError("empty batch")
    if targets.shape[0] != points.shape[0]:
        raise StructureError(
            f"{points.shape[0]} points but {targets.shape[0]} targets"
        )
    out, (p, qcache, ecache, acts) = _forward_cached(field, points, k)
    resid = out - targets
    if reduction == "mean":
        scale = 1.0 / resid.size
    elif reduction == "sum":
        scale = 1.0
    else:
        raise StructureError(f"unknown reduction {reduction!r}")
    loss = float(np.sum(resid * resid)) * scale
    dout = 2.0 * scale * resid
    denc, dws, dbs = field.decoder.backward(acts, dout)
    dZ = fourier_encode_backward(ecache, denc)
    dfactors, dtau, _dp = query_backward(field.volume, qcache, dZ)
    return loss, out, FieldGradients(dfactors, dtau, dws, dbs)
