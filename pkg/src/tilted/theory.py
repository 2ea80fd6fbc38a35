"""Numerical oracle suite for the rotated-template model problem.

A centered square template has an exactly rank-one pixel grid; rotating
it by 45 degrees (the "diamond") makes low-rank approximation provably
inefficient, while jointly recovering a rotation and a single factor
succeeds.  This module builds the templates, their analytic spectrum,
the power-method factorization stages, the smoothed alignment gradient,
and the three-stage alternating recovery algorithm, all on finite grids
so the continuum statements can be checked numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError, StructureError

ROOT_HALF = 1.0 / math.sqrt(2.0)


def grid_nodes(n: int) -> np.ndarray:
    """n nodes covering [-1, 1]; node i sits at -1 + 2i/(n-1)."""
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def cell_width(n: int) -> float:
    return 2.0 / (n - 1)


def grid_inner(u: np.ndarray, v: np.ndarray, dx: float) -> float:
    return float(np.dot(u, v)) * dx


def grid_norm(u: np.ndarray, dx: float) -> float:
    return math.sqrt(max(grid_inner(u, u, dx), 0.0))


# ---------------------------------------------------------------------------
# Templates and observations


def make_square(n: int, alpha: float) -> np.ndarray:
    """Centered binary square: 1 where the sup-norm distance from the image
    center is at most alpha * (n-1)/2."""
    if n < 3:
        raise StructureError("resolution must be at least 3")
    if not (0.0 < alpha <= ROOT_HALF + 1e-12):
        raise ValueError(f"alpha must lie in (0, 1/sqrt(2)], got {alpha}")
    c = 0.5 * (n - 1)
    idx = np.arange(n) - c
    row = (np.abs(idx) <= alpha * c).astype(float)
    return np.outer(row, row)


def square_factor(n: int, alpha: float) -> np.ndarray:
    """The 1D square pulse u with make_square = u u^T."""
    c = 0.5 * (n - 1)
    return (np.abs(np.arange(n) - c) <= alpha * c).astype(float)


def rotated_square(n: int, alpha: float, nu: float) -> np.ndarray:
    """Directly-sampled observation: the square rotated (ccw) by `nu`."""
    if n < 3:
        raise StructureError("resolution must be at least 3")
    c = 0.5 * (n - 1)
    idx = np.arange(n) - c
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    cs, sn = math.cos(nu), math.sin(nu)
    # back-rotate pixel offsets: R_{-nu} (x - c)
    r0 = cs * ii + sn * jj
    r1 = -sn * ii + cs * jj
    return ((np.maximum(np.abs(r0), np.abs(r1))) <= alpha * c).astype(float)


def sampled_diamond(n: int, alpha: float = ROOT_HALF) -> np.ndarray:
    return rotated_square(n, alpha, math.pi / 4.0)


def resample_rotate(image: np.ndarray, nu: float) -> np.ndarray:
    """Rotate image content counterclockwise by `nu` about the image center,
    using bilinear interpolation; samples outside the source read as zero."""
    img = np.asarray(image, dtype=float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    c0, c1 = 0.5 * (h - 1), 0.5 * (w - 1)
    ii, jj = np.meshgrid(np.arange(h) - c0, np.arange(w) - c1, indexing="ij")
    cs, sn = math.cos(nu), math.sin(nu)
    src_r = (c0 + cs * ii + sn * jj).ravel()
    src_c = (c1 - sn * ii + cs * jj).ravel()
    i0 = np.floor(src_r).astype(int)
    j0 = np.floor(src_c).astype(int)
    a = src_r - i0
    b = src_c - j0
    out = np.zeros((h * w, c))
    for di, dj, wt in (
        (0, 0, (1 - a) * (1 - b)),
        (0, 1, (1 - a) * b),
        (1, 0, a * (1 - b)),
        (1, 1, a * b),
    ):
        ri = i0 + di
        cj = j0 + dj
        valid = (ri >= 0) & (ri < h) & (cj >= 0) & (cj < w)
        idx = np.where(valid)[0]
        out[idx] += wt[idx, None] * img[ri[idx], cj[idx]]
    out = out.reshape(h, w, c)
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# Low-rank approximation error


def rank_error_curve(X: np.ndarray) -> np.ndarray:
    """Mean squared error of the best rank-F approximation, for F = 0..n.

    Entry F is (1/n^2) * sum_{i>F} sigma_i^2, by Eckart-Young-Mirsky.
    """
    X = np.asarray(X, dtype=float)
    s2 = np.linalg.svd(X, compute_uv=False) ** 2
    tail = np.concatenate([[s2.sum()], s2.sum() - np.cumsum(s2)])
    tail = np.maximum(tail, 0.0)
    return tail / X.size


def svd_rank_error(X: np.ndarray, F: int) -> float:
    """Best rank-F mean squared approximation error of X."""
    if F < 0:
        raise StructureError("rank must be nonnegative")
    curve = rank_error_curve(X)
    return float(curve[min(F, len(curve) - 1)])


def min_rank_for_psnr(mse_curve: np.ndarray, psnr_db: float) -> int:
    """Smallest F whose rank-F error meets the PSNR target; -1 if none."""
    need = 10.0 ** (-psnr_db / 10.0)
    hits = np.where(mse_curve <= need)[0]
    return int(hits[0]) if len(hits) else -1


# ---------------------------------------------------------------------------
# Diamond spectrum


def diamond_eigenvalues(alpha: float, K: int) -> np.ndarray:
    """lambda_k = (-1)^(k-1) * 4 sqrt(2) alpha / (pi (2k-1)), k = 1..K."""
    k = np.arange(1, K + 1)
    return (-1.0) ** (k - 1) * 4.0 * math.sqrt(2.0) * alpha / (math.pi * (2 * k - 1))


def diamond_eigenfunction(alpha: float, k: int, s: np.ndarray) -> np.ndarray:
    """Cosine eigenfunction g_k, supported on |s| <= sqrt(2) alpha."""
    half = math.sqrt(2.0) * alpha
    s = np.asarray(s, dtype=float)
    vals = np.cos(math.pi * (2 * k - 1) * s / (2.0 * half)) / math.sqrt(half)
    return np.where(np.abs(s) <= half, vals, 0.0)


@dataclass
class DiamondSpectrum:
    alpha: float
    eigenvalues: np.ndarray  # (K,)
    eigenfunctions: np.ndarray  # (K, n) samples on grid_nodes(n)
    nodes: np.ndarray


def diamond_spectrum(alpha: float, K: int, n: int) -> DiamondSpectrum:
    if K < 1:
        raise StructureError("need at least one eigenpair")
    xs = grid_nodes(n)
    vals = diamond_eigenvalues(alpha, K)
    funcs = np.stack([diamond_eigenfunction(alpha, k, xs) for k in range(1, K + 1)])
    return DiamondSpectrum(alpha, vals, funcs, xs)


# ---------------------------------------------------------------------------
# Power-method factorization stage


@dataclass
class PowerStageResult:
    u: np.ndarray  # final unit-norm iterate (grid inner product)
    factor: np.ndarray  # sqrt(rayleigh) * u
    rayleigh: float
    iterates: list[np.ndarray] = field(default_factory=list)


def power_stage(S: np.ndarray, u0: np.ndarray, steps: int, dx: float | None = None,
                keep_iterates: bool = False) -> PowerStageResult:
    """Power method on a symmetric kernel matrix, in grid quadrature.

    The matrix S represents a kernel on [-1,1]^2: applying it to u means
    (S u) * dx.  The output factor is sqrt(<u, S u>) * u, rejected if the
    Rayleigh quotient is nonpositive.
    """
    S = np.asarray(S, dtype=float)
    if S.shape[0] != S.shape[1]:
        raise StructureError("kernel matrix must be square")
    if steps < 1:
        raise StructureError("need at least one power step")
    if dx is None:
        dx = cell_width(S.shape[0])
    u = np.asarray(u0, dtype=float).copy()
    iterates = []
    for _ in range(steps):
        u = S @ u * dx
        nrm = grid_norm(u, dx)
        if nrm == 0.0:
            raise NumericError("power iterate vanished; initialization orthogonal to range")
        u /= nrm
        if keep_iterates:
            iterates.append(u.copy())
    ray = grid_inner(u, S @ u * dx, dx)
    if ray <= 0.0:
        raise NumericError(f"nonpositive Rayleigh quotient {ray:.3e} at power-stage output")
    return PowerStageResult(u=u, factor=math.sqrt(ray) * u, rayleigh=ray, iterates=iterates)


# ---------------------------------------------------------------------------
# Smoothed alignment objective and its gradient


def gaussian_kernel(sigma: float, dx: float) -> np.ndarray:
    """Discrete Gaussian, truncated at 5 sigma, renormalized to unit mass."""
    if sigma <= 0:
        raise StructureError("sigma must be positive")
    radius = max(1, int(math.ceil(5.0 * sigma / dx)))
    t = np.arange(-radius, radius + 1) * dx
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / (k.sum() * dx)


def smooth_profile(u: np.ndarray, sigma: float, dx: float):
    """Convolve grid samples with the discrete Gaussian.

    Returns (values, x0): the smoothed profile on an extended grid whose
    first node sits at x0 (support grows by the kernel radius).
    """
    k = gaussian_kernel(sigma, dx)
    radius = (len(k) - 1) // 2
    vals = np.convolve(u, k) * dx
    x0 = -1.0 - radius * dx
    return vals, x0


def eval_profile(values: np.ndarray, x0: float, dx: float, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation of an extended profile; zero outside support."""
    g = (np.asarray(coords, dtype=float) - x0) / dx
    i0 = np.floor(g).astype(int)
    w = g - i0
    n = len(values)
    inside = (i0 >= 0) & (i0 <= n - 2)
    i0c = np.clip(i0, 0, n - 2)
    out = values[i0c] * (1.0 - w) + values[i0c + 1] * w
    return np.where(inside, out, 0.0)


def _smoothed_pulse(s: np.ndarray, alpha: float, sigma: float):
    """Closed-form Gaussian smoothing of the indicator of [-alpha, alpha],
    and its derivative."""
    zp = (s + alpha) / sigma
    zm = (s - alpha) / sigma
    cdf = lambda z: 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    pdf = lambda z: np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    g = cdf(zp) - cdf(zm)
    gp = (pdf(zp) - pdf(zm)) / sigma
    return g, gp


@dataclass
class _CurlField:
    """Rotational component of the smoothed template's gradient field,
    restricted to the band where it is nonzero."""

    y1: np.ndarray
    y2: np.ndarray
    values: np.ndarray
    dx: float


def _curl_field(n: int, alpha: float, sigma: float, full: bool = False) -> _CurlField:
    xs = grid_nodes(n)
    dx = cell_width(n)
    g, gp = _smoothed_pulse(xs, alpha, sigma)
    # C(y) = <grad (phi * template)(y), R_{pi/2} y> with R_{pi/2} y = (-y2, y1)
    C = gp[:, None] * g[None, :] * (-xs[None, :]) + g[:, None] * gp[None, :] * xs[:, None]
    Y1, Y2 = np.meshgrid(xs, xs, indexing="ij")
    if full:
        mask = np.ones_like(C, dtype=bool)
    else:
        band = np.abs(np.abs(xs) - alpha) <= 6.0 * sigma + 2.0 * dx
        mask = band[:, None] | band[None, :]
    return _CurlField(Y1[mask], Y2[mask], C[mask], dx)


def alignment_gradient(nu: float, u: np.ndarray, sigma: float, n: int,
                       alpha: float = ROOT_HALF, nu_true: float = math.pi / 4.0) -> float:
    """Gradient of the smoothed alignment objective with respect to nu.

    Evaluates -<smoothed(u u^T) in the template frame, curl field> by grid
    quadrature; the Gaussian smoothing of u is a discrete convolution.
    """
    cf = _curl_field(n, alpha, sigma)
    prof, x0 = smooth_profile(np.asarray(u, dtype=float), sigma, cf.dx)
    return _gradient_from_curl(cf, prof, x0, nu, nu_true)


def _gradient_from_curl(cf: _CurlField, prof: np.ndarray, x0: float,
                        nu: float, nu_true: float) -> float:
    delta = nu_true - nu
    cs, sn = math.cos(delta), math.sin(delta)
    r1 = cs * cf.y1 - sn * cf.y2
    r2 = sn * cf.y1 + cs * cf.y2
    m = eval_profile(prof, x0, cf.dx, r1) * eval_profile(prof, x0, cf.dx, r2)
    return -float(np.sum(m * cf.values)) * cf.dx * cf.dx


def alignment_loss(nu: float, u: np.ndarray, sigma: float, n: int,
                   alpha: float = ROOT_HALF, nu_true: float = math.pi / 4.0) -> float:
    """Smoothed squared-error alignment objective (finite-difference oracle
    for `alignment_gradient`)."""
    xs = grid_nodes(n)
    dx = cell_width(n)
    X1, X2 = np.meshgrid(xs, xs, indexing="ij")
    d = nu - nu_true
    cs, sn = math.cos(d), math.sin(d)
    r1 = cs * X1 - sn * X2
    r2 = sn * X1 + cs * X2
    g1, _ = _smoothed_pulse(r1.ravel(), alpha, sigma)
    g2, _ = _smoothed_pulse(r2.ravel(), alpha, sigma)
    target = (g1 * g2).reshape(n, n)
    prof, x0 = smooth_profile(np.asarray(u, dtype=float), sigma, dx)
    pu = eval_profile(prof, x0, dx, xs)
    model = np.outer(pu, pu)
    resid = target - model
    return 0.5 * float(np.sum(resid * resid)) * dx * dx


def folded_angle_error(nu_hat: float, nu_true: float) -> float:
    """Distance to the nearest symmetry copy of nu_true (period pi/2)."""
    e = abs(nu_hat - nu_true) % (math.pi / 2.0)
    return min(e, math.pi / 2.0 - e)


# ---------------------------------------------------------------------------
# Three-stage alternating recovery


@dataclass
class AlternatingResult:
    nu0: float
    nu_hat: float
    u_hat: np.ndarray
    u_rough: np.ndarray
    nu_trace: np.ndarray
    folded_error: float
    u_error: float


@dataclass
class ModelProblem:
    """Shared context for alternating-recovery runs at a fixed resolution.

    Stage one (rough factorization) and the frozen-factor alignment
    gradient do not depend on the random initialization, so sweeps across
    seeds reuse them.
    """

    n: int = 512
    sigma: float = 1e-2
    alpha: float = ROOT_HALF
    nu_true: float = math.pi / 4.0

    def __post_init__(self):
        self.dx = cell_width(self.n)
        self.xs = grid_nodes(self.n)
        self.u_natural = (np.abs(self.xs) <= self.alpha).astype(float)
        self._rough_cache: dict[int, PowerStageResult] = {}
        self._table = None

    def observation_kernel(self, nu: float) -> np.ndarray:
        """Directly-sampled factorization target in the model frame at
        angle nu (the template rotated by nu_true - nu), symmetrized."""
        K = rotated_square(self.n, self.alpha, self.nu_true - nu)
        return 0.5 * (K + K.T)

    def rough_stage(self, t_rough: int, keep_iterates: bool = False) -> PowerStageResult:
        if not keep_iterates and t_rough in self._rough_cache:
            return self._rough_cache[t_rough]
        u0 = np.ones(self.n)
        res = power_stage(self.observation_kernel(0.0), u0, t_rough, self.dx,
                          keep_iterates=keep_iterates)
        if not keep_iterates:
            self._rough_cache[t_rough] = res
        return res

    def gradient_fn(self, u: np.ndarray):
        """Exact per-call alignment gradient with `u` frozen."""
        cf = _curl_field(self.n, self.alpha, self.sigma)
        prof, x0 = smooth_profile(u, self.sigma, self.dx)
        return lambda nu: _gradient_from_curl(cf, prof, x0, nu, self.nu_true)

    def gradient_table(self, u: np.ndarray, size: int = 2048):
        """Tabulated gradient over one pi/2 period (it is pi/2-periodic);
        returns (thetas, values) where theta = nu - nu_true mod pi/2."""
        cf = _curl_field(self.n, self.alpha, self.sigma)
        prof, x0 = smooth_profile(u, self.sigma, self.dx)
        thetas = np.linspace(0.0, math.pi / 2.0, size, endpoint=False)
        vals = np.array(
            [_gradient_from_curl(cf, prof, x0, self.nu_true + th, self.nu_true)
             for th in thetas]
        )
        return thetas, vals


def _pad_period(thetas: np.ndarray, vals: np.ndarray):
    period = math.pi / 2.0
    return np.concatenate([thetas, [period]]), np.concatenate([vals, [vals[0]]])


def _interp_periodic(thetas: np.ndarray, vals: np.ndarray, x):
    xp, fp = _pad_period(thetas, vals)
    return np.interp(np.mod(x, math.pi / 2.0), xp, fp)


def alternating_tilt(
    n: int = 512,
    sigma: float = 1e-2,
    beta: float = 0.05,
    t_rough: int = 40,
    t_nu: int = 2000,
    t_u: int = 16,
    seed: int = 0,
    alpha: float = ROOT_HALF,
    nu_true: float = math.pi / 4.0,
    nu0: float | None = None,
    exact_gradient: bool = False,
    table_size: int = 2048,
    problem: ModelProblem | None = None,
) -> AlternatingResult:
    """Three-stage recovery: rough power method, gradient descent on the
    rotation with the rough factor frozen, then a refined power method at
    the estimated angle.

    By default the frozen-factor gradient is tabulated over one period and
    linearly interpolated during descent (it is a fixed scalar function of
    the angle); `exact_gradient=True` evaluates it per step instead.
    """
    if sigma <= 0 or beta <= 0:
        raise StructureError("sigma and beta must be positive")
    if problem is None:
        problem = ModelProblem(n=n, sigma=sigma, alpha=alpha, nu_true=nu_true)
    rough = problem.rough_stage(t_rough)
    u_rough = rough.factor

    if nu0 is None:
        nu0 = float(np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi))
    nu = float(nu0)
    trace = np.empty(t_nu + 1)
    trace[0] = nu
    if exact_gradient:
        gfun = problem.gradient_fn(u_rough)
        for k in range(t_nu):
            nu -= beta * gfun(nu)
            trace[k + 1] = nu
    else:
        if problem._table is None or problem._table[2] != table_size:
            th, vals = problem.gradient_table(u_rough, table_size)
            problem._table = (th, vals, table_size)
        th, vals, _ = problem._table
        xp, fp = _pad_period(th, vals)
        period = math.pi / 2.0
        for k in range(t_nu):
            nu -= beta * float(np.interp((nu - problem.nu_true) % period, xp, fp))
            trace[k + 1] = nu

    refined = power_stage(problem.observation_kernel(nu), u_rough, t_u, problem.dx)
    u_hat = refined.factor
    u_err = grid_norm(u_hat - problem.u_natural, problem.dx)
    return AlternatingResult(
        nu0=float(nu0),
        nu_hat=nu,
        u_hat=u_hat,
        u_rough=u_rough,
        nu_trace=trace,
        folded_error=folded_angle_error(nu, problem.nu_true),
        u_error=u_err,
    )


def alternating_sweep(
    seeds,
    n: int = 512,
    sigma: float = 1e-2,
    beta: float = 0.05,
    t_rough: int = 40,
    t_nu: int = 2000,
    t_u: int = 16,
    angle_tol: float = 0.01,
    u_tol: float = 0.2,
    table_size: int = 2048,
) -> list[AlternatingResult]:
    """Monte-Carlo sweep over seeds, amortizing the seed-independent stages.

    Success for a seed means folded angle error <= angle_tol and grid-norm
    factor error <= u_tol; the caller judges the success fraction.
    """
    problem = ModelProblem(n=n, sigma=sigma)
    results = []
    for seed in seeds:
        results.append(
            alternating_tilt(
                n=n, sigma=sigma, beta=beta, t_rough=t_rough, t_nu=t_nu, t_u=t_u,
                seed=seed, table_size=table_size, problem=problem,
            )
        )
    return results


def success_fraction(results, angle_tol: float = 0.01, u_tol: float = 0.2) -> float:
    ok = sum(1 for r in results if r.folded_error <= angle_tol and r.u_error <= u_tol)
    return ok / len(results)
