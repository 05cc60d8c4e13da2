"""Seeded, bit-reproducible test paths.

Random numbers come from a counter-based splitmix64 generator so that other
implementations can reproduce every path exactly:

    z = seed + i * 0x9E3779B97F4A7C15                  (mod 2^64, i = 1, 2, ...)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniforms are ((z >> 11) + 0.5) * 2^-53 in ]0, 1[, Gaussians come from the
Box-Muller transform of consecutive uniform pairs (cosine branch first), and
independent streams use the seed ``mix(seed ^ (stream * GOLDEN))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.linalg import cholesky

from .paths import CadlagPath

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1

# stream identifiers
_SIGNS, _PERM, _COLUMNS, _GAUSS, _JUMPS = 1, 2, 3, 4, 5


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
        return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, n: int, start: int = 1) -> np.ndarray:
    """Outputs number start, ..., start + n - 1 of the counter generator."""
    i = np.arange(start, start + n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + i * GOLDEN
    return _mix(z)


def stream_seed(seed: int, stream: int) -> int:
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) ^ (np.uint64(stream) * GOLDEN)
    return int(_mix(np.array([z], dtype=np.uint64))[0])


def uniforms(seed: int, n: int) -> np.ndarray:
    z = splitmix64(seed, n)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def gaussians(seed: int, n: int) -> np.ndarray:
    m = (n + 1) // 2
    u = uniforms(seed, 2 * m)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


def signs(seed: int, n: int) -> np.ndarray:
    z = splitmix64(seed, n)
    return np.where((z >> np.uint64(63)) == 1, -1.0, 1.0)


# -- recipes --------------------------------------------------------------------

KINDS = ("ScaledRandomWalk", "FBM", "StepFV", "SmoothFV", "JumpDiffusion")


@dataclass(frozen=True)
class PathRecipe:
    """Declarative description of a generated path.

    Parameters by kind:

    * ScaledRandomWalk: ``level``, ``sigma`` (d x k, default identity)
    * FBM: ``hurst``, ``level``, ``dim``, optional ``method`` ("circulant" or "cholesky")
    * StepFV: ``jumps`` (list of (time, vector)), optional ``start``
    * SmoothFV: ``level``, ``poly`` (d x p coefficients of t^0..t^{p-1}),
      ``sine`` (list of (amplitude vector, frequency, phase))
    * JumpDiffusion: the walk parameters plus ``jumps`` and optional ``start``
    """

    kind: str
    seed: int = 0
    horizon: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown recipe kind {self.kind!r}; expected one of {KINDS}")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def get(self, key: str, default: Any = None) -> Any:
        return self.params.get(key, default)

    @property
    def dim(self) -> int:
        if self.kind in ("ScaledRandomWalk", "JumpDiffusion"):
            return _sigma(self).shape[0]
        if self.kind == "FBM":
            return int(self.get("dim", 1))
        if self.kind == "StepFV":
            jumps = self.get("jumps", [])
            if jumps:
                return len(np.atleast_1d(jumps[0][1]))
            return len(np.atleast_1d(self.get("start", [0.0])))
        poly = self.get("poly")
        if poly is not None:
            return np.atleast_2d(poly).shape[0]
        return len(np.atleast_1d(self.get("sine")[0][0]))


def _sigma(recipe: PathRecipe) -> np.ndarray:
    sigma = recipe.get("sigma")
    if sigma is None:
        return np.eye(int(recipe.get("dim", 1)))
    return np.atleast_2d(np.asarray(sigma, dtype=float))


def _level(recipe: PathRecipe) -> int:
    level = recipe.get("level")
    if level is None or int(level) < 0 or int(level) > 24:
        raise ValueError(f"{recipe.kind} needs an integer level in [0, 24]")
    return int(level)


def _grid(horizon: float, level: int) -> np.ndarray:
    return np.arange(2 ** level + 1, dtype=float) * (horizon / 2 ** level)


def sylvester_hadamard(p: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < p:
        h = np.block([[h, h], [h, -h]])
    return h


def walk_signs(seed: int, n: int, k: int) -> np.ndarray:
    """n sign vectors in {+-1}^k whose outer products sum to n * I.

    Steps come in blocks of P = 2^p >= k rows of a Sylvester Hadamard
    matrix: within a block the chosen columns are orthogonal, so every
    off-diagonal entry of the summed outer products cancels.  Each block
    uses a random row order, random row signs and a random choice and sign
    of columns (orders come from sorting generator outputs).  The number of
    steps must be a multiple of P.
    """
    P = 1
    while P < k:
        P *= 2
    if n % P:
        raise ValueError(f"number of steps {n} is not a multiple of the block size {P}")
    blocks = n // P
    row_signs = signs(stream_seed(seed, _SIGNS), n).reshape(blocks, P)
    if P == 1:
        return row_signs.reshape(n, 1)
    H = sylvester_hadamard(P)
    row_keys = splitmix64(stream_seed(seed, _PERM), n).reshape(blocks, P)
    col_keys = splitmix64(stream_seed(seed, _COLUMNS), n).reshape(blocks, P)
    rows = np.argsort(row_keys, axis=1, kind="stable")
    cols = np.argsort(col_keys, axis=1, kind="stable")[:, :k]
    col_signs = signs(stream_seed(seed, _COLUMNS + 16), blocks * k).reshape(blocks, 1, k)
    out = H[rows[:, :, None], cols[:, None, :]] * col_signs * row_signs[:, :, None]
    return out.reshape(n, k)


def _walk(recipe: PathRecipe) -> tuple[np.ndarray, np.ndarray]:
    level = _level(recipe)
    sigma = _sigma(recipe)
    n = 2 ** level
    h = recipe.horizon / n
    eps = walk_signs(recipe.seed, n, sigma.shape[1])
    inc = (eps @ sigma.T) * np.sqrt(h)
    x = np.zeros((n + 1, sigma.shape[0]))
    np.cumsum(inc, axis=0, out=x[1:])
    start = recipe.get("start")
    if start is not None:
        x += np.asarray(start, dtype=float)
    return _grid(recipe.horizon, level), x


def fgn_covariance(hurst: float, n: int) -> np.ndarray:
    """Autocovariance of unit-step fractional Gaussian noise at lags 0..n."""
    k = np.arange(n + 1, dtype=float)
    H2 = 2.0 * hurst
    return 0.5 * (np.abs(k + 1) ** H2 - 2 * k ** H2 + np.abs(k - 1) ** H2)


def _fgn(hurst: float, n: int, seed: int, method: str) -> np.ndarray:
    gamma = fgn_covariance(hurst, n)
    if method == "circulant":
        row = np.concatenate([gamma[:n + 1], gamma[n - 1:0:-1]])
        lam = np.fft.fft(row).real
        if np.min(lam) < -1e-10 * np.max(lam):
            if n > 2 ** 12:
                raise ValueError("circulant embedding is not nonnegative definite")
            method = "cholesky"
        else:
            m = len(row)
            g = gaussians(seed, 2 * m)
            w = (g[0::2] + 1j * g[1::2]) * np.sqrt(np.maximum(lam, 0.0) / m)
            return np.fft.fft(w).real[:n]
    if method != "cholesky":
        raise ValueError(f"unknown FBM method {method!r}")
    idx = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    L = cholesky(gamma[idx], lower=True)
    return L @ gaussians(seed, n)


def _fbm(recipe: PathRecipe) -> tuple[np.ndarray, np.ndarray]:
    hurst = float(recipe.get("hurst", 0.5))
    if not 0.0 < hurst < 1.0:
        raise ValueError("FBM needs a Hurst index in ]0, 1[")
    level = _level(recipe)
    d = int(recipe.get("dim", 1))
    n = 2 ** level
    h = recipe.horizon / n
    method = recipe.get("method", "circulant")
    x = np.zeros((n + 1, d))
    for j in range(d):
        noise = _fgn(hurst, n, stream_seed(recipe.seed, _GAUSS + 16 * j), method)
        x[1:, j] = np.cumsum(noise) * h ** hurst
    return _grid(recipe.horizon, level), x


def _jumps(recipe: PathRecipe, d: int) -> tuple[np.ndarray, np.ndarray]:
    jumps = recipe.get("jumps", [])
    if not jumps:
        return np.zeros(0), np.zeros((0, d))
    times = np.array([float(j[0]) for j in jumps])
    sizes = np.array([np.atleast_1d(np.asarray(j[1], dtype=float)) for j in jumps])
    if sizes.shape[1] != d:
        raise ValueError("jump vectors must match the path dimension")
    return times, sizes


def _smooth(recipe: PathRecipe) -> tuple[np.ndarray, np.ndarray]:
    level = _level(recipe)
    t = _grid(recipe.horizon, level)
    d = recipe.dim
    x = np.zeros((len(t), d))
    poly = recipe.get("poly")
    if poly is not None:
        c = np.atleast_2d(np.asarray(poly, dtype=float))
        for j in range(d):
            x[:, j] += np.polynomial.polynomial.polyval(t, c[j])
    for amp, freq, phase in recipe.get("sine", []) or []:
        x += np.outer(np.sin(2 * np.pi * float(freq) * t + float(phase)),
                      np.atleast_1d(np.asarray(amp, dtype=float)))
    return t, x


def generate(recipe: PathRecipe) -> CadlagPath:
    """Build the path described by ``recipe``; identical recipes give identical paths."""
    kind = recipe.kind
    if kind == "ScaledRandomWalk":
        grid, x = _walk(recipe)
        return CadlagPath(grid, x)
    if kind == "FBM":
        grid, x = _fbm(recipe)
        return CadlagPath(grid, x)
    if kind == "SmoothFV":
        grid, x = _smooth(recipe)
        return CadlagPath(grid, x)
    if kind == "StepFV":
        d = recipe.dim
        jt, js = _jumps(recipe, d)
        start = np.asarray(recipe.get("start", np.zeros(d)), dtype=float).reshape(d)
        return CadlagPath([0.0, recipe.horizon], np.vstack([start, start]), jt, js)
    grid, x = _walk(recipe)
    jt, js = _jumps(recipe, x.shape[1])
    return CadlagPath(grid, x, jt, js)


@dataclass(frozen=True)
class ExpectedQV:
    """Closed-form QV of a recipe: tensor QV at t is t * rate + sum of jump outer products."""

    rate: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    matched_levels: tuple | None = None  # levels at which the value is exact

    def tensor(self, t: float) -> np.ndarray:
        sel = self.jump_times <= t
        j = self.jump_sizes[sel]
        return t * self.rate + j.T @ j

    def scalar(self, t: float) -> float:
        return float(np.trace(self.tensor(t)))


def expected_qv(recipe: PathRecipe) -> ExpectedQV | None:
    """Registered closed forms; None when the recipe has no known QV."""
    d = recipe.dim
    zero = np.zeros((d, d))
    if recipe.kind == "StepFV":
        jt, js = _jumps(recipe, d)
        return ExpectedQV(zero, jt, js)
    if recipe.kind == "SmoothFV":
        return ExpectedQV(zero, np.zeros(0), np.zeros((0, d)))
    if recipe.kind == "FBM":
        if float(recipe.get("hurst", 0.5)) > 0.5:
            return ExpectedQV(zero, np.zeros(0), np.zeros((0, d)))
        return None
    sigma = _sigma(recipe)
    jt, js = _jumps(recipe, d) if recipe.kind == "JumpDiffusion" else (np.zeros(0), np.zeros((0, d)))
    return ExpectedQV(sigma @ sigma.T, jt, js, (_level(recipe),))
