"""Càdlàg paths in R^d with exact jump bookkeeping.

A path is stored as a continuous part sampled on a grid plus an explicit
list of jumps.  Jump sizes, left limits and jump truncations are therefore
exact for the representation and are never inferred from samples.
"""

from __future__ import annotations

import enum
import io
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class Norm(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    L1 = "l1"
    LINF = "linf"


def as_norm(norm: Norm | str) -> Norm:
    return norm if isinstance(norm, Norm) else Norm(str(norm).lower())


def vnorm(x, norm: Norm | str = Norm.EUCLIDEAN) -> np.ndarray:
    """Norm along the last axis."""
    x = np.asarray(x, dtype=float)
    norm = as_norm(norm)
    if norm is Norm.EUCLIDEAN:
        return np.sqrt(np.sum(x * x, axis=-1))
    if norm is Norm.L1:
        return np.sum(np.abs(x), axis=-1)
    return np.max(np.abs(x), axis=-1)


def _sign_vectors(d: int) -> np.ndarray:
    # L1 diameter: max over s in {±1}^d of ptp(<s, x>); first sign fixed.
    if d == 1:
        return np.ones((1, 1))
    grid = np.array(np.meshgrid(*([[1.0, -1.0]] * (d - 1)), indexing="ij"))
    rest = grid.reshape(d - 1, -1).T
    return np.hstack([np.ones((rest.shape[0], 1)), rest])


def diameter(points: np.ndarray, norm: Norm | str = Norm.EUCLIDEAN) -> float:
    """Largest pairwise distance of a finite point set in R^d."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if len(pts) < 2:
        return 0.0
    norm = as_norm(norm)
    d = pts.shape[1]
    if d == 1 or norm is Norm.LINF:
        return float(np.max(np.ptp(pts, axis=0)))
    if norm is Norm.L1:
        proj = pts @ _sign_vectors(d).T
        return float(np.max(np.ptp(proj, axis=0)))
    if len(pts) > 1024:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except Exception:  # degenerate hull (e.g. collinear points)
            pass
    if len(pts) <= 4096:
        return float(np.max(pdist(pts)))
    best = 0.0
    for i in range(0, len(pts), 1024):
        block = pts[i:i + 1024]
        diff = block[:, None, :] - pts[None, :, :]
        best = max(best, float(np.sqrt(np.max(np.sum(diff * diff, axis=-1)))))
    return best


class CadlagPath:
    """A right-continuous path with left limits on [0, T].

    Parameters
    ----------
    grid : array (M+1,)
        Strictly increasing sample times, ``grid[0] == 0``, ``grid[-1] == T``.
    samples : array (M+1, d)
        Values of the continuous part at the grid times (for
        ``interp="constant"`` the values of the step function itself).
    jump_times, jump_sizes : arrays (K,), (K, d)
        Explicit jumps, times in ]0, T] and distinct.  They need not lie on
        the grid.
    interp : {"linear", "constant"}
        Interpolation of the sampled part between grid times.  A constant
        (right-continuous step) sampled part is folded into the jump list,
        so every computation sees a piecewise-linear continuous part.
    """

    def __init__(self, grid, samples, jump_times=None, jump_sizes=None,
                 interp: str = "linear"):
        grid = np.array(grid, dtype=float)
        samples = np.array(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if grid.ndim != 1 or len(grid) < 2:
            raise ValueError("grid needs at least two times")
        if grid[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if samples.shape[0] != len(grid):
            raise ValueError("samples must have one row per grid time")
        if interp not in ("linear", "constant"):
            raise ValueError(f"unknown interpolation {interp!r}")
        d = samples.shape[1]
        if jump_times is None or len(jump_times) == 0:
            jt = np.zeros(0)
            js = np.zeros((0, d))
        else:
            jt = np.array(jump_times, dtype=float).reshape(-1)
            js = np.array(jump_sizes, dtype=float).reshape(len(jt), -1)
            if js.shape[1] != d:
                raise ValueError("jump sizes must match the path dimension")
            order = np.argsort(jt, kind="stable")
            jt, js = jt[order], js[order]
            if np.any(np.diff(jt) <= 0):
                raise ValueError("jump times must be distinct")
            if jt[0] <= 0.0 or jt[-1] > grid[-1]:
                raise ValueError("jump times must lie in ]0, T]")
        for a in (grid, samples, jt, js):
            a.setflags(write=False)
        self.grid = grid
        self.samples = samples
        self.interp = interp
        self.explicit_jump_times = jt
        self.explicit_jump_sizes = js

    # -- representation -------------------------------------------------
    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @cached_property
    def _linear_samples(self) -> np.ndarray:
        if self.interp == "linear":
            return self.samples
        return np.broadcast_to(self.samples[0], self.samples.shape)

    @cached_property
    def _jumps(self) -> tuple[np.ndarray, np.ndarray]:
        if self.interp == "linear":
            jt, js = self.explicit_jump_times, self.explicit_jump_sizes
        else:
            steps = np.diff(self.samples, axis=0)
            times = np.concatenate([self.grid[1:], self.explicit_jump_times])
            sizes = np.concatenate([steps, self.explicit_jump_sizes])
            uniq, inv = np.unique(times, return_inverse=True)
            merged = np.zeros((len(uniq), self.dim))
            np.add.at(merged, inv, sizes)
            keep = np.any(merged != 0.0, axis=1)
            jt, js = uniq[keep], merged[keep]
        jt = np.array(jt)
        js = np.array(js)
        keep = np.any(js != 0.0, axis=1) if len(jt) else np.zeros(0, bool)
        jt, js = jt[keep], js[keep]
        jt.setflags(write=False)
        js.setflags(write=False)
        return jt, js

    @property
    def jump_times(self) -> np.ndarray:
        """Times of the nonzero jumps, sorted."""
        return self._jumps[0]

    @property
    def jump_sizes(self) -> np.ndarray:
        return self._jumps[1]

    @cached_property
    def _cum_jumps(self) -> np.ndarray:
        js = self.jump_sizes
        out = np.zeros((len(js) + 1, self.dim))
        np.cumsum(js, axis=0, out=out[1:])
        return out

    @cached_property
    def is_continuous(self) -> bool:
        return len(self.jump_times) == 0

    # -- evaluation -----------------------------------------------------
    def _check_times(self, t, allow_zero=True) -> np.ndarray:
        arr = np.asarray(t, dtype=float)
        lo_bad = arr < 0.0 if allow_zero else arr <= 0.0
        if np.any(lo_bad) or np.any(arr > self.horizon):
            raise DomainError(f"time outside the domain of the path: {t}")
        return arr

    def continuous_part(self, t) -> np.ndarray:
        arr = self._check_times(t)
        flat = np.atleast_1d(arr)
        ls = self._linear_samples
        out = np.empty((len(flat), self.dim))
        for k in range(self.dim):
            out[:, k] = np.interp(flat, self.grid, ls[:, k])
        return out[0] if arr.ndim == 0 else out

    def jump_sum(self, t) -> np.ndarray:
        """Sum of the jumps at times s <= t."""
        arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, arr, side="right")
        return self._cum_jumps[idx]

    def value(self, t) -> np.ndarray:
        """Right-continuous value X_t; vectorised over ``t``."""
        return self.continuous_part(t) + self.jump_sum(self._check_times(t))

    __call__ = value

    def jump_at(self, t) -> np.ndarray:
        """Jump X_t - X_{t-} (zero away from the jump times)."""
        arr = np.asarray(t, dtype=float)
        flat = np.atleast_1d(arr)
        out = np.zeros((len(flat), self.dim))
        jt = self.jump_times
        if len(jt):
            idx = np.minimum(np.searchsorted(jt, flat), len(jt) - 1)
            hit = jt[idx] == flat
            out[hit] = self.jump_sizes[idx[hit]]
        return out[0] if arr.ndim == 0 else out

    def left_limit(self, t) -> np.ndarray:
        """X_{t-}; undefined at t = 0."""
        arr = self._check_times(t, allow_zero=False)
        return self.continuous_part(arr) + self.jump_sum(arr) - self.jump_at(arr)

    def breakpoints(self, a: float = 0.0, b: float | None = None) -> np.ndarray:
        """Grid and jump times inside [a, b]."""
        b = self.horizon if b is None else b
        pts = np.union1d(self.grid, self.jump_times)
        return pts[(pts >= a) & (pts <= b)]

    def jump_set(self, eps: float, norm: Norm | str = Norm.EUCLIDEAN) -> "JumpSet":
        sizes = vnorm(self.jump_sizes, norm)
        return JumpSet(float(eps), self.jump_times[sizes > eps])

    def __repr__(self) -> str:
        return (f"CadlagPath(dim={self.dim}, T={self.horizon}, grid={len(self.grid)}, "
                f"jumps={len(self.jump_times)}, interp={self.interp!r})")

    # -- CSV ------------------------------------------------------------
    def to_csv(self, target: str | Path | io.TextIOBase | None = None) -> str:
        """Write ``t,x1..xd,jump1..jumpd`` rows with 17 significant digits.

        Jump times off the grid get a row whose sample columns are ``nan``.
        """
        d = self.dim
        fmt = "{:.17g}".format
        lines = [f"# interp={self.interp}",
                 ",".join(["t"] + [f"x{i + 1}" for i in range(d)]
                          + [f"jump{i + 1}" for i in range(d)])]
        jt, js = self.explicit_jump_times, self.explicit_jump_sizes
        times = np.union1d(self.grid, jt)
        gi = np.searchsorted(self.grid, times)
        ji = np.searchsorted(jt, times)
        for k, t in enumerate(times):
            on_grid = gi[k] < len(self.grid) and self.grid[gi[k]] == t
            is_jump = ji[k] < len(jt) and jt[ji[k]] == t
            xs = self.samples[gi[k]] if on_grid else [np.nan] * d
            jv = js[ji[k]] if is_jump else np.zeros(d)
            lines.append(",".join([fmt(t)] + [fmt(v) for v in xs] + [fmt(v) for v in jv]))
        text = "\n".join(lines) + "\n"
        if isinstance(target, (str, Path)):
            Path(target).write_text(text, encoding="utf-8")
        elif target is not None:
            target.write(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path | io.TextIOBase) -> "CadlagPath":
        if isinstance(source, (str, Path)) and Path(source).exists():
            text = Path(source).read_text(encoding="utf-8")
        elif isinstance(source, str):
            text = source
        else:
            text = source.read()
        interp = "linear"
        rows = []
        header = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("interp="):
                    interp = {"linear": "linear", "constant": "constant"}[body.split("=", 1)[1].strip()]
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(v) for v in line.split(",")])
        if header is None or header[0] != "t" or (len(header) - 1) % 2:
            raise ValueError("expected header t,x1..xd,jump1..jumpd")
        d = (len(header) - 1) // 2
        data = np.array(rows, dtype=float).reshape(-1, 2 * d + 1)
        on_grid = ~np.isnan(data[:, 1])
        is_jump = np.any(data[:, 1 + d:] != 0.0, axis=1)
        return cls(data[on_grid, 0], data[on_grid, 1:1 + d],
                   data[is_jump, 0], data[is_jump, 1 + d:], interp=interp)


class JumpSet:
    """Jump times of a path whose jump norm exceeds a threshold."""

    def __init__(self, threshold: float, times: np.ndarray):
        self.threshold = threshold
        self.times = np.asarray(times, dtype=float)

    def __len__(self) -> int:
        return len(self.times)

    def __repr__(self) -> str:
        return f"JumpSet(threshold={self.threshold}, times={self.times.tolist()})"


FVPath = CadlagPath  # finite-variation paths share the representation


def constant_path(value, horizon: float) -> CadlagPath:
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return CadlagPath([0.0, horizon], np.vstack([v, v]))


def step_path(horizon: float, jumps: Iterable[tuple[float, Sequence[float]]],
              start=None) -> CadlagPath:
    """Pure-jump path with the given (time, size) list."""
    jumps = list(jumps)
    if not jumps and start is None:
        raise ValueError("need a start value or at least one jump")
    d = len(np.atleast_1d(jumps[0][1])) if jumps else len(np.atleast_1d(start))
    x0 = np.zeros(d) if start is None else np.atleast_1d(np.asarray(start, float))
    times = [j[0] for j in jumps]
    sizes = [np.atleast_1d(np.asarray(j[1], float)) for j in jumps]
    return CadlagPath([0.0, horizon], np.vstack([x0, x0]), times,
                      np.array(sizes).reshape(len(times), d))


def union_grid(paths: Sequence[CadlagPath], extra=()) -> np.ndarray:
    pts = np.asarray(extra, dtype=float).reshape(-1)
    for p in paths:
        pts = np.union1d(pts, p.grid)
    return np.union1d(pts, [0.0])


def _resampled(path: CadlagPath, grid: np.ndarray) -> np.ndarray:
    return path.continuous_part(grid)


def stack(*paths: CadlagPath) -> CadlagPath:
    """Concatenate coordinates, e.g. (A, X) as one path in R^{p+d}."""
    if not paths:
        raise ValueError("nothing to stack")
    T = paths[0].horizon
    if any(p.horizon != T for p in paths):
        raise ValueError("paths must share the horizon")
    grid = union_grid(paths)
    samples = np.hstack([_resampled(p, grid) for p in paths])
    jt = np.zeros(0)
    for p in paths:
        jt = np.union1d(jt, p.jump_times)
    js = np.hstack([p.jump_at(jt) if len(jt) else np.zeros((0, p.dim)) for p in paths])
    return CadlagPath(grid, samples, jt, js)


def linear_map(path: CadlagPath, matrix) -> CadlagPath:
    """The path t -> M X_t."""
    M = np.atleast_2d(np.asarray(matrix, dtype=float))
    if M.shape[1] != path.dim:
        raise ValueError(f"matrix has {M.shape[1]} columns, path has dimension {path.dim}")
    return CadlagPath(path.grid, path._linear_samples @ M.T, path.jump_times,
                      path.jump_sizes @ M.T)


def add(x: CadlagPath, y: CadlagPath, scale_y: float = 1.0) -> CadlagPath:
    """The path X + c Y."""
    if x.dim != y.dim or x.horizon != y.horizon:
        raise ValueError("paths must share dimension and horizon")
    joint = stack(x, y)
    d = x.dim
    return CadlagPath(joint.grid, joint.samples[:, :d] + scale_y * joint.samples[:, d:],
                      joint.jump_times, joint.jump_sizes[:, :d] + scale_y * joint.jump_sizes[:, d:])


# -- path functionals ------------------------------------------------------

def evaluate(path: CadlagPath, t) -> np.ndarray:
    return path.value(t)


def left_limit(path: CadlagPath, t) -> np.ndarray:
    return path.left_limit(t)


def truncate_jumps(path: CadlagPath, eps: float,
                   norm: Norm | str = Norm.EUCLIDEAN) -> tuple[CadlagPath, CadlagPath]:
    """Split into the big-jump path J_eps(X) and the residual X - J_eps(X)."""
    if eps < 0:
        raise DomainError("threshold must be nonnegative")
    big = vnorm(path.jump_sizes, norm) > eps
    zero = np.zeros((2, path.dim))
    J = CadlagPath([0.0, path.horizon], zero, path.jump_times[big], path.jump_sizes[big])
    residual = CadlagPath(path.grid, path._linear_samples, path.jump_times[~big],
                          path.jump_sizes[~big])
    return J, residual


class _VertexTable:
    """Values X(tau-) and X(tau) at every breakpoint tau, interleaved.

    For a piecewise-linear path the supremum of pairwise distances over an
    interval is attained among these vertices, so oscillations reduce to
    diameters of contiguous slices of the table.
    """

    def __init__(self, path: CadlagPath, extra_times=()):
        extra = np.asarray(extra_times, dtype=float).reshape(-1)
        times = np.union1d(path.breakpoints(), extra)
        right = path.value(times)
        left = right - path.jump_at(times)
        self.times = times
        w = np.empty((2 * len(times), path.dim))
        w[0::2] = left
        w[1::2] = right
        self.w = w

    def index(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, t)
        if np.any(self.times[np.minimum(idx, len(self.times) - 1)] != t):
            raise ValueError("time is not a breakpoint of the table")
        return idx

    def slice_bounds(self, a, b, closed_right) -> tuple[np.ndarray, np.ndarray]:
        """Row bounds [lo, hi) of the vertices of [a, b] or [a, b[."""
        ia, ib = self.index(a), self.index(b)
        lo = 2 * ia + 1
        hi = 2 * ib + 1 + np.asarray(closed_right, dtype=int)
        return lo, np.maximum(hi, lo)

    def diameters(self, lo, hi, norm: Norm) -> np.ndarray:
        lo = np.asarray(lo)
        hi = np.asarray(hi)
        out = np.zeros(len(lo))
        n = hi - lo
        live = n >= 2
        if not np.any(live):
            return out
        w = self.w
        d = w.shape[1]
        if d == 1 or norm is not Norm.EUCLIDEAN:
            if norm is Norm.L1 and d > 1:
                proj = w @ _sign_vectors(d).T
            else:
                proj = w
            l, h = lo[live], hi[live]
            mx = _slice_reduce(np.maximum, proj, l, h)
            mn = _slice_reduce(np.minimum, proj, l, h)
            out[live] = np.max(mx - mn, axis=1)
            return out
        two = live & (n == 2)
        if np.any(two):
            out[two] = vnorm(w[lo[two] + 1] - w[lo[two]])
        # small windows: batched pairwise distances, grouped by window size
        small = live & (n > 2) & (n <= 256)
        for m in np.unique(n[small]):
            ks = np.nonzero(small & (n == m))[0]
            chunk = max(1, (1 << 22) // (m * m))
            for c in range(0, len(ks), chunk):
                kk = ks[c:c + chunk]
                blk = w[lo[kk][:, None] + np.arange(m)]
                blk = blk - blk[:, :1]  # centre to limit cancellation
                sq = np.sum(blk * blk, axis=-1)
                d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * (blk @ np.swapaxes(blk, 1, 2))
                out[kk] = np.sqrt(np.maximum(np.max(d2, axis=(1, 2)), 0.0))
        for k in np.nonzero(live & (n > 256))[0]:
            out[k] = diameter(w[lo[k]:hi[k]], norm)
        return out


def _slice_reduce(ufunc, arr, lo, hi) -> np.ndarray:
    """ufunc.reduce over each window arr[lo[j]:hi[j]] (windows nonempty).

    reduceat treats consecutive index pairs independently, so interleaving
    the window bounds handles overlapping windows too; entries at the odd
    positions are discarded.
    """
    pad = np.vstack([arr, arr[-1:]])
    idx = np.empty(2 * len(lo), dtype=np.int64)
    idx[0::2] = lo
    idx[1::2] = hi
    return ufunc.reduceat(pad, idx, axis=0)[0::2]


def oscillation(path: CadlagPath, a: float, b: float, closed_right: bool = True,
                norm: Norm | str = Norm.EUCLIDEAN) -> float:
    """Supremum of ||X_u - X_v|| over u, v in [a, b] (or [a, b[).

    A left endpoint is treated the same whether open or closed, since the
    path is right-continuous there.
    """
    if b < a or (b == a and not closed_right):
        return 0.0
    if a < 0 or b > path.horizon:
        raise DomainError("interval not contained in [0, T]")
    table = _VertexTable(path, [a, b])
    lo, hi = table.slice_bounds(np.array([a]), np.array([b]), closed_right)
    return float(table.diameters(lo, hi, as_norm(norm))[0])


def interval_oscillations(path: CadlagPath, points, t: float | None = None,
                          side: str = "plus",
                          norm: Norm | str = Norm.EUCLIDEAN) -> np.ndarray:
    """Per-interval oscillations omega(X, ]r,s] ∩ [0,t]) or omega(X, [r,s[ ∩ [0,t])."""
    pts = np.asarray(points, dtype=float)
    t = path.horizon if t is None else float(t)
    r = pts[:-1]
    s = pts[1:]
    active = r < t
    r, s = r[active], s[active]
    s_t = np.minimum(s, t)
    if side == "plus":
        closed = np.ones(len(r), bool)
    elif side == "minus":
        closed = s > t  # [r, s[ ∩ [0, t] is [r, t] once s exceeds t
    else:
        raise ValueError("side must be 'plus' or 'minus'")
    table = _VertexTable(path, np.concatenate([r, s_t]))
    lo, hi = table.slice_bounds(r, s_t, closed)
    return table.diameters(lo, hi, as_norm(norm))


def osc_along(path: CadlagPath, partition, t: float | None = None, side: str = "plus",
              norm: Norm | str = Norm.EUCLIDEAN) -> float:
    """O^+_t(X, pi) or O^-_t(X, pi)."""
    pts = getattr(partition, "points", partition)
    osc = interval_oscillations(path, pts, t, side, norm)
    return float(np.max(osc)) if len(osc) else 0.0


def total_variation(path: CadlagPath, a: float = 0.0, b: float | None = None,
                    norm: Norm | str = Norm.EUCLIDEAN) -> float:
    """Exact variation of the representation over [a, b].

    For generated rough paths this is the variation of the discretisation.
    """
    b = path.horizon if b is None else b
    if a < 0 or b > path.horizon or b < a:
        raise DomainError("interval not contained in [0, T]")
    if a == b:
        return 0.0
    pts = np.union1d(path.breakpoints(a, b), [a, b])
    cont = path.continuous_part(pts)
    seg = float(np.sum(vnorm(np.diff(cont, axis=0), norm)))
    jt = path.jump_times
    sel = (jt > a) & (jt <= b)
    return seg + float(np.sum(vnorm(path.jump_sizes[sel], norm)))


def family_variation(paths: Sequence[CadlagPath], a: float = 0.0, b: float | None = None,
                     norm: Norm | str = Norm.EUCLIDEAN) -> float:
    if len(paths) == 0:
        raise DomainError("empty family")
    return max(total_variation(p, a, b, norm) for p in paths)
