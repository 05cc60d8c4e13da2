"""Partitions of [0, T], refining sequences, and admissibility checks.

Intervals are half-open ]t_i, t_{i+1}] throughout, so a partition point
belongs to the interval on its left.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from .paths import (CadlagPath, DomainError, Norm, _sign_vectors, as_norm,
                    interval_oscillations, osc_along, truncate_jumps, vnorm)


class InconclusiveError(RuntimeError):
    """A computation could not be carried out at the available resolution."""


class Verdict(str, enum.Enum):
    PASS = "Pass"
    FAIL = "Fail"
    INCONCLUSIVE = "Inconclusive"


class Partition:
    """A finite dissection 0 = t_0 < ... < t_N = T."""

    def __init__(self, points):
        pts = np.array(points, dtype=float).reshape(-1)
        if len(pts) < 2:
            raise ValueError("a partition needs at least two points")
        if pts[0] != 0.0:
            raise ValueError("partition must start at 0")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("partition points must be strictly increasing")
        pts.setflags(write=False)
        self.points = pts

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.points)))

    def __len__(self) -> int:
        """Number of intervals."""
        return len(self.points) - 1

    def intervals(self) -> np.ndarray:
        return np.column_stack([self.points[:-1], self.points[1:]])

    def index(self, t) -> np.ndarray:
        """Index i with t_i < t <= t_{i+1}; vectorised."""
        arr = np.asarray(t, dtype=float)
        if np.any(arr <= 0.0) or np.any(arr > self.horizon):
            raise DomainError(f"time outside ]0, T]: {t}")
        return np.searchsorted(self.points, arr, side="left") - 1

    def locate(self, t: float) -> tuple[tuple[float, float], int]:
        i = int(self.index(t))
        return (float(self.points[i]), float(self.points[i + 1])), i

    def lower(self, t):
        return self.points[self.index(t)]

    def upper(self, t):
        return self.points[self.index(t) + 1]

    def __eq__(self, other) -> bool:
        return isinstance(other, Partition) and np.array_equal(self.points, other.points)

    def __repr__(self) -> str:
        return f"Partition(n={len(self)}, T={self.horizon}, mesh={self.mesh:.3g})"


@dataclass(frozen=True)
class PartitionSequence:
    """Finitely many levels of a refining partition sequence."""

    kind: str
    horizon: float
    labels: tuple[int, ...]
    partitions: tuple[Partition, ...]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.labels) != len(self.partitions) or not self.partitions:
            raise ValueError("need one label per partition and at least one level")
        for p in self.partitions:
            if p.horizon != self.horizon:
                raise ValueError("all levels must cover [0, T]")

    def __len__(self) -> int:
        return len(self.partitions)

    def __iter__(self) -> Iterator[Partition]:
        return iter(self.partitions)

    def __getitem__(self, i) -> Partition:
        return self.partitions[i]

    def level(self, label: int) -> Partition:
        return self.partitions[self.labels.index(label)]

    def select(self, labels: Sequence[int]) -> "PartitionSequence":
        return PartitionSequence(self.kind, self.horizon, tuple(labels),
                                 tuple(self.level(n) for n in labels), self.params)

    @property
    def finest(self) -> Partition:
        return self.partitions[-1]


def dyadic_points(horizon: float, n: int) -> np.ndarray:
    # k * (T / 2^n) is exact for every k, so dyadic levels nest bit-exactly.
    return np.arange(2 ** n + 1, dtype=float) * (horizon / 2 ** n)


def dyadic_sequence(horizon: float, n_max: int, n_min: int = 0) -> PartitionSequence:
    if n_max < 1 or n_min < 0 or n_min > n_max:
        raise ValueError("need 0 <= n_min <= n_max and n_max >= 1")
    labels = tuple(range(n_min, n_max + 1))
    parts = tuple(Partition(dyadic_points(horizon, n)) for n in labels)
    return PartitionSequence("dyadic", float(horizon), labels, parts,
                             {"n_min": n_min, "n_max": n_max})


def uniform_sequence(horizon: float, counts: Sequence[int]) -> PartitionSequence:
    """Equal-mesh partitions with the given numbers of intervals."""
    counts = [int(c) for c in counts]
    if any(c < 1 for c in counts) or any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError("interval counts must be positive and strictly increasing")
    parts = []
    for c in counts:
        pts = np.arange(c + 1, dtype=float) * (horizon / c)
        pts[-1] = horizon
        parts.append(Partition(pts))
    return PartitionSequence("uniform", float(horizon), tuple(range(len(counts))),
                             tuple(parts), {"counts": counts})


def explicit_sequence(levels: Sequence[Sequence[float]]) -> PartitionSequence:
    parts = tuple(Partition(p) for p in levels)
    return PartitionSequence("explicit", parts[0].horizon, tuple(range(len(parts))), parts)


def load_explicit_csv(source: str | Path) -> PartitionSequence:
    """One level per line, comma-separated points."""
    levels = []
    for line in Path(source).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            levels.append([float(v) for v in line.split(",")])
    if not levels:
        raise ValueError(f"{source}: no partition levels found")
    return explicit_sequence(levels)


def save_explicit_csv(seq: PartitionSequence, target: str | Path) -> None:
    lines = [",".join(f"{v:.17g}" for v in p.points) for p in seq]
    Path(target).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- oscillation-controlled partitions --------------------------------------

class _FamilyVertices:
    """Values X(tau-) and X(tau) of every family member at merged breakpoints."""

    def __init__(self, family: Sequence[CadlagPath], norm: Norm):
        self.times = np.unique(np.concatenate([p.breakpoints() for p in family]))
        n = len(self.times)
        d = family[0].dim
        w = np.empty((2 * n, len(family), d))
        for k, p in enumerate(family):
            right = p.value(self.times)
            w[0::2, k] = right - p.jump_at(self.times)
            w[1::2, k] = right
        self.w = w
        self.norm = norm
        # projections turning the norm's diameter into coordinate ranges
        if d == 1 or norm is Norm.LINF:
            self.proj = np.eye(d)
        elif norm is Norm.L1:
            self.proj = _sign_vectors(d).T
        else:
            self.proj = None

    def point(self, j: int, lam: float) -> np.ndarray:
        # value on the open segment between breakpoints j-1 and j
        a = self.w[2 * j - 1]
        b = self.w[2 * j]
        return a + lam * (b - a)


class _RunningSet:
    """Growing point sets (one per family member) with exact diameters."""

    def __init__(self, fv: _FamilyVertices, start: np.ndarray):
        self.fv = fv
        if fv.proj is not None:
            p = start @ fv.proj
            self.lo = p.copy()
            self.hi = p.copy()
        else:
            self.pts = [start[k][None, :] for k in range(start.shape[0])]
            self.diam = np.zeros(start.shape[0])

    def diameter_with(self, q: np.ndarray) -> float:
        if self.fv.proj is not None:
            p = q @ self.fv.proj
            return float(np.max(np.maximum(self.hi, p) - np.minimum(self.lo, p)))
        best = 0.0
        for k, pts in enumerate(self.pts):
            far = np.max(vnorm(pts - q[k]))
            best = max(best, self.diam[k], float(far))
        return best

    def add(self, q: np.ndarray) -> None:
        if self.fv.proj is not None:
            p = q @ self.fv.proj
            np.maximum(self.hi, p, out=self.hi)
            np.minimum(self.lo, p, out=self.lo)
            return
        for k in range(len(self.pts)):
            self.diam[k] = max(self.diam[k], float(np.max(vnorm(self.pts[k] - q[k]))))
            self.pts[k] = np.vstack([self.pts[k], q[k]])

    def crossing(self, a: np.ndarray, e: np.ndarray, target: float) -> float:
        """Smallest mu in [0, 1] with diameter(set + {a + mu (e - a)}) = target.

        The diameter is convex in mu and below target at mu = 0, so the
        first crossing is unique; it is linear per projected coordinate and
        the root of a quadratic per stored point for the Euclidean norm.
        """
        u = e - a
        if self.fv.proj is not None:
            pa, pu = a @ self.fv.proj, u @ self.fv.proj
            with np.errstate(divide="ignore", invalid="ignore"):
                up = np.where(pu > 0, (self.lo + target - pa) / pu, np.inf)
                dn = np.where(pu < 0, (self.hi - target - pa) / pu, np.inf)
            mu = float(min(np.min(up), np.min(dn)))
        else:
            mu = np.inf
            for k, pts in enumerate(self.pts):
                diff = a[k] - pts
                A = float(u[k] @ u[k])
                if A == 0.0:
                    continue
                B = diff @ u[k]
                C = np.sum(diff * diff, axis=1) - target * target
                disc = np.maximum(B * B - A * C, 0.0)
                roots = (-B + np.sqrt(disc)) / A
                mu = min(mu, float(np.min(roots)))
        return min(max(mu, 0.0), 1.0)

    def first_breach(self, rows: np.ndarray, target: float) -> int:
        """Index of the first row whose inclusion gives diameter >= target, or -1."""
        if self.fv.proj is not None:
            p = rows @ self.fv.proj  # (n, paths, q)
            hi = np.maximum.accumulate(np.maximum(p, self.hi), axis=0)
            lo = np.minimum.accumulate(np.minimum(p, self.lo), axis=0)
            diam = np.max(hi - lo, axis=(1, 2))
            hit = np.nonzero(diam >= target)[0]
            k = len(rows) if len(hit) == 0 else int(hit[0])
            if k > 0:
                self.hi, self.lo = hi[k - 1], lo[k - 1]
            return -1 if len(hit) == 0 else k
        for i, q in enumerate(rows):
            if self.diameter_with(q) >= target:
                return i
            self.add(q)
        return -1


def _controlled_points(fv: _FamilyVertices, eps: float, horizon: float) -> np.ndarray:
    target = eps * (1.0 - 1e-9)
    resolution = 64 * np.finfo(float).eps * max(horizon, 1.0)
    times = fv.times
    n = len(times)
    last_row = 2 * (n - 1)  # X(T-) is the last vertex any [r, s[ can see
    cuts = [0.0]
    start_val = fv.w[1]
    start_row = 2
    start_lam = 0.0
    while True:
        run = _RunningSet(fv, start_val)
        cut = None
        row = start_row
        chunk = 64
        while row <= last_row and cut is None:
            stop = min(row + chunk, last_row + 1)
            rows = fv.w[row:stop]
            hit = run.first_breach(rows, target)
            if hit < 0:
                row = stop
                chunk *= 2
                continue
            v = row + hit
            # the running set now holds every vertex before v
            if v % 2 == 1:
                # a jump at times[j] would breach: cut exactly at the jump
                j = (v - 1) // 2
                cut = (float(times[j]), fv.w[v], v + 1, 0.0)
            else:
                j = v // 2
                lam0 = start_lam if v == start_row else 0.0
                mu = run.crossing(fv.point(j, lam0), fv.w[2 * j], target)
                lo_lam = lam0 + mu * (1.0 - lam0)
                # guard against rounding: step back until strictly inside
                while lo_lam > lam0 and run.diameter_with(fv.point(j, lo_lam)) >= eps:
                    lo_lam = max(lam0, lo_lam - 1e-12 - 1e-9 * (lo_lam - lam0))
                t0, t1 = times[j - 1], times[j]
                s = float(t0 + lo_lam * (t1 - t0))
                if s <= t0:
                    cut = (float(t0), fv.w[2 * j - 1], 2 * j, 0.0)
                else:
                    cut = (s, fv.point(j, lo_lam), 2 * j, lo_lam)
        if cut is None:
            break
        s, val, nxt, lam = cut
        if s - cuts[-1] <= resolution or s >= horizon:
            raise InconclusiveError(
                f"oscillation threshold {eps:g} is below the time resolution of the "
                f"path discretisation near t={cuts[-1]:.6g}; use a finer path grid")
        cuts.append(s)
        start_val = val
        start_row = nxt
        start_lam = lam
    cuts.append(horizon)
    return np.array(cuts)


def oscillation_controlled_sequence(family: Sequence[CadlagPath], eps_schedule: Sequence[float],
                                    norm: Norm | str = Norm.EUCLIDEAN) -> PartitionSequence:
    """Greedy partitions with max_f O^-_T(f, pi_k) < eps_k for every level k.

    Each interval is extended left to right until some member's oscillation
    on [r, s[ would reach eps_k.  A jump that would breach the bound forces
    a cut exactly at the jump time, so the jump sits at the right end of an
    interval and is invisible to [r, s[.
    """
    if not family:
        raise DomainError("empty family")
    horizon = family[0].horizon
    if any(p.horizon != horizon or p.dim != family[0].dim for p in family):
        raise ValueError("family members must share horizon and dimension")
    eps = [float(e) for e in eps_schedule]
    if not eps or any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps schedule must be strictly decreasing positives")
    norm = as_norm(norm)
    fv = _FamilyVertices(family, norm)
    parts = tuple(Partition(_controlled_points(fv, e, horizon)) for e in eps)
    return PartitionSequence("osc", horizon, tuple(range(len(eps))), parts,
                             {"eps": eps, "norm": norm.value})


def family_osc_minus(family: Sequence[CadlagPath], partition: Partition,
                     norm: Norm | str = Norm.EUCLIDEAN) -> float:
    return max(osc_along(p, partition, None, "minus", norm) for p in family)


# -- condition checks ---------------------------------------------------------

@dataclass
class ConditionReport:
    condition: str
    verdict: Verdict
    witness: dict | None
    eps_grid: list
    t_grid: list
    table: Any
    tolerance: float

    def __post_init__(self):
        if self.verdict is Verdict.FAIL and self.witness is None:
            raise ValueError("a failing report must carry a witness")

    def to_dict(self) -> dict:
        return {"condition": self.condition, "verdict": self.verdict.value,
                "witness": self.witness, "eps_grid": list(self.eps_grid),
                "t_grid": list(self.t_grid), "table": self.table,
                "tolerance": self.tolerance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def vanishing_verdict(values: Sequence[float], tol: float) -> Verdict:
    """Finite-prefix judgement of whether a level sequence tends to 0.

    The first and last thirds of the levels are compared (at least one level
    each, at least three levels overall).  Pass if the last third is within
    ``tol`` of 0 or its supremum is at most half that of the first third;
    Fail if the last third has not dropped below the first third's supremum
    (stagnation); otherwise Inconclusive.  Comparing thirds rather than
    consecutive levels tolerates sequences that stall for a few levels, such
    as dyadic approximations of a time with zeros in its binary expansion.
    """
    vals = np.asarray(values, dtype=float)
    if len(vals) < 3:
        return Verdict.INCONCLUSIVE
    k = max(1, len(vals) // 3)
    head, tail = np.max(vals[:k]), np.max(vals[-k:])
    if tail <= tol:
        return Verdict.PASS
    if tail <= 0.5 * head:
        return Verdict.PASS
    if np.min(vals[-k:]) >= head - tol:
        return Verdict.FAIL
    return Verdict.INCONCLUSIVE


def _combine(verdicts) -> Verdict:
    verdicts = list(verdicts)
    if Verdict.FAIL in verdicts:
        return Verdict.FAIL
    if Verdict.INCONCLUSIVE in verdicts:
        return Verdict.INCONCLUSIVE
    return Verdict.PASS


def _default_grids(family, t_grid, eps_grid, norm):
    horizon = family[0].horizon
    t_grid = [horizon] if t_grid is None else [float(t) for t in t_grid]
    if any(t <= 0 or t > horizon for t in t_grid):
        raise DomainError("reporting times must lie in ]0, T]")
    if eps_grid is None:
        sizes = np.concatenate([vnorm(p.jump_sizes, norm) for p in family])
        scale = float(np.max(sizes)) if len(sizes) else 1.0
        eps_grid = [scale * 10.0 ** (-k) for k in range(4)]
    eps_grid = [float(e) for e in eps_grid]
    if any(e <= 0 for e in eps_grid) or any(b >= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("eps grid must be strictly decreasing positives")
    return t_grid, eps_grid


def _increment(path: CadlagPath, r, s, t):
    return path.value(np.minimum(s, t)) - path.value(np.minimum(r, t))


def _uc_reports(seq: PartitionSequence, family: Sequence[CadlagPath], t_grid, eps_grid,
                tol: float, norm, names) -> tuple[ConditionReport, ConditionReport, ConditionReport]:
    norm = as_norm(norm)
    if not family:
        raise DomainError("empty family")
    t_grid, eps_grid = _default_grids(family, t_grid, eps_grid, norm)
    labels = list(seq.labels)

    # (C1): big jumps eventually sit in distinct intervals
    c1_table, c1_verdicts, c1_witness = [], [], None
    for eps in eps_grid:
        times = np.unique(np.concatenate([p.jump_set(eps, norm).times for p in family]))
        for t in t_grid:
            d_eps = times[times <= t]
            ok_from = None
            bad = None
            for n, part in zip(labels, seq):
                if len(d_eps) == 0:
                    ok = True
                else:
                    idx = part.index(d_eps)
                    counts = np.bincount(idx)
                    ok = bool(np.max(counts) <= 1)
                    if not ok:
                        i = int(np.argmax(counts))
                        bad = {"level": n, "eps": eps, "t": t,
                               "interval": [float(part.points[i]), float(part.points[i + 1])],
                               "jump_times": d_eps[idx == i].tolist(),
                               "value": int(counts[i])}
                if ok and ok_from is None:
                    ok_from = n
                elif not ok:
                    ok_from = None
            c1_table.append({"eps": eps, "t": t, "first_level": ok_from})
            if ok_from is None:
                c1_verdicts.append(Verdict.FAIL)
                c1_witness = c1_witness or bad
            else:
                c1_verdicts.append(Verdict.PASS)
    c1 = ConditionReport(names[0], _combine(c1_verdicts), c1_witness, eps_grid, t_grid,
                         c1_table, tol)

    # (C2): the increment over pi_n(s) converges to the jump at s, uniformly over the family
    all_jumps = np.unique(np.concatenate([p.jump_times for p in family]))
    c2_table, c2_verdicts, c2_witness = [], [], None
    for s in all_jumps:
        for t in t_grid:
            if s > t:
                continue
            errs = []
            for part in seq:
                i = part.index(s)
                r, u = part.points[i], part.points[i + 1]
                errs.append(max(float(vnorm(_increment(p, r, u, t) - p.jump_at(s), norm))
                                for p in family))
            v = vanishing_verdict(errs, tol)
            c2_table.append({"s": float(s), "t": t, "errors": errs})
            c2_verdicts.append(v)
            if v is Verdict.FAIL and c2_witness is None:
                c2_witness = {"level": labels[-1], "time": float(s), "t": t, "value": errs[-1]}
    c2 = ConditionReport(names[1], _combine(c2_verdicts), c2_witness, eps_grid, t_grid,
                         c2_table, tol)

    # (C3): small-jump oscillation, sampled on the (eps, level) grid
    c3_table, c3_verdicts, c3_witness = [], [], None
    residuals = {eps: [truncate_jumps(p, eps, norm)[1] for p in family] for eps in eps_grid}
    for t in t_grid:
        matrix = np.array([[max(osc_along(r, part, t, "plus", norm) for r in residuals[eps])
                            for part in seq] for eps in eps_grid])
        c3_table.append({"t": t, "osc_plus": matrix.tolist()})
        v, w = _iterated_verdict(matrix, tol)
        c3_verdicts.append(v)
        if v is Verdict.FAIL and c3_witness is None:
            c3_witness = {"level": labels[-1], "eps": eps_grid[-1], "t": t, "value": w}
    c3 = ConditionReport(names[2], _combine(c3_verdicts), c3_witness, eps_grid, t_grid,
                         c3_table, tol)
    return c1, c2, c3


def _iterated_verdict(matrix: np.ndarray, tol: float) -> tuple[Verdict, float]:
    """Judge lim_eps limsup_n of a (eps, level) table.

    Pass needs the tail of every row nonincreasing in the level and every
    column nonincreasing as eps shrinks (within ``tol``), plus evidence of
    decay along the finest row or along the column of tail suprema.
    """
    if matrix.shape[1] < 3:
        return Verdict.INCONCLUSIVE, float(matrix[-1, -1])
    tail = matrix[:, -3:]
    limsup = np.max(tail, axis=1)
    rows_mono = bool(np.all(np.diff(tail, axis=1) <= tol))
    cols_mono = bool(np.all(np.diff(tail, axis=0) <= tol))
    last = tail[-1]
    if np.max(last) <= tol:
        return Verdict.PASS, float(last[-1])
    row_decay = last[-1] <= 0.5 * last[0]
    col_decay = len(limsup) >= 2 and limsup[-1] <= max(tol, 0.5 * limsup[0])
    if rows_mono and cols_mono and (row_decay or col_decay):
        return Verdict.PASS, float(last[-1])
    stagnant_row = bool(np.all(np.diff(last) >= -tol))
    stagnant_col = len(limsup) < 2 or bool(np.all(np.diff(limsup) >= -tol))
    if stagnant_row and stagnant_col:
        return Verdict.FAIL, float(last[-1])
    return Verdict.INCONCLUSIVE, float(last[-1])


def check_condition_C(seq: PartitionSequence, path: CadlagPath, t_grid=None, eps_grid=None,
                      tol: float = 1e-9, norm: Norm | str = Norm.EUCLIDEAN
                      ) -> tuple[ConditionReport, ConditionReport, ConditionReport]:
    """Finite-prefix certification of (C1), (C2), (C3) for one path."""
    return _uc_reports(seq, [path], t_grid, eps_grid, tol, norm, ("C1", "C2", "C3"))


def check_UC(seq: PartitionSequence, family: Sequence[CadlagPath], t_grid=None, eps_grid=None,
             tol: float = 1e-9, norm: Norm | str = Norm.EUCLIDEAN
             ) -> tuple[ConditionReport, ConditionReport, ConditionReport]:
    """Family version: union of jump sets and suprema over the (finite) family."""
    return _uc_reports(seq, list(family), t_grid, eps_grid, tol, norm, ("UC1", "UC2", "UC3"))


def check_left_approximation(seq: PartitionSequence, path: CadlagPath, t_grid=None,
                             tol: float = 1e-9, norm: Norm | str = Norm.EUCLIDEAN
                             ) -> ConditionReport:
    """Check X(lower_n(t)) -> X(t-) at each reporting time."""
    norm = as_norm(norm)
    t_grid, _ = _default_grids([path], t_grid, [1.0], norm)
    table, verdicts, witness = [], [], None
    for t in t_grid:
        target = path.left_limit(t)
        lowers = [float(part.lower(t)) for part in seq]
        errs = [float(vnorm(path.value(r) - target, norm)) for r in lowers]
        v = vanishing_verdict(errs, tol)
        table.append({"t": t, "lower_points": lowers, "errors": errs})
        verdicts.append(v)
        if v is Verdict.FAIL and witness is None:
            witness = {"level": seq.labels[-1], "t": t, "lower_point": lowers[-1],
                       "value": errs[-1]}
    return ConditionReport("LeftApprox", _combine(verdicts), witness, [], t_grid, table, tol)
