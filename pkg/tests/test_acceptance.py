"""Acceptance suite: one test per criterion, each with its stated tolerance and time budget.

Run ``pytest tests/test_acceptance.py`` (or this file directly); the terminal
summary prints one PASS/FAIL line per criterion.
"""

import time

import numpy as np
import pytest

from qvtool.generators import PathRecipe, expected_qv, generate
from qvtool.partitions import (Partition, Verdict, check_condition_C, check_left_approximation,
                               dyadic_sequence, explicit_sequence, family_osc_minus,
                               oscillation_controlled_sequence)
from qvtool.paths import CadlagPath, Norm, add, diameter, linear_map, step_path
from qvtool.quadratic import (BilinearForm, Crossnorm, abs_continuity_check, density_estimate,
                              discrete_qv_values, discrete_scalar_qv_values, qv_limit,
                              unit_density_check)
from qvtool.transform import (SmoothFunction, c1_smooth_transform, integral_qv, ito_report,
                              rough_fv_decompose)

SEED = 2024
# step-2 dyadic subsequence used for the calculus criteria (see README)
CALCULUS_LEVELS = [8, 10, 12, 14, 16]


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f}s, budget {self.seconds}s"


def random_path(rng, d, horizon=1.0, max_jumps=3):
    m = int(rng.integers(2, 60))
    grid = np.concatenate([[0.0], np.sort(rng.uniform(0, horizon, m - 1)), [horizon]])
    grid = np.unique(grid)
    samples = rng.normal(size=(len(grid), d))
    k = int(rng.integers(0, max_jumps + 1))
    jt = np.unique(rng.uniform(0, horizon, k))
    jt = jt[jt > 0]
    js = rng.normal(size=(len(jt), d)) * 2
    return CadlagPath(grid, samples, jt, js)


def random_partition(rng, path, horizon=1.0):
    k = int(rng.integers(1, 40))
    pts = rng.uniform(0, horizon, k)
    # sometimes hit jump times and grid times exactly
    extra = rng.choice(np.concatenate([path.grid, path.jump_times]), size=min(3, len(path.grid)))
    return Partition(np.unique(np.concatenate([[0.0, horizon], pts, extra])))


def decreasing(values, floor=1e-12):
    """Strictly decreasing, except that values at the rounding floor count as zero."""
    v = np.asarray(values, dtype=float)
    return all(b < a or b <= floor for a, b in zip(v[:-1], v[1:]))


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_01_discrete_trace_identity():
    rng = np.random.default_rng(101)
    worst = 0.0
    with Budget(5):
        for _ in range(200):
            d = int(rng.integers(1, 5))
            X = random_path(rng, d)
            part = random_partition(rng, X)
            times = np.concatenate([[rng.uniform(0, 1)], rng.choice(part.points, 2)])
            tensor = discrete_qv_values(BilinearForm.outer(d), X, X, part, times)
            scalar = discrete_scalar_qv_values(X, part, times)
            err = np.abs(np.trace(tensor, axis1=1, axis2=2) - scalar) / (1 + np.abs(scalar))
            worst = max(worst, float(np.max(err)))
    assert worst <= 1e-12, worst


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_02_pushforward_exactness():
    rng = np.random.default_rng(202)
    seq = dyadic_sequence(1.0, 6)
    worst_push = worst_rot = 0.0
    with Budget(5):
        for _ in range(100):
            d = int(rng.integers(1, 5))
            m = int(rng.integers(1, 5))
            B = BilinearForm.coefficients(rng.normal(size=(m, d, d)))
            T = rng.normal(size=(int(rng.integers(1, 4)), m))
            TB = B.compose(T)
            X, Y = random_path(rng, d), random_path(rng, d)
            R, _ = np.linalg.qr(rng.normal(size=(d, d)))
            RX = linear_map(X, R)
            times = np.linspace(0, 1, 9)
            for part in seq:
                lhs = discrete_qv_values(B, X, Y, part, times) @ T.T
                rhs = discrete_qv_values(TB, X, Y, part, times)
                worst_push = max(worst_push, float(np.max(np.abs(lhs - rhs)) / (1 + np.max(np.abs(rhs)))))
                q = discrete_scalar_qv_values(X, part, times)
                qr = discrete_scalar_qv_values(RX, part, times)
                worst_rot = max(worst_rot, float(np.max(np.abs(q - qr)) / (1 + np.max(np.abs(q)))))
    assert worst_push <= 1e-12, worst_push
    assert worst_rot <= 1e-12, worst_rot


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_03_finite_variation_paths_have_jump_qv():
    # SmoothFV at generator level 10 is piecewise linear on a 2^-10 grid: for
    # n >= 10 its discrete QV is exactly proportional to 2^-n, and the
    # Richardson combination removes that term.
    jumps = [(0.3, [1.0, -0.5]), (0.625, [0.25, 2.0]), (0.9, [-1.5, 0.0])]
    step = generate(PathRecipe("StepFV", SEED, 1.0, {"jumps": jumps, "start": [0.0, 1.0]}))
    smooth = generate(PathRecipe("SmoothFV", SEED, 1.0, {
        "level": 10, "poly": [[0.0, 1.0, -2.0], [1.0, 0.5, 0.0]], "sine": [([0.3, -0.2], 2.0, 0.1)]}))
    seq = dyadic_sequence(1.0, 14, 4)
    expected_jumps = sum(float(np.dot(v, v)) for _, v in jumps)
    with Budget(5):
        for X, target in ((step, expected_jumps), (smooth, 0.0), (add(smooth, step), expected_jumps)):
            qv, est = qv_limit(BilinearForm.inner(2), X, X, seq, [0.0, 0.5, 1.0], richardson=True)
            assert est.verdict is Verdict.PASS
            assert abs(qv.at(1.0) - target) <= 1e-9, (qv.at(1.0), target)
        assert expected_qv(PathRecipe("StepFV", SEED, 1.0, {"jumps": jumps})).scalar(1.0) == \
            pytest.approx(expected_jumps, abs=1e-12)


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_04_holder_path_has_zero_qv():
    with Budget(20):
        X = generate(PathRecipe("FBM", SEED, 1.0, {"hurst": 0.8, "level": 14}))
        seq = dyadic_sequence(1.0, 14, 8)
        q = np.array([discrete_scalar_qv_values(X, p, [1.0])[0] for p in seq])
    tail = q[-4:]
    print("fbm Q_T by level 8..14:", q.tolist(), "ratio", q[-1] / q[0])
    assert np.all(np.diff(tail) < 0), tail
    assert q[-1] < 0.05 * q[0], f"Q_14 / Q_8 = {q[-1] / q[0]:.4f}"


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_05_matched_grid_exactness():
    sigmas = [np.array([[1.0]]), np.array([[0.5, 1.0], [0.0, 2.0]]),
              np.array([[1.0, 0.2, -0.3], [0.0, 0.7, 0.4]]), np.eye(4) * 0.3 + 0.1]
    with Budget(2):
        for i, sigma in enumerate(sigmas):
            for level in (4, 9, 14):
                T = 1.0 + 0.5 * i
                X = generate(PathRecipe("ScaledRandomWalk", SEED + i, T,
                                        {"level": level, "sigma": sigma.tolist()}))
                q = discrete_scalar_qv_values(X, Partition(X.grid), [T])[0]
                target = T * np.trace(sigma @ sigma.T)
                assert abs(q - target) <= 1e-12 * max(1.0, target), (q, target)


# -- 6 ---------------------------------------------------------------------------------

def test_criterion_06_ito_identity():
    seq = dyadic_sequence(1.0, 16, 8).select(CALCULUS_LEVELS)
    with Budget(10):
        walk2 = generate(PathRecipe("ScaledRandomWalk", SEED, 1.0,
                                    {"level": 16, "sigma": [[1.0, 0.3], [0.0, 0.8]]}))
        jd2 = generate(PathRecipe("JumpDiffusion", SEED, 1.0, {
            "level": 16, "sigma": [[1.0, 0.0], [0.4, 0.9]],
            "jumps": [(0.3, [0.5, -0.2]), (0.71, [-0.4, 0.3])]}))
        for X in (walk2, jd2):
            rep = ito_report(SmoothFunction.norm_sq(2), None, X, seq)
            assert np.all(rep.residual_norms() <= 1e-12), rep.residual_norms()
        walk1 = generate(PathRecipe("ScaledRandomWalk", SEED, 1.0, {"level": 16, "sigma": [[1.0]]}))
        rep = ito_report(SmoothFunction.sin(1), None, walk1, seq)
    res = rep.residual_norms()
    rel = rep.relative_residuals()
    print("sin residuals by level:", res.tolist())
    assert np.all(np.diff(res[-4:]) <= 0), res
    assert rel[-1] < 1e-3, rel[-1]


# -- 7 and 8 ---------------------------------------------------------------------------

def _paths(d):
    sigma = [[1.0]] if d == 1 else [[1.0, 0.3], [0.0, 0.8]]
    jumps = [(0.3, [0.2] * d), (0.71, [-0.15] * d)]
    walk = generate(PathRecipe("ScaledRandomWalk", SEED, 1.0, {"level": 18, "sigma": sigma}))
    jd = generate(PathRecipe("JumpDiffusion", SEED, 1.0, {"level": 18, "sigma": sigma, "jumps": jumps}))
    smooth = generate(PathRecipe("SmoothFV", SEED, 1.0, {
        "level": 16, "poly": [[0.0, 0.5, -0.3]] * d, "sine": [([0.4] * d, 3.0, 0.2)]}))
    step = generate(PathRecipe("StepFV", SEED, 1.0, {"jumps": jumps}))
    return {"brownian": walk, "jump-diffusion": jd, "finite-variation": add(smooth, step)}


def test_criterion_07_c1_transform_formula():
    seq = dyadic_sequence(1.0, 16, 8).select(CALCULUS_LEVELS)
    A = generate(PathRecipe("SmoothFV", SEED, 1.0, {
        "level": 16, "poly": [[1.0, 0.5], [0.5, -0.2]], "sine": [([0.3, 0.2], 2.0, 0.0)]}))
    cases = [("sin", SmoothFunction.sin(1), None, 1),
             ("Mx", SmoothFunction.linear([[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]]), None, 2),
             ("a.x", SmoothFunction.bilinear_ax(2), A, 2)]
    failures = []
    with Budget(30):
        for name, f, AA, d in cases:
            for kind, X in _paths(d).items():
                res = c1_smooth_transform(f, AA, X, seq)
                g = res.gaps
                print(f"{name} on {kind}: gaps {g[-3:].tolist()}")
                if not (g[-1] < 5e-3 and decreasing(g[-3:])):
                    failures.append((name, kind, g[-3:].tolist()))
    assert not failures, failures


def test_criterion_08_qv_of_the_integral():
    seq = dyadic_sequence(1.0, 16, 8).select(CALCULUS_LEVELS)
    failures = []
    with Budget(30):
        for name, f, d in (("x^2", SmoothFunction.norm_sq(1), 1), ("|x|^2", SmoothFunction.norm_sq(2), 2)):
            paths = _paths(d)
            for kind in ("brownian", "jump-diffusion"):
                res = integral_qv(f, None, paths[kind], seq)
                print(f"{name} on {kind}: final gap {res.final_gap:.3e}")
                if not res.final_gap < 5e-3:
                    failures.append((name, kind, res.final_gap))
    assert not failures, failures


# -- 9 ---------------------------------------------------------------------------------

def test_criterion_09_absolute_continuity_bound():
    rng = np.random.default_rng(909)
    seq = dyadic_sequence(1.0, 12, 4)
    classes = {
        "brownian": generate(PathRecipe("ScaledRandomWalk", SEED, 1.0,
                                        {"level": 12, "sigma": [[1.0, 0.5], [0.2, 0.7]]})),
        "jump-diffusion": generate(PathRecipe("JumpDiffusion", SEED, 1.0, {
            "level": 12, "sigma": [[1.0, 0.0], [0.5, 0.5]], "jumps": [(0.4, [1.0, -1.0])]})),
        "finite-variation": _paths(2)["finite-variation"],
        "fbm": generate(PathRecipe("FBM", SEED, 1.0, {"hurst": 0.3, "level": 12, "dim": 2})),
    }
    worst = -np.inf
    with Budget(10):
        for X in classes.values():
            times = seq.finest.points
            scalar, _ = qv_limit(BilinearForm.inner(2), X, X, seq, times)
            for kind in Crossnorm:
                tensor, _ = qv_limit(BilinearForm.outer(2, kind), X, X, seq, times)
                idx = np.sort(rng.choice(len(times), size=(50, 2)), axis=1)
                pairs = [(times[i], times[j]) for i, j in idx]
                rep = abs_continuity_check(tensor, scalar, 1.0, pairs, slack=1e-6, kind=kind)
                worst = max(worst, rep.max_violation)
                assert rep.ok, (kind, rep.max_violation)
    print("largest (lhs - rhs - slack):", worst)


# -- 10 --------------------------------------------------------------------------------

def test_criterion_10_density_representation():
    seq = dyadic_sequence(1.0, 14, 6)
    edges = np.linspace(0, 1, 33)
    with Budget(20):
        W = generate(PathRecipe("ScaledRandomWalk", SEED, 1.0, {"level": 14, "sigma": [[1.0]]}))
        t1, _ = qv_limit(BilinearForm.outer(1), W, W, seq)
        s1, _ = qv_limit(BilinearForm.inner(1), W, W, seq)
        dens1 = density_estimate(t1, s1, edges)
        mean_abs = float(np.mean(np.abs(dens1.q[dens1.mass] - 1.0)))
        assert mean_abs <= 5e-3, mean_abs

        WW = generate(PathRecipe("ScaledRandomWalk", SEED, 1.0, {"level": 14, "sigma": [[1.0], [1.0]]}))
        tensor, _ = qv_limit(BilinearForm.outer(2), WW, WW, seq)
        scalar, _ = qv_limit(BilinearForm.inner(2), WW, WW, seq)
        dens = density_estimate(tensor, scalar, edges)
        target = 0.5 * np.ones((2, 2))
        cell_err = float(np.max(np.abs(dens.q[dens.mass] - target)))
        assert cell_err <= 5e-3, cell_err
        nuclear = dens.norms(Crossnorm.PROJECTIVE)
        assert float(np.max(np.abs(nuclear - 1.0))) <= 5e-3
        recon = dens.reconstruct()
        direct = tensor.at(edges) - tensor.at(0.0)
        assert float(np.max(np.abs(recon - direct))) <= 1e-6
        check = unit_density_check(dens, tensor, scalar)
        assert check.variation_gap <= 5e-3, check.variation_gap


# -- 11 --------------------------------------------------------------------------------

def test_criterion_11_rough_fv_decomposition():
    rng = np.random.default_rng(1111)
    seq = dyadic_sequence(1.0, 12, 8)
    A = step_path(1.0, [(0.5, [0.3, -0.1]), (0.8, [0.2, 0.2])], start=[1.0, 0.5])
    fns = [("norm_sq", SmoothFunction.norm_sq(2), None), ("sin", SmoothFunction.sin(2), None),
           ("a.x", SmoothFunction.bilinear_ax(2), A), ("poly", SmoothFunction.custom_poly([0, 1, 0.5, -0.2], 2), None),
           ("identity", SmoothFunction.identity(2), None)]
    with Budget(10):
        for case in range(20):
            name, f, AA = fns[case % len(fns)]
            kind = ("ScaledRandomWalk", "JumpDiffusion")[case % 2]
            params = {"level": 12, "sigma": rng.normal(size=(2, 2)).tolist()}
            if kind == "JumpDiffusion":
                params["jumps"] = [(float(t), rng.normal(size=2).tolist()) for t in np.sort(rng.uniform(0.05, 1, 2))]
            X = generate(PathRecipe(kind, SEED + case, 1.0, params))
            part = seq[int(rng.integers(0, len(seq)))]
            dec = rough_fv_decompose(f, AA, X, part)
            err = dec.reconstruction_error()
            resid = np.sqrt(np.sum(dec.residual ** 2, axis=1))
            slack = 1e-12 * (1 + np.max(np.abs(dec.lhs)))
            assert np.all(err <= resid + slack), (name, float(np.max(err - resid)))
            assert len(dec.C.jump_times) == 0
            # D is constant between consecutive jump times
            jt = np.concatenate([[0.0], dec.D.jump_times, [1.0]])
            for a, b in zip(jt[:-1], jt[1:]):
                if b > a:
                    mid = np.linspace(a, b, 7)[:-1]
                    vals = dec.D.value(mid)
                    assert np.all(vals == vals[0])


# -- 12 --------------------------------------------------------------------------------

def test_criterion_12_condition_checkers():
    with Budget(5):
        piecewise = CadlagPath([0.0, 0.5, 1.0], [[0.0], [1.0], [0.0]], [0.3, 0.7], [[1.0], [-2.0]])
        seq = dyadic_sequence(1.0, 12)
        t_grid = [0.3, 0.5, 0.7, 1.0]
        c1, c2, _ = check_condition_C(seq, piecewise, t_grid)
        left = check_left_approximation(seq, piecewise, t_grid)
        assert (c1.verdict, c2.verdict, left.verdict) == (Verdict.PASS,) * 3

        # a level sequence whose left endpoint below t = 0.5 stays frozen at 0.25
        line = CadlagPath([0.0, 1.0], [[0.0], [1.0]])
        levels = []
        for n in range(2, 10):
            pts = np.arange(2 ** n + 1) / 2 ** n
            levels.append(pts[(pts <= 0.25) | (pts >= 0.5)])
        frozen = check_left_approximation(explicit_sequence(levels), line, [0.5])
        assert frozen.verdict is Verdict.FAIL
        assert frozen.witness["lower_point"] == 0.25

        twin = step_path(1.0, [(0.4, [1.0]), (0.4 + 2 ** -12, [1.0])], start=[0.0])
        c1, _, _ = check_condition_C(dyadic_sequence(1.0, 8), twin)
        assert c1.verdict is Verdict.FAIL
        w = c1.witness
        assert w["interval"][0] < 0.4 and 0.4 + 2 ** -12 <= w["interval"][1]
        assert len(w["jump_times"]) == 2


# -- 13 --------------------------------------------------------------------------------

def _brute_osc_minus(path, points, norm):
    """Independent route: diameter of all vertex values inside each [r, s[."""
    times = np.union1d(path.breakpoints(), points)
    right = path.value(times)
    left = right - path.jump_at(times)
    best = 0.0
    for r, s in zip(points[:-1], points[1:]):
        inner = (times > r) & (times < s)
        vals = np.vstack([path.value([r]), left[inner], right[inner], path.left_limit([s])])
        best = max(best, diameter(vals, norm))
    return best


def test_criterion_13_oscillation_controlled_partitions():
    rng = np.random.default_rng(1313)
    norms = list(Norm)
    with Budget(5):
        for k in range(20):
            d = int(rng.integers(1, 4))
            family = [random_path(rng, d) for _ in range(int(rng.integers(1, 4)))]
            norm = norms[k % 3]
            eps = [1.5, 0.8, 0.4, 0.2]
            seq = oscillation_controlled_sequence(family, eps, norm)
            for e, part in zip(eps, seq):
                measured = family_osc_minus(family, part, norm)
                assert measured < e, (k, e, measured)
                if k < 5:
                    brute = max(_brute_osc_minus(p, part.points, norm) for p in family)
                    assert brute < e and abs(brute - measured) <= 1e-12 * max(1.0, brute)
