import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qvtool.generators import PathRecipe, generate
from qvtool.partitions import Partition, Verdict, dyadic_sequence
from qvtool.paths import CadlagPath, DomainError, Norm, add, linear_map, step_path
from qvtool.quadratic import (BilinearForm, Crossnorm, IdentityViolation, QVPath,
                              abs_continuity_check, blocked_cumsum, crossnorm,
                              cylindrical_qv, density_estimate, discrete_qv,
                              discrete_qv_path, discrete_qv_values, discrete_scalar_qv,
                              discrete_scalar_qv_values, estimate_limit, push_linear,
                              push_pair, qv_limit, restarted_qv, split_continuous_jump,
                              trace_qv, two_variation, unit_density_check)


def linear_e1(d=1):
    s = np.zeros((2, d))
    s[1, 0] = 1.0
    return CadlagPath([0.0, 1.0], s)


@st.composite
def path_and_partition(draw, d=None):
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    d = d or int(rng.integers(1, 4))
    m = int(rng.integers(2, 30))
    grid = np.unique(np.concatenate([[0.0], rng.uniform(0, 1, m - 1), [1.0]]))
    k = int(rng.integers(0, 4))
    jt = np.unique(rng.uniform(0.01, 1, k))
    X = CadlagPath(grid, rng.normal(size=(len(grid), d)), jt, rng.normal(size=(len(jt), d)))
    Y = CadlagPath(grid, rng.normal(size=(len(grid), d)))
    pts = np.unique(np.concatenate([[0.0, 1.0], rng.uniform(0, 1, int(rng.integers(1, 30))),
                                    rng.choice(np.concatenate([grid, jt]), 2)]))
    t = float(rng.choice([rng.uniform(0, 1), *pts[1:3]]))
    return X, Y, Partition(pts), t


def brute_qv(B, X, Y, pts, t):
    """Direct loop over intervals with increments clipped at t."""
    total = np.zeros(B.shape)
    for r, s in zip(pts[:-1], pts[1:]):
        r_t, s_t = min(r, t), min(s, t)
        total = total + B(X.value(s_t) - X.value(r_t), Y.value(s_t) - Y.value(r_t))
    return total


# -- forms ----------------------------------------------------------------------------

def test_operator_norms():
    assert BilinearForm.inner(3).operator_norm == 1.0
    assert BilinearForm.outer(3).operator_norm == 1.0
    c = np.diag([3.0, -1.0])
    B = BilinearForm.coefficients(c)
    assert B.operator_norm == pytest.approx(3.0)
    assert B.norm_method == "exact"
    B2 = BilinearForm.coefficients(np.stack([c, np.eye(2)]))
    assert B2.norm_method == "estimate"
    assert B2.operator_norm <= np.sum(np.abs(B2.coeffs)) + 1e-12


def test_projective_needs_euclidean_ground_norm():
    with pytest.raises(ValueError):
        BilinearForm.outer(2, Crossnorm.PROJECTIVE, Norm.L1)
    BilinearForm.outer(2, Crossnorm.HILBERTIAN, Norm.L1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_bilinearity_and_norm_bound(seed):
    rng = np.random.default_rng(seed)
    d, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    B = BilinearForm.coefficients(rng.normal(size=(m, d, d)))
    x, x2, y = rng.normal(size=(3, d))
    a = float(rng.normal())
    np.testing.assert_allclose(B(a * x + x2, y), a * B(x, y) + B(x2, y), atol=1e-12)
    assert np.linalg.norm(B(x, y)) <= B.operator_norm * np.linalg.norm(x) * np.linalg.norm(y) * (1 + 1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_crossnorm_sandwich(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(3, 3))
    inj, hil, proj = (crossnorm(M, k) for k in (Crossnorm.INJECTIVE, Crossnorm.HILBERTIAN,
                                                  Crossnorm.PROJECTIVE))
    assert inj <= hil * (1 + 1e-12) and hil <= proj * (1 + 1e-12)
    v = rng.normal(size=3)
    r1 = np.outer(v, v)
    vals = [crossnorm(r1, k) for k in Crossnorm]
    np.testing.assert_allclose(vals, np.dot(v, v), rtol=1e-12)


# -- discrete sums --------------------------------------------------------------------

def test_single_jump_outer():
    X = step_path(1.0, [(0.3, [1.0, 2.0])])
    val = discrete_qv(BilinearForm.outer(2), X, X, Partition([0.0, 0.5, 1.0]), 1.0)
    np.testing.assert_array_equal(val, [[1, 2], [2, 4]])


@pytest.mark.parametrize("n", [0, 3, 7])
def test_linear_path_inner(n):
    X = linear_e1()
    val = discrete_qv(BilinearForm.inner(1), X, X, dyadic_sequence(1.0, max(n, 1)).level(n), 1.0)
    assert val == pytest.approx(2.0 ** -n, rel=1e-14)


def test_walk_on_own_grid_is_exact():
    X = generate(PathRecipe("ScaledRandomWalk", 11, horizon=2.0, params={"level": 9}))
    assert discrete_scalar_qv(X, Partition(X.grid), 2.0) == pytest.approx(2.0, abs=1e-12)


def test_linf_single_jump_and_empty_sum():
    X = step_path(1.0, [(0.5, [3.0, 4.0])])
    p = Partition([0.0, 0.25, 1.0])
    assert discrete_scalar_qv(X, p, 1.0, Norm.LINF) == 16.0
    assert discrete_scalar_qv(X, p, 0.0) == 0.0


@settings(max_examples=80, deadline=None)
@given(path_and_partition())
def test_matches_brute_force_loop(case):
    X, Y, part, t = case
    for B in (BilinearForm.inner(X.dim), BilinearForm.outer(X.dim)):
        np.testing.assert_allclose(discrete_qv(B, X, Y, part, t),
                                   brute_qv(B, X, Y, part.points, t), rtol=1e-12, atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(path_and_partition())
def test_symmetry_polarization_trace(case):
    X, Y, part, t = case
    inner, outer = BilinearForm.inner(X.dim), BilinearForm.outer(X.dim)
    assert discrete_qv(inner, X, Y, part, t) == discrete_qv(inner, Y, X, part, t)
    q = lambda Z: discrete_qv(inner, Z, Z, part, t)
    lhs = q(add(X, Y)) + q(add(X, Y, -1.0))
    rhs = 2 * q(X) + 2 * q(Y)
    assert abs(lhs - rhs) <= 1e-12 * (1 + abs(rhs))
    tr = np.trace(discrete_qv(outer, X, X, part, t))
    sc = discrete_scalar_qv(X, part, t)
    assert abs(tr - sc) <= 1e-12 * (1 + abs(sc))


@settings(max_examples=60, deadline=None)
@given(path_and_partition(), st.integers(0, 2**31))
def test_pushforward_and_continuity_in_B(case, seed):
    X, Y, part, t = case
    rng = np.random.default_rng(seed)
    d = X.dim
    B = BilinearForm.coefficients(rng.normal(size=(2, d, d)))
    B2 = BilinearForm.coefficients(B.coeffs + 1e-3 * rng.normal(size=(2, d, d)))
    T = rng.normal(size=(3, 2))
    np.testing.assert_allclose(T @ discrete_qv(B, X, Y, part, t),
                               discrete_qv(B.compose(T), X, Y, part, t), rtol=1e-12, atol=1e-12)
    diff = BilinearForm.coefficients(B.coeffs - B2.coeffs)
    s = np.clip(part.points, 0, t)
    inc_x = np.linalg.norm(np.diff(X.value(s), axis=0), axis=1)
    inc_y = np.linalg.norm(np.diff(Y.value(s), axis=0), axis=1)
    gap = np.linalg.norm(discrete_qv(B, X, Y, part, t) - discrete_qv(B2, X, Y, part, t))
    assert gap <= diff.operator_norm * float(inc_x @ inc_y) * (1 + 1e-6) + 1e-12


@settings(max_examples=50, deadline=None)
@given(path_and_partition())
def test_restart_consistency(case):
    X, _, part, t = case
    B = BilinearForm.outer(X.dim)
    np.testing.assert_allclose(restarted_qv(B, X, part, 0.0, t), discrete_qv(B, X, X, part, t),
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(restarted_qv(B, X, part, t, t), np.zeros(B.shape))


def test_restarted_after_jump_is_zero():
    X = step_path(1.0, [(0.5, [1.0])])
    assert restarted_qv(BilinearForm.inner(1), X, Partition([0, 0.3, 0.7, 1]), 0.6, 1.0) == 0.0
    with pytest.raises(DomainError):
        restarted_qv(BilinearForm.inner(1), X, Partition([0, 1]), 0.7, 0.6)


@settings(max_examples=40, deadline=None)
@given(path_and_partition())
def test_scalar_qv_monotone_in_t(case):
    X, _, part, _ = case
    # clipping inside an interval can shrink a square, so check at the partition points
    vals = discrete_scalar_qv_values(X, part, part.points)
    assert np.all(np.diff(vals) >= -1e-12)


def test_blocked_cumsum_matches_cumsum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5000, 2, 2))
    np.testing.assert_allclose(blocked_cumsum(x), np.cumsum(x, axis=0), rtol=1e-12, atol=1e-10)
    np.testing.assert_array_equal(blocked_cumsum(np.ones(1000)), np.arange(1, 1001))


# -- two-variation and limits ---------------------------------------------------------

def test_two_variation_examples():
    seq = dyadic_sequence(1.0, 8)
    tv = two_variation(linear_e1(), seq, 1.0)
    assert (tv.value, tv.level) == (1.0, 0)
    X = step_path(1.0, [(0.3, [1.0]), (0.6, [2.0])])
    vals = [discrete_scalar_qv(X, p, 1.0) for p in seq]
    assert two_variation(X, seq, 1.0).value == max(vals) >= 5.0
    assert vals[-1] == 5.0
    assert two_variation(CadlagPath([0, 1], [[1.0], [1.0]]), seq, 1.0).value == 0.0


def test_qv_limit_jump_list_is_exact():
    X = step_path(1.0, [(0.3, [0.5]), (0.71, [-0.2])])
    qv, est = qv_limit(BilinearForm.inner(1), X, X, dyadic_sequence(1.0, 14, 8))
    np.testing.assert_array_equal(qv.jump_times, [0.3, 0.71])
    assert qv.jump_values.tolist() == [0.25, 0.2 ** 2]
    assert qv.values[-1] == 0.25 + 0.2 ** 2
    assert est.verdict is Verdict.PASS


def test_qv_limit_fbm_is_inconclusive_at_tight_tol():
    X = generate(PathRecipe("FBM", 2024, params={"hurst": 0.8, "level": 12}))
    qv, est = qv_limit(BilinearForm.inner(1), X, X, dyadic_sequence(1.0, 12, 6), tol=1e-9)
    assert est.verdict is Verdict.INCONCLUSIVE
    assert qv.verdict is Verdict.INCONCLUSIVE


def test_estimate_limit_richardson_exact_on_first_order_tail():
    levels = range(6)
    vals = np.array([[3.0 + 2.0 ** -n] for n in levels])
    est = estimate_limit(levels, [1.0], vals, tol=1e-12, richardson=True)
    assert est.verdict is Verdict.PASS
    assert est.limit[0] == 3.0
    assert estimate_limit(levels, [1.0], vals, tol=1e-12).verdict is Verdict.INCONCLUSIVE


def test_qv_limit_needs_four_levels():
    with pytest.raises(ValueError):
        qv_limit(BilinearForm.inner(1), linear_e1(), linear_e1(), dyadic_sequence(1.0, 3, 1))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        discrete_qv(BilinearForm.inner(2), linear_e1(), linear_e1(), Partition([0, 1]), 1.0)


# -- QV paths and maps ----------------------------------------------------------------

def mixed_qv():
    X = add(generate(PathRecipe("ScaledRandomWalk", 9, params={"level": 8, "dim": 2})),
            step_path(1.0, [(0.4, [1.0, 2.0])]))
    return X, discrete_qv_path(BilinearForm.outer(2), X, X, Partition(X.grid))


def test_split_continuous_jump():
    X, qv = mixed_qv()
    cont, jumps = split_continuous_jump(qv)
    np.testing.assert_array_equal(cont.values + jumps.values, qv.values)
    assert len(cont.jump_times) == 0
    np.testing.assert_array_equal(jumps.jump_values[0], [[1, 2], [2, 4]])
    pure = discrete_qv_path(BilinearForm.inner(1), step_path(1.0, [(0.5, [2.0])]),
                            step_path(1.0, [(0.5, [2.0])]), Partition([0, 0.25, 0.75, 1]))
    assert np.all(pure.split_continuous_jump()[0].values == 0.0)


def test_push_linear_examples():
    X, qv = mixed_qv()
    np.testing.assert_array_equal(push_linear(np.eye(4), qv, (2, 2)).values, qv.values)
    e12 = np.outer([1, 0], [0, 1]).reshape(1, -1)
    np.testing.assert_array_equal(push_linear(e12, qv, ()).values, qv.values[:, 0, 1])
    tr = trace_qv(qv)
    np.testing.assert_allclose(tr.values, discrete_scalar_qv_values(X, Partition(X.grid), qv.times),
                               rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        trace_qv(qv, Norm.L1)


def test_cylindrical_examples():
    X, qv = mixed_qv()
    np.testing.assert_array_equal(cylindrical_qv([1, 0], [0, 1], qv).values, qv.values[:, 0, 1])
    np.testing.assert_array_equal(cylindrical_qv([1, 0], [1, 0], qv).values, qv.values[:, 0, 0])
    J = step_path(1.0, [(0.5, [1.0, 2.0])])
    jq = discrete_qv_path(BilinearForm.outer(2), J, J, Partition([0, 1]))
    # hand arithmetic: (1 + 2) * (1 - 2)
    assert cylindrical_qv([1, 1], [1, -1], jq).values[-1] == -3.0
    cylindrical_qv([1, 2], [0.5, -1], qv, check=(X, X, dyadic_sequence(1.0, 8, 4)))


def test_push_pair_projection_and_rotation():
    X, _ = mixed_qv()
    seq = dyadic_sequence(1.0, 8, 4)
    proj = np.array([[1.0, 0.0]])
    res = push_pair(proj, proj, X, X, BilinearForm.inner(1), seq)
    first = linear_map(X, proj)
    np.testing.assert_allclose(res.qv.values[-1], discrete_scalar_qv(first, seq.finest, 1.0))
    R = np.array([[0.6, -0.8], [0.8, 0.6]])
    res = push_pair(R, R, X, X, BilinearForm.inner(2), seq)
    assert res.max_discrepancy <= 1e-12 * (1 + np.max(np.abs(res.qv.values)))


def test_qv_path_only_known_at_reporting_times():
    _, qv = mixed_qv()
    with pytest.raises(DomainError):
        qv.at(0.123456789)


# -- absolute continuity and densities ------------------------------------------------

def test_abs_continuity_pure_jump_equality():
    J = step_path(1.0, [(0.5, [1.0, 2.0])])
    p = Partition([0, 0.25, 0.75, 1])
    tq = discrete_qv_path(BilinearForm.outer(2), J, J, p)
    sq = discrete_qv_path(BilinearForm.inner(2), J, J, p)
    rep = abs_continuity_check(tq, sq, 1.0, [(0.0, 1.0)])
    assert rep.lhs[0] == pytest.approx(rep.rhs[0], rel=1e-14) == 5.0
    assert rep.ok
    Z = CadlagPath([0, 1], np.zeros((2, 2)))
    zq = discrete_qv_path(BilinearForm.outer(2), Z, Z, p)
    zs = discrete_qv_path(BilinearForm.inner(2), Z, Z, p)
    assert abs_continuity_check(zq, zs, 1.0, [(0.0, 1.0)]).lhs[0] == 0.0


@settings(max_examples=30, deadline=None)
@given(path_and_partition(), st.sampled_from(list(Crossnorm)))
def test_abs_continuity_bound_property(case, kind):
    X, _, part, _ = case
    tq = discrete_qv_path(BilinearForm.outer(X.dim, kind), X, X, part)
    sq = discrete_qv_path(BilinearForm.inner(X.dim), X, X, part)
    n = len(tq.times)
    pairs = [(tq.times[i], tq.times[j]) for i in range(n) for j in range(i, n)]
    assert abs_continuity_check(tq, sq, 1.0, pairs, slack=1e-12).ok


def test_density_one_dimensional_walk_is_one():
    X = generate(PathRecipe("ScaledRandomWalk", 8, params={"level": 10}))
    p = Partition(X.grid)
    tq = discrete_qv_path(BilinearForm.outer(1), X, X, p)
    sq = discrete_qv_path(BilinearForm.inner(1), X, X, p)
    dens = density_estimate(tq, sq, np.linspace(0, 1, 17))
    np.testing.assert_allclose(dens.q[:, 0, 0], 1.0, rtol=1e-12)
    np.testing.assert_allclose(dens.reconstruct()[-1], tq.values[-1], rtol=1e-12)
    rep = unit_density_check(dens, tq, sq)
    assert rep.max_deviation <= 1e-12


def test_density_twin_walk_half_ones():
    W = generate(PathRecipe("ScaledRandomWalk", 8, params={"level": 10}))
    X = linear_map(W, [[1.0], [1.0]])
    p = Partition(X.grid)
    tq = discrete_qv_path(BilinearForm.outer(2), X, X, p)
    sq = discrete_qv_path(BilinearForm.inner(2), X, X, p)
    dens = density_estimate(tq, sq, np.linspace(0, 1, 9))
    np.testing.assert_allclose(dens.q, np.full((8, 2, 2), 0.5), rtol=1e-12)
    np.testing.assert_allclose(dens.norms(), 1.0, rtol=1e-12)


def test_density_no_mass_errors():
    C = CadlagPath([0, 1], [[1.0], [1.0]])
    p = Partition([0, 0.5, 1])
    tq = discrete_qv_path(BilinearForm.outer(1), C, C, p)
    with pytest.raises(DomainError):
        density_estimate(tq, discrete_qv_path(BilinearForm.inner(1), C, C, p), [0, 0.5, 1])


def test_push_linear_rejects_wrong_width():
    _, qv = mixed_qv()
    with pytest.raises(ValueError):
        push_linear(np.ones((1, 3)), qv)
    assert isinstance(IdentityViolation("x"), AssertionError)
