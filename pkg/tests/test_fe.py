"""Feasible-extension synthesis, certification, and refinement cuts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpopt.fe import (
    CandidatePoint,
    Extension,
    RowCertificate,
    _certify_fixed,
    _single_coordinate_formula,
    _synthesis_program,
    extension_cut,
    normalize_candidate,
    sample_shared_points,
    synthesize_extension,
    verify_extension,
)
from bpopt.model import ModelError, build_problem
from bpopt.poly import Polynomial

# affine data; the valid extension holds the first coordinate at zero and
# passes the second through untouched
LINEAR_FE = """
vars x 2 y 2
upper.obj: x1
upper.ineq: 2 - x1 - x2
upper.ineq: x1
upper.ineq: x2
lower.obj: z1 + z2
lower.ineq: -z1 + z2 + 2*x1 - 2.5
lower.ineq: -z2 - x1 + 3*x2 + 2
lower.ineq: z1
lower.ineq: z2
"""

# quadratic data; constants fail inside the unit disc around (1, 0), so the
# synthesizer has to produce a genuinely x-dependent map
QUAD_FE = """
vars x 2 y 2
upper.obj: x1
upper.ineq: 4 - x1^2 - 2*x2
upper.ineq: x1
upper.ineq: x2
lower.obj: z1 + z2
lower.ineq: -2*z1 + z2 + x1^2 - 2*x1 + x2^2 + 3
lower.ineq: 3*z1 - 4*z2 + x2 - 4
lower.ineq: z1
lower.ineq: z2
"""

SINGLE_BOUND = """
vars x 1 y 1
upper.obj: x1
lower.obj: (z1 - x1)^2
lower.ineq: z1 - x1^2 - 1
"""

BOX = """
vars x 1 y 1
upper.obj: x1
lower.obj: z1
lower.ineq: z1 - x1
lower.ineq: x1 + 2 - z1
"""

SIMPLEX = """
vars x 1 y 2
upper.obj: x1
lower.obj: z1 + z2
lower.ineq: z1
lower.ineq: z2
lower.ineq: 1 + x1^2 - z1 - z2
"""

PAIRED = """
vars x 1 y 2
upper.obj: x1
lower.obj: z1
lower.ineq: z1 + z2 - x1
lower.ineq: x1 + 2 - z1 - z2
lower.ineq: z1 - z2 + 1
lower.ineq: 1 - z1 + z2
"""

RATIONAL_OBJ = """
vars x 1 y 1
upper.obj: x1
lower.obj: (z1 + 1) / (z1 + 3)
lower.ineq: z1 - x1
"""


def cand(x, y, z):
    return CandidatePoint(
        x=np.asarray(x, float), y=np.asarray(y, float), z=np.asarray(z, float)
    )


def xv(space, i):
    return Polynomial.variable(space, i)


def yv(space, i):
    return Polynomial.variable(space, space.n_upper + i)


# ---------------------------------------------------------------------------
# designated affine case


def test_linear_designated_extension():
    prob = build_problem(LINEAR_FE)
    pt = cand([1, 1], [3.5, 4], [0, 4])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    q1, q2 = ext.components
    assert q1.almost_equal(Polynomial.zero(prob.space), tol=1e-6)
    assert q2.almost_equal(yv(prob.space, 1), tol=1e-6)
    report = verify_extension(prob, ext, pt)
    assert report.ok, report
    assert report.sample_count >= 100


def test_linear_synthesis_program_direct():
    # bypass the pattern stage and force the LP synthesizer
    prob = build_problem(LINEAR_FE)
    pt = cand([1, 1], [3.5, 4], [0, 4])
    ext = _synthesis_program(prob, pt, 1)
    assert ext is not None
    assert ext.method == "linear"
    report = verify_extension(prob, ext, pt)
    assert report.ok, report


# ---------------------------------------------------------------------------
# designated quadratic case


def quad_reference_components(space):
    x1, x2 = xv(space, 0), xv(space, 1)
    q1 = 0.8 * x1**2 - 1.6 * x1 + 0.2 * x2 + 0.8 * x2**2 + 1.6
    q2 = 0.6 * x1**2 - 1.2 * x1 + 0.4 * x2 + 0.6 * x2**2 + 0.2
    return q1, q2


def test_quadratic_reference_extension_certifies():
    # known valid extension: interpolation values and the row certificates
    # were checked by hand (rows 1 and 2 vanish identically under it)
    prob = build_problem(QUAD_FE)
    pt = cand([1, 1], [1.5, 0], [1.8, 0.6])
    q1, q2 = quad_reference_components(prob.space)
    combined = pt.combined()
    assert abs(q1.evaluate(combined) - 1.8) < 1e-12
    assert abs(q2.evaluate(combined) - 0.6) < 1e-12
    certs = _certify_fixed(prob, [q1, q2])
    assert certs is not None
    ext = Extension((q1, q2), "pattern", certs)
    report = verify_extension(prob, ext, pt)
    assert report.ok, report


def test_quadratic_designated_extension():
    # both nontrivial rows are tight at z^, so the active-set construction
    # recovers the reference map exactly
    prob = build_problem(QUAD_FE)
    pt = cand([1, 1], [1.5, 0], [1.8, 0.6])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    assert ext.method == "active"
    q1_ref, q2_ref = quad_reference_components(prob.space)
    assert ext.components[0].almost_equal(q1_ref, tol=1e-6)
    assert ext.components[1].almost_equal(q2_ref, tol=1e-6)
    report = verify_extension(prob, ext, pt)
    assert report.ok, report
    combined = pt.combined()
    for comp, want in zip(ext.components, pt.z):
        assert abs(comp.evaluate(combined) - want) < 1e-9


def test_quadratic_synthesis_program_direct():
    prob = build_problem(QUAD_FE)
    pt = cand([1, 1], [1.5, 0], [1.8, 0.6])
    ext = _synthesis_program(prob, pt, 2)
    assert ext is not None
    assert ext.method == "quadratic"
    report = verify_extension(prob, ext, pt)
    assert report.ok, report


def test_constant_map_rejected_on_quadratic_data():
    # the all-constant proposal violates row 3 inside the disc, so whatever
    # comes back must not be the constant map
    prob = build_problem(QUAD_FE)
    pt = cand([1, 1], [1.5, 0], [1.8, 0.6])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    assert any(not comp.is_constant() for comp in ext.components)


# ---------------------------------------------------------------------------
# pattern formulas


def test_single_bound_follows_the_constraint():
    prob = build_problem(SINGLE_BOUND)
    pt = cand([0], [3], [2])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    assert ext.method == "pattern"
    x1 = xv(prob.space, 0)
    assert ext.components[0].almost_equal(x1**2 + 2.0, tol=1e-9)
    assert verify_extension(prob, ext, pt).ok


def test_box_interpolates_between_bounds():
    prob = build_problem(BOX)
    pt = cand([1], [1.5], [1.8])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    assert ext.method == "pattern"
    x1 = xv(prob.space, 0)
    assert ext.components[0].almost_equal(x1 + 0.8, tol=1e-9)
    assert verify_extension(prob, ext, pt).ok


def test_pinched_interval_collapses_to_the_bound():
    src = """
vars x 1 y 1
upper.obj: x1
lower.obj: z1
lower.ineq: z1 - x1
lower.ineq: x1 - z1
"""
    prob = build_problem(src)
    pt = cand([1], [1], [1])
    formula = _single_coordinate_formula(prob, 0, pt)
    assert formula is not None
    assert formula.almost_equal(xv(prob.space, 0), tol=1e-9)


def test_identity_coordinate_passes_through():
    prob = build_problem(BOX)
    pt = cand([1], [1.5], [1.5])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    assert ext.components[0].almost_equal(yv(prob.space, 0), tol=1e-12)


def test_simplex_pattern():
    prob = build_problem(SIMPLEX)
    pt = cand([1], [0, 0], [0.5, 1.0])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    assert ext.method == "simplex"
    x1 = xv(prob.space, 0)
    assert ext.components[0].almost_equal(0.25 * (1.0 + x1**2), tol=1e-9)
    assert ext.components[1].almost_equal(0.5 * (1.0 + x1**2), tol=1e-9)
    assert verify_extension(prob, ext, pt).ok


def test_paired_rows_use_transformed_box():
    prob = build_problem(PAIRED)
    pt = cand([1], [1, 1], [1.6, 0.9])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    assert ext.method == "coordinate"
    x1 = xv(prob.space, 0)
    assert ext.components[0].almost_equal(0.5 * x1 + 1.1, tol=1e-9)
    assert ext.components[1].almost_equal(0.5 * x1 + 0.4, tol=1e-9)
    assert verify_extension(prob, ext, pt).ok


# bilinear lower objective over a band; both loop candidates of the
# reference refinement run are reproduced by the active-set construction
ACTIVE_LOOP = """
vars x 4 y 2
upper.obj: x1
upper.ineq: x1
upper.ineq: x2
upper.ineq: x3
upper.ineq: x4
upper.ineq: y1 + 1
upper.ineq: y2
upper.ineq: 4 - x1 - x2 - x3 - x4 - y1 - y2
lower.obj: (x3 - z1 - 1)*(x4 - z2 + 1) - z1^2 - z2^2
lower.ineq: z1 - x1 + 1
lower.ineq: z1 + z2 + x1 - 1
lower.ineq: 1.5 - z1 - x1
lower.ineq: -1 + x2 + z2
lower.ineq: 3 - x1 - z1 - z2
"""


def test_active_set_resolves_pinched_pair_by_least_squares():
    # rows 1 and 3 pinch z1 at the candidate and row 5 is tight; the least
    # squares solve freezes the pinched coordinate and follows row 5
    prob = build_problem(ACTIVE_LOOP)
    pt = cand([1.25, 1.0, 0.75, 0.75], [0.25, 0.0], [0.25, 1.5])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    assert ext.method == "active"
    x1 = xv(prob.space, 0)
    one = Polynomial.const(prob.space, 1.0)
    assert ext.components[0].almost_equal(0.25 * one, tol=1e-9)
    assert ext.components[1].almost_equal(2.75 * one - x1, tol=1e-9)
    assert verify_extension(prob, ext, pt).ok


def test_active_set_solves_square_tight_system():
    prob = build_problem(ACTIVE_LOOP)
    pt = cand(
        [0.9337, 1.0, 0.0, 1.4356], [0.5663, 0.0], [-0.0663, 2.1326]
    )
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    assert ext.method == "active"
    x1 = xv(prob.space, 0)
    one = Polynomial.const(prob.space, 1.0)
    assert ext.components[0].almost_equal(x1 - one, tol=1e-9)
    assert ext.components[1].almost_equal(4.0 * one - 2.0 * x1, tol=1e-9)
    assert verify_extension(prob, ext, pt).ok


# ---------------------------------------------------------------------------
# guards, verification, sampling


def test_lower_equalities_must_be_eliminated_first():
    src = """
vars x 1 y 1
upper.obj: x1
lower.obj: z1
lower.eq: z1 - x1
"""
    prob = build_problem(src)
    with pytest.raises(ModelError):
        synthesize_extension(prob, cand([1], [1], [1]))


def test_verify_rejects_invalid_certificate():
    src = """
vars x 1 y 1
upper.obj: x1
lower.obj: z1
lower.ineq: z1
"""
    prob = build_problem(src)
    bad = Extension(
        components=(Polynomial.const(prob.space, -1.0),),
        method="constant",
        certificates=(
            RowCertificate(
                offset=-1.0,
                upper_weights=np.zeros(0),
                row_weights=np.zeros(1),
                psd=None,
            ),
        ),
    )
    report = verify_extension(prob, bad, cand([1], [1], [-1]))
    assert not report.ok
    assert report.min_weight < 0
    assert report.worst_sample_violation > 1e-7


def test_verify_rejects_wrong_interpolation():
    prob = build_problem(BOX)
    pt = cand([1], [1.5], [1.8])
    ext = synthesize_extension(prob, pt)
    shifted = CandidatePoint(x=pt.x, y=pt.y, z=pt.z + 0.25)
    report = verify_extension(prob, ext, shifted)
    assert not report.ok
    assert report.interpolation_error > 1e-3


def test_sampling_respects_shared_constraints():
    prob = build_problem(BOX)
    pts = sample_shared_points(prob, 300, seed=3)
    assert pts.shape[0] >= 100
    for row in pts[:50]:
        assert prob.shared_feasibility_residual(row) <= 1e-7


def test_sampling_projects_affine_upper_equalities():
    src = """
vars x 2 y 1
upper.obj: x1
upper.eq: x1 + x2 - 2
lower.obj: z1
lower.ineq: z1
"""
    prob = build_problem(src)
    pts = sample_shared_points(prob, 200, seed=5)
    assert pts.shape[0] >= 50
    assert np.max(np.abs(pts[:, 0] + pts[:, 1] - 2.0)) <= 1e-9


def test_normalize_candidate_snaps_to_structure():
    prob = build_problem(BOX)
    pt = cand([1.0], [1.5], [1.5 + 2e-6])
    snapped = normalize_candidate(prob, pt)
    assert snapped.z[0] == 1.5
    pt2 = cand([1.0], [1.5], [1.0 + 3e-6])  # near the lower bound x1
    snapped2 = normalize_candidate(prob, pt2)
    assert snapped2.z[0] == 1.0


def test_synthesis_is_deterministic():
    prob = build_problem(QUAD_FE)
    pt = cand([1, 1], [1.5, 0], [1.8, 0.6])
    a = synthesize_extension(prob, pt)
    b = synthesize_extension(prob, pt)
    assert a is not None and b is not None
    assert a.method == b.method
    for ca, cb in zip(a.components, b.components):
        assert ca.almost_equal(cb, tol=1e-9)


# ---------------------------------------------------------------------------
# refinement cuts


def test_cut_for_polynomial_objective():
    prob = build_problem(SINGLE_BOUND)
    pt = cand([0], [3], [2])
    ext = synthesize_extension(prob, pt)
    cut, den = extension_cut(prob, ext)
    assert den is None
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.uniform(-2, 2, size=2)
        qv = x * x + 2.0
        want = (qv - x) ** 2 - (y - x) ** 2
        assert abs(cut.evaluate([x, y]) - want) < 1e-9


def test_cut_for_rational_objective():
    prob = build_problem(RATIONAL_OBJ)
    pt = cand([0], [1], [0])
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    num, den = extension_cut(prob, ext)
    assert den is not None
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, y = rng.uniform(0, 2, size=2)
        qv = ext.components[0].evaluate([x, y])
        want = (qv + 1) / (qv + 3) - (y + 1) / (y + 3)
        got = num.evaluate([x, y]) / den.evaluate([x, y])
        assert abs(got - want) < 1e-9


def test_cut_negative_at_rejected_candidate():
    # the candidate keeps y away from the lower optimum, so the cut must
    # exclude it while staying nonnegative on truly feasible points
    prob = build_problem(SINGLE_BOUND)
    pt = cand([0], [3], [1])  # lower optimum of (z - 0)^2 over z >= 1
    ext = synthesize_extension(prob, pt)
    cut, _ = extension_cut(prob, ext)
    assert cut.evaluate([0.0, 3.0]) < -1e-6
    assert cut.evaluate([0.0, 1.0]) > -1e-12


# ---------------------------------------------------------------------------
# property: random boxes always synthesize a verified extension


@settings(max_examples=25, deadline=None)
@given(
    lo1=st.floats(-2, 0),
    lo2=st.floats(-2, 0),
    w1=st.floats(0.5, 3),
    w2=st.floats(0.5, 3),
    fz1=st.floats(0.1, 0.9),
    fz2=st.floats(0.1, 0.9),
    fy1=st.floats(0.1, 0.9),
    fy2=st.floats(0.1, 0.9),
)
def test_box_extensions_always_verify(lo1, lo2, w1, w2, fz1, fz2, fy1, fy2):
    src = f"""
vars x 1 y 2
upper.obj: x1
lower.obj: z1 + z2
lower.ineq: z1 - {lo1}
lower.ineq: {lo1 + w1} - z1
lower.ineq: z2 - {lo2}
lower.ineq: {lo2 + w2} - z2
"""
    prob = build_problem(src)
    y = [lo1 + fy1 * w1, lo2 + fy2 * w2]
    z = [lo1 + fz1 * w1, lo2 + fz2 * w2]
    pt = cand([0.5], y, z)
    ext = synthesize_extension(prob, pt)
    assert ext is not None
    report = verify_extension(prob, ext, pt, n_samples=300)
    assert report.ok, report
