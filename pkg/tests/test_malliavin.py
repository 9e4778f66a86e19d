"""Sensitivity-table and anticipating-integral tests.

Two independent code paths exist for every correction term: direct per-node
formulas (quadratic in the step count) and the factored batched assembly
(linear in the step count).  The heart of this file checks that they agree
to near machine precision, and that on an exactly solvable linear model the
whole pipeline reduces to a short pure-python recursion.
"""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathscore.malliavin import (
    compute_bundle_batch,
    covering_field,
    covering_field_frozen,
    covering_inner_product,
    dt_first_variation,
    dt_gamma,
    dt_gamma_split,
    dt_inverse_variation,
    malliavin_covariance,
    malliavin_derivative_state,
    omega,
    skorokhod_batch,
    skorokhod_integral_general,
    skorokhod_integral_state_independent,
    theta,
)
from pathscore.models import make_model
from pathscore.paths import (
    TimeGrid,
    sample_brownian,
    sample_brownian_block,
    simulate_variation_batch,
    simulate_variations,
)


def _traj(name, steps, seed, x0, params=None, path_index=0):
    model = make_model(name, params)
    grid = TimeGrid(horizon=1.0, steps=steps)
    p = sample_brownian(grid, model.d, seed=seed, path_index=path_index)
    return simulate_variations(model, grid, p, x0=x0)


def _left_sigma(traj):
    N = traj.grid.steps
    t_left = traj.grid.nodes()[:N]
    return traj.model.sigma(t_left, traj.X[:N])


def _ou_pure_python(dt, inc, theta_, sigma0, x0):
    """Replicate the full pipeline for linear drift with scalar recursions."""
    N = len(inc)
    X, Y, Yi = [x0], [1.0], [1.0]
    for n in range(N):
        X.append(X[-1] + (-theta_ * X[-1]) * dt + sigma0 * inc[n])
        Y.append(Y[-1] + (-theta_ * Y[-1]) * dt)
        Yi.append(Yi[-1] + (theta_ * Yi[-1]) * dt)
    V = [Yi[n] * sigma0 for n in range(N)]
    W = [Y[N] * v for v in V]
    gamma = dt * sum(w * w for w in W)
    ito = (Y[N] / gamma) * sum(V[n] * inc[n] for n in range(N))
    return np.array(X), np.array(Y), gamma, ito


class TestBundle:
    def test_linear_pipeline_matches_scalar_recursion(self):
        grid = TimeGrid(horizon=1.0, steps=8)
        p = sample_brownian(grid, 1, seed=3, path_index=0)
        model = make_model("ornstein_uhlenbeck", {"theta": 1.3, "sigma0": 0.7})
        traj = simulate_variations(model, grid, p, x0=[0.4])
        X_ref, Y_ref, gamma_ref, ito_ref = _ou_pure_python(
            grid.dt, p.increments[:, 0], 1.3, 0.7, 0.4
        )
        npt.assert_allclose(traj.X[:, 0], X_ref, rtol=1e-13)
        npt.assert_allclose(traj.Y[:, 0, 0], Y_ref, rtol=1e-13)
        bundle = malliavin_covariance(traj)
        npt.assert_allclose(bundle.gamma[0, 0], gamma_ref, rtol=1e-12)
        out = skorokhod_batch(traj.as_batch(), compute_bundle_batch(traj.as_batch()))
        npt.assert_allclose(out["total"][0, 0], ito_ref, rtol=1e-12)

    def test_terminal_row_of_sensitivity_table(self):
        traj = _traj("state_dependent_tanh", 32, 5, [0.2])
        bundle = malliavin_covariance(traj)
        N = traj.grid.steps
        for i in (0, 7, N):
            npt.assert_allclose(
                bundle.dX_table[i], malliavin_derivative_state(traj, i), rtol=1e-14
            )
        with pytest.raises(IndexError, match="node"):
            malliavin_derivative_state(traj, N + 1)

    def test_gram_matrix_symmetric_positive(self):
        traj = _traj("linear_multidim", 64, 9, [0.3, -0.2])
        bundle = malliavin_covariance(traj)
        npt.assert_allclose(bundle.gamma, bundle.gamma.T, rtol=1e-12)
        eigs = np.linalg.eigvalsh(bundle.gamma)
        assert eigs.min() > 0
        npt.assert_allclose(bundle.gamma @ bundle.gamma_inv, np.eye(2), atol=1e-12)
        assert not bundle.singular
        assert bundle.cond < 1e4

    def test_discrete_gram_near_continuous_value(self):
        # For unit mean reversion and unit noise over unit time the continuous
        # Gram value is (1 - e^{-2})/2; the scheme sits within O(dt) of it.
        traj = _traj("ornstein_uhlenbeck", 256, 11, [0.0])
        bundle = malliavin_covariance(traj)
        assert abs(bundle.gamma[0, 0] - 0.43233235838169365) < 0.01

    def test_zero_noise_flags_singular(self):
        traj = _traj("ornstein_uhlenbeck", 16, 1, [0.5], params={"sigma0": 0.0})
        with np.errstate(invalid="ignore", divide="ignore"):
            bundle = malliavin_covariance(traj)
        assert bundle.singular
        assert np.all(np.isnan(bundle.gamma_inv))
        with pytest.raises(ValueError, match="near-singular"):
            skorokhod_integral_general(traj, bundle, 0)
        with pytest.raises(ValueError, match="near-singular"):
            covering_field(traj, bundle, 0, 0)
        with pytest.raises(ValueError, match="near-singular"):
            covering_inner_product(traj, bundle, 0, 0)

    def test_blown_up_path_refused_for_integrals(self):
        model = make_model("ornstein_uhlenbeck", {"theta": 600.0})
        grid = TimeGrid(horizon=1.0, steps=256)
        p = sample_brownian(grid, 1, seed=1, path_index=0)
        traj = simulate_variations(model, grid, p, x0=[1e308])
        assert not traj.valid
        with np.errstate(invalid="ignore"):
            bundle = malliavin_covariance(traj)
        assert bundle.singular
        out = skorokhod_batch(traj.as_batch(), compute_bundle_batch(traj.as_batch()))
        assert np.all(np.isnan(out["total"]))


class TestCoveringFields:
    @pytest.mark.parametrize(
        "name,x0",
        [
            ("ornstein_uhlenbeck", [0.0]),
            ("bounded_nonlinear_drift", [0.0]),
            ("state_dependent_tanh", [0.5]),
            ("linear_multidim", [0.3, -0.2]),
        ],
    )
    def test_inner_products_pick_out_components(self, name, x0):
        traj = _traj(name, 64, 12, x0)
        bundle = malliavin_covariance(traj)
        m = traj.model.m
        for i_comp in range(m):
            for k in range(m):
                ip = covering_inner_product(traj, bundle, i_comp, k)
                assert abs(ip - (1.0 if i_comp == k else 0.0)) < 1e-10

    def test_field_is_frozen_field_at_gram_direction(self):
        traj = _traj("linear_multidim", 32, 2, [0.1, 0.1])
        bundle = malliavin_covariance(traj)
        u = covering_field(traj, bundle, 1, 10)
        w = covering_field_frozen(traj, bundle.F[:, 1], 10)
        assert np.array_equal(u, w)
        with pytest.raises(ValueError, match="shape"):
            covering_field_frozen(traj, np.zeros(3), 0)

    @settings(max_examples=25, deadline=None)
    @given(
        st.floats(min_value=-3, max_value=3),
        st.floats(min_value=-3, max_value=3),
        st.integers(min_value=0, max_value=32),
    )
    def test_frozen_field_is_linear_in_the_vector(self, a, b, i):
        traj = _LINEAR_TRAJ
        x1 = np.array([1.0, -0.5])
        x2 = np.array([0.3, 2.0])
        lhs = covering_field_frozen(traj, a * x1 + b * x2, i)
        rhs = a * covering_field_frozen(traj, x1, i) + b * covering_field_frozen(traj, x2, i)
        npt.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


_LINEAR_TRAJ = _traj("linear_multidim", 32, 8, [0.2, -0.1])


class TestNoiseDerivatives:
    def test_two_code_paths_for_terminal_kernel_agree(self):
        for name, x0 in [("state_dependent_tanh", [0.3]), ("linear_multidim", [0.2, 0.1])]:
            traj = _traj(name, 24, 6, x0)
            for i in (0, 5, 23):
                npt.assert_allclose(
                    omega(traj, i), dt_first_variation(traj, i), rtol=1e-11, atol=1e-13
                )

    def test_inverse_variation_derivative_is_causal(self):
        traj = _traj("state_dependent_tanh", 24, 6, [0.3])
        assert np.all(dt_inverse_variation(traj, 10, 4) == 0.0)
        got = dt_inverse_variation(traj, 4, 10)
        assert got.shape == (1, 1, 1)
        assert np.any(got != 0.0)

    def test_inverse_variation_derivative_from_product_rule(self):
        # D(Yinv) must equal -Yinv (D Y) Yinv at the same node.
        traj = _traj("state_dependent_tanh", 24, 7, [0.1])
        N = traj.grid.steps
        dY = dt_first_variation(traj, 5)
        dYinv = dt_inverse_variation(traj, 5, N)
        want = -traj.Yinv[N] @ dY[0] @ traj.Yinv[N]
        npt.assert_allclose(dYinv[0], want, rtol=1e-12)

    def test_index_validation(self):
        traj = _traj("state_dependent_tanh", 16, 6, [0.3])
        with pytest.raises(IndexError):
            dt_first_variation(traj, 16)
        with pytest.raises(IndexError):
            dt_inverse_variation(traj, -1, 4)
        with pytest.raises(ValueError, match="i <= s"):
            theta(traj, 8, 3)
        with pytest.raises(IndexError):
            omega(traj, 16)

    def test_gram_derivative_split_boundaries(self):
        traj = _traj("bounded_nonlinear_drift", 16, 4, [0.5])
        bundle = malliavin_covariance(traj)
        lower0, upper0 = dt_gamma_split(traj, bundle, 0)
        assert np.all(lower0 == 0.0)
        assert np.any(upper0 != 0.0)
        total = dt_gamma(traj, bundle, 3)
        lo, up = dt_gamma_split(traj, bundle, 3)
        npt.assert_allclose(total, lo + up, rtol=1e-14)
        # The Gram derivative inherits the symmetry of the Gram matrix.
        npt.assert_allclose(total[0], total[0].T, rtol=1e-12)


@pytest.mark.parametrize(
    "name,x0",
    [("bounded_nonlinear_drift", [0.5]), ("state_dependent_tanh", [0.3])],
)
def test_factored_corrections_match_direct_formulas(name, x0):
    """The O(N) assembly must reproduce per-node evaluation of every term."""
    traj = _traj(name, 16, 42, x0)
    batch = traj.as_batch()
    bundle = malliavin_covariance(traj)
    bb = compute_bundle_batch(batch)
    out = skorokhod_batch(batch, bb)

    N, dt = traj.grid.steps, traj.grid.dt
    gi = bundle.gamma_inv
    V = np.einsum("nij,njl->nil", traj.Yinv[:N], _left_sigma(traj))

    a_direct = np.zeros(traj.model.m)
    b_direct = np.zeros(traj.model.m)
    c_direct = np.zeros(traj.model.m)
    for n in range(N):
        Om = dt_first_variation(traj, n)
        a_direct += dt * np.einsum("jl,lpj,pk->k", V[n], Om, gi)
        lower, upper = dt_gamma_split(traj, bundle, n)
        u_all = np.einsum("jl,ja->al", V[n], bundle.F)
        b_direct += dt * np.einsum("al,laq,qk->k", u_all, lower, gi)
        c_direct += dt * np.einsum("al,laq,qk->k", u_all, upper, gi)

    npt.assert_allclose(out["a"][0], a_direct, rtol=1e-10, atol=1e-13)
    npt.assert_allclose(out["b"][0], b_direct, rtol=1e-10, atol=1e-13)
    npt.assert_allclose(out["c"][0], c_direct, rtol=1e-10, atol=1e-13)
    npt.assert_allclose(
        out["total"][0],
        out["ito"][0] - a_direct + b_direct + c_direct,
        rtol=1e-9,
        atol=1e-12,
    )


class TestIntegralStructure:
    @pytest.mark.parametrize("name", ["ornstein_uhlenbeck", "linear_multidim"])
    def test_linear_models_have_no_corrections(self, name):
        # Zero flow curvature and constant noise kill every correction term.
        model = make_model(name)
        grid = TimeGrid(horizon=1.0, steps=32)
        inc = sample_brownian_block(grid, model.d, seed=14, first_path=0, n_paths=8)
        batch = simulate_variation_batch(model, grid, inc, x0=np.zeros(model.m))
        bb = compute_bundle_batch(batch)
        out = skorokhod_batch(batch, bb)
        assert np.all(out["a"] == 0.0)
        assert np.all(out["b"] == 0.0)
        assert np.all(out["c"] == 0.0)
        npt.assert_allclose(out["total"], out["ito"], rtol=0, atol=0)

    def test_drift_curvature_produces_corrections(self):
        traj = _traj("bounded_nonlinear_drift", 32, 15, [0.5])
        bb = compute_bundle_batch(traj.as_batch())
        out = skorokhod_batch(traj.as_batch(), bb)
        assert out["a"][0, 0] != 0.0

    def test_pruned_and_general_assembly_agree_when_noise_is_flat(self):
        model = make_model("bounded_nonlinear_drift")
        grid = TimeGrid(horizon=1.0, steps=64)
        inc = sample_brownian_block(grid, 1, seed=16, first_path=0, n_paths=16)
        batch = simulate_variation_batch(model, grid, inc, x0=[0.0])
        bb = compute_bundle_batch(batch)
        general = skorokhod_batch(batch, bb, prune=False)
        reduced = skorokhod_batch(batch, bb, prune=True)
        for key in ("ito", "a", "b", "c", "total"):
            npt.assert_array_equal(general[key], reduced[key])

    def test_single_path_breakdown_consistency(self):
        traj = _traj("bounded_nonlinear_drift", 32, 17, [0.2])
        bundle = malliavin_covariance(traj)
        rep_g = skorokhod_integral_general(traj, bundle, 0)
        rep_s = skorokhod_integral_state_independent(traj, bundle, 0)
        assert rep_g.total == rep_s.total
        assert rep_g.total == pytest.approx(
            rep_g.ito - rep_g.a_term + rep_g.b_term + rep_g.c_term, rel=1e-12
        )
        assert rep_g.gamma_cond == bundle.cond
        assert rep_g.k == 0

    def test_reduced_assembly_refused_for_state_dependent_noise(self):
        traj = _traj("state_dependent_tanh", 16, 18, [0.3])
        bundle = malliavin_covariance(traj)
        with pytest.raises(ValueError, match="state-dependent"):
            skorokhod_integral_state_independent(traj, bundle, 0)

    def test_direction_index_validated(self):
        traj = _traj("ornstein_uhlenbeck", 16, 19, [0.0])
        bundle = malliavin_covariance(traj)
        with pytest.raises(IndexError, match="direction"):
            skorokhod_integral_general(traj, bundle, 1)
