import numpy as np
import pytest

from smrates import (
    BackwardState,
    CIRParams,
    DegenerateBackwardError,
    GridCoverageError,
    LatticeWorkspace,
    RegimeRateModel,
    SemiMarkovKernel,
    SojournDistribution,
    SolverConfig,
    alternating_kernel,
    covariance,
    covariance_surface,
    evaluate_product_moment,
    evaluate_rate_mean,
    evaluate_zcb_moment,
    solve_product_moment,
    solve_rate_mean,
    solve_zcb_moment,
)


@pytest.fixture(scope="module")
def solved_single(kern_single, vas_single, cfg_fast):
    ws = LatticeWorkspace(kern_single, vas_single, cfg_fast)
    v1 = solve_zcb_moment(1, kern_single, vas_single, cfg_fast, workspace=ws)
    r = solve_rate_mean(kern_single, vas_single, cfg_fast, workspace=ws)
    xi = solve_product_moment(0.5, kern_single, vas_single, cfg_fast,
                              rate_mean_surface=r, workspace=ws)
    return ws, v1, r, xi


@pytest.fixture(scope="module")
def solved_testbed(kern_testbed, vas_testbed, cfg_fast):
    ws = LatticeWorkspace(kern_testbed, vas_testbed, cfg_fast)
    v1 = solve_zcb_moment(1, kern_testbed, vas_testbed, cfg_fast, workspace=ws)
    v2 = solve_zcb_moment(2, kern_testbed, vas_testbed, cfg_fast, workspace=ws)
    r = solve_rate_mean(kern_testbed, vas_testbed, cfg_fast, workspace=ws)
    xi = solve_product_moment(0.5, kern_testbed, vas_testbed, cfg_fast,
                              rate_mean_surface=r, workspace=ws)
    return ws, v1, v2, r, xi


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(step=-0.01)
    with pytest.raises(ValueError):
        SolverConfig(step=0.03, horizon=1.0)   # not a whole number of steps
    with pytest.raises(ValueError):
        SolverConfig(rate_nodes=1)


def test_initial_conditions(solved_single):
    ws, v1, r, xi = solved_single
    assert np.all(v1.values[:, 0, :] == 1.0)
    assert np.allclose(r.values[:, 0, :], ws.x_nodes, atol=1e-15)
    lag_idx = round(0.5 / ws.config.step)
    assert np.allclose(xi.values[:, 0, :], ws.x_nodes * r.values[:, lag_idx, :],
                       atol=1e-15)


def test_single_regime_zcb_collapse(kern_single, vas_single, cir_single, cfg_fast):
    for model in (vas_single, cir_single):
        ws = LatticeWorkspace(kern_single, model, cfg_fast)
        idx = np.argmin(np.abs(ws.x_nodes - 0.03))
        x0 = ws.x_nodes[idx]
        for n in (1, 2, 3):
            surf = solve_zcb_moment(n, kern_single, model, cfg_fast, workspace=ws)
            closed = np.asarray(model.bond_laplace(0, x0, n, ws.thetas))
            assert np.abs(surf.values[0, :, idx] - closed).max() < 1e-4, (model.kind, n)


def test_single_regime_rate_mean_collapse(kern_single, vas_single):
    cfg = SolverConfig(step=0.005, horizon=2.0, rate_nodes=61, reference_rate=0.03)
    ws = LatticeWorkspace(kern_single, vas_single, cfg)
    surf = solve_rate_mean(kern_single, vas_single, cfg, workspace=ws)
    idx = np.argmin(np.abs(ws.x_nodes - 0.03))
    closed = np.asarray(vas_single.mean(0, ws.x_nodes[idx], ws.thetas))
    assert np.abs(surf.values[0, :, idx] - closed).max() < 1e-5


def test_single_regime_product_collapse(solved_single, vas_single):
    ws, _, r, xi = solved_single
    idx = np.argmin(np.abs(ws.x_nodes - 0.03))
    closed = np.asarray(vas_single.product_mean(0, ws.x_nodes[idx], ws.thetas, 0.5))
    assert np.abs(xi.values[0, :, idx] - closed).max() < 1e-4


def test_lag_zero_is_second_moment(kern_single, vas_single, cfg_fast, solved_single):
    ws, _, r, _ = solved_single
    xi0 = solve_product_moment(0.0, kern_single, vas_single, cfg_fast,
                               rate_mean_surface=r, workspace=ws)
    idx = np.argmin(np.abs(ws.x_nodes - 0.03))
    x0 = ws.x_nodes[idx]
    closed = vas_single.mean(0, x0, ws.thetas) ** 2 + vas_single.variance(0, x0, ws.thetas)
    assert np.abs(xi0.values[0, :, idx] - np.asarray(closed)).max() < 1e-4


def test_jensen_gap(solved_testbed):
    _, v1, v2, _, _ = solved_testbed
    gap = v2.values - v1.values ** 2
    assert gap.min() >= -1e-8


def test_cir_moment_nonincreasing(kern_single, cir_single, cfg_fast):
    surf = solve_zcb_moment(1, kern_single, cir_single, cfg_fast)
    assert np.all(np.diff(surf.values[0], axis=0) <= 1e-12)


def test_evaluators_reduce_to_surface_at_age_zero(solved_testbed):
    ws, v1, v2, r, xi = solved_testbed
    kern, model = ws.kernel, ws.model
    for idx in (10, 30, 50):
        x = ws.x_nodes[idx]
        for s in (0.5, 1.0, 2.0):
            k = ws.grid.index_of(s)
            assert abs(evaluate_zcb_moment(v1, kern, model, 0, 0.0, x, s)
                       - v1.values[0, k, idx]) <= 1e-8
            assert abs(evaluate_rate_mean(r, kern, model, 1, 0.0, x, s)
                       - r.values[1, k, idx]) <= 1e-8
            assert abs(evaluate_product_moment(xi, r, kern, model, 0, 0.0, x, s)
                       - xi.values[0, k, idx]) <= 1e-8


def test_evaluator_trivial_maturities(solved_testbed):
    ws, v1, _, r, xi = solved_testbed
    kern, model = ws.kernel, ws.model
    assert evaluate_zcb_moment(v1, kern, model, 0, 0.7, 0.03, 0.0) == 1.0
    assert evaluate_rate_mean(r, kern, model, 0, 0.7, 0.03, 0.0) == 0.03
    # product at s = 0 collapses to r times the aged rate mean at the lag
    expected = 0.03 * evaluate_rate_mean(r, kern, model, 0, 0.7, 0.03, 0.5)
    assert evaluate_product_moment(xi, r, kern, model, 0, 0.7, 0.03, 0.0) == \
        pytest.approx(expected, rel=1e-12)


def test_evaluator_interpolates_in_maturity(solved_testbed):
    ws, v1, _, _, _ = solved_testbed
    kern, model = ws.kernel, ws.model
    s = 0.503  # off the 0.01 grid on purpose
    k = int(s / ws.config.step)
    lo = evaluate_zcb_moment(v1, kern, model, 0, 0.0, 0.03, ws.thetas[k])
    hi = evaluate_zcb_moment(v1, kern, model, 0, 0.0, 0.03, ws.thetas[k + 1])
    val = evaluate_zcb_moment(v1, kern, model, 0, 0.0, 0.03, s)
    assert min(lo, hi) - 1e-12 <= val <= max(lo, hi) + 1e-12


def test_rate_grid_refusals(solved_testbed):
    ws, v1, _, r, xi = solved_testbed
    kern, model = ws.kernel, ws.model
    outside = ws.x_nodes[-1] + 0.01
    with pytest.raises(GridCoverageError):
        evaluate_zcb_moment(v1, kern, model, 0, 0.0, outside, 1.0)
    with pytest.raises(GridCoverageError):
        v1.value(0, 1.0, outside)
    with pytest.raises(ValueError):
        v1.value(0, ws.thetas[-1] + 1.0, 0.03)


def test_degenerate_age(solved_testbed):
    ws, v1, _, _, _ = solved_testbed
    g = SojournDistribution.uniform(0.0, 1.0)
    kern = alternating_kernel(g, g)
    cfg = ws.config
    vas = ws.model
    surf = solve_zcb_moment(1, kern, vas, cfg)
    with pytest.raises(DegenerateBackwardError):
        evaluate_zcb_moment(surf, kern, vas, 0, 1.0, 0.03, 0.5)


def test_narrow_grid_raises():
    kern = SemiMarkovKernel([[1.0]], [[SojournDistribution.exponential(1.0)]])
    vas = RegimeRateModel.vasicek([{"a": 1.0, "b": 0.05, "sigma": 0.02}])
    cfg = SolverConfig(step=0.01, horizon=1.0, rate_nodes=21, rate_lo=0.02,
                       rate_hi=0.04, reference_rate=0.03)
    with pytest.raises(GridCoverageError):
        solve_zcb_moment(1, kern, vas, cfg)


def test_product_moment_needs_companion(kern_single, vas_single, cfg_fast):
    with pytest.raises(ValueError):
        solve_product_moment(0.5, kern_single, vas_single, cfg_fast,
                             rate_mean_surface=None)
    other = solve_zcb_moment(1, kern_single, vas_single, cfg_fast)
    with pytest.raises(ValueError):
        solve_product_moment(0.5, kern_single, vas_single, cfg_fast,
                             rate_mean_surface=other)
    good = solve_rate_mean(kern_single, vas_single, cfg_fast)
    with pytest.raises(ValueError):
        solve_product_moment(0.0033, kern_single, vas_single, cfg_fast,
                             rate_mean_surface=good)


def test_covariance_deterministic_zero():
    kern = SemiMarkovKernel([[1.0]], [[SojournDistribution.exponential(1.0)]])
    det = RegimeRateModel.vasicek([{"a": 1.0, "b": 0.05, "sigma": 0.0}])
    cfg = SolverConfig(step=0.01, horizon=1.0, rate_nodes=41, reference_rate=0.03)
    ws = LatticeWorkspace(kern, det, cfg)
    r = solve_rate_mean(kern, det, cfg, workspace=ws)
    xi = solve_product_moment(0.5, kern, det, cfg, rate_mean_surface=r, workspace=ws)
    cov = covariance(xi, r, kern, det, 0, 0.0, 0.03, 0.5, 0.5)
    # point-mass transition laws still interpolate on the lattice, so
    # "zero" means zero at solver precision
    assert abs(cov) < 1e-8


def test_covariance_single_regime(solved_single, vas_single):
    ws, _, r, xi = solved_single
    kern = ws.kernel
    idx = np.argmin(np.abs(ws.x_nodes - 0.03))
    x0 = ws.x_nodes[idx]
    cov = covariance(xi, r, kern, vas_single, 0, 0.0, x0, 1.0, 0.5)
    closed = np.exp(-0.5) * vas_single.variance(0, x0, 1.0)
    assert cov == pytest.approx(closed, abs=1e-5)


def test_covariance_lattice_matches_pointwise(solved_testbed):
    ws, _, _, r, xi = solved_testbed
    surf = covariance_surface(xi, r)
    idx = 30
    k = ws.grid.index_of(1.0)
    pointwise = covariance(xi, r, ws.kernel, ws.model, 0, 0.0, ws.x_nodes[idx], 1.0, 0.5)
    assert surf.values[0, k, idx] == pytest.approx(pointwise, abs=1e-12)


def test_nonnegative_variance_floor(solved_testbed, kern_testbed, vas_testbed, cfg_fast):
    ws, _, _, r, _ = solved_testbed
    xi0 = solve_product_moment(0.0, kern_testbed, vas_testbed, cfg_fast,
                               rate_mean_surface=r, workspace=ws)
    surf = covariance_surface(xi0, r)
    assert surf.values.min() >= -1e-6


def test_grid_convergence_second_order(kern_single, vas_single):
    errs = {}
    for h in (0.02, 0.01):
        cfg = SolverConfig(step=h, horizon=2.0, rate_nodes=61, reference_rate=0.03)
        ws = LatticeWorkspace(kern_single, vas_single, cfg)
        surf = solve_zcb_moment(1, kern_single, vas_single, cfg, workspace=ws)
        idx = np.argmin(np.abs(ws.x_nodes - 0.03))
        closed = np.asarray(vas_single.bond_laplace(0, ws.x_nodes[idx], 1, ws.thetas))
        errs[h] = np.abs(surf.values[0, :, idx] - closed).max()
    order = np.log2(errs[0.02] / errs[0.01])
    assert 1.5 <= order <= 2.5


def test_covariance_lag_zero_matches_mc_variance(solved_testbed):
    from smrates import RngStream, simulate_batch

    ws, _, _, r, _ = solved_testbed
    xi0 = solve_product_moment(0.0, ws.kernel, ws.model, ws.config,
                               rate_mean_surface=r, workspace=ws)
    analytic = covariance(xi0, r, ws.kernel, ws.model, 0, 0.0, 0.03, 1.0, 0.0)
    n = 200000
    rates, _ = simulate_batch(ws.kernel, ws.model, BackwardState(0, 0.0), 0.03,
                              [1.0], 0.01, RngStream(29), n)
    sample = rates[0]
    mc_var = sample.var(ddof=1)
    # standard error of a sample variance via its fourth central moment
    m4 = ((sample - sample.mean()) ** 4).mean()
    se = np.sqrt((m4 - mc_var**2) / n)
    assert abs(mc_var - analytic) < 3 * se


def test_covariance_decays_with_lag(kern_alt_exp, vas_testbed, cfg_fast):
    ws = LatticeWorkspace(kern_alt_exp, vas_testbed, cfg_fast)
    r = solve_rate_mean(kern_alt_exp, vas_testbed, cfg_fast, workspace=ws)
    covs = []
    for lag in (0.0, 0.5, 1.0):
        xi = solve_product_moment(lag, kern_alt_exp, vas_testbed, cfg_fast,
                                  rate_mean_surface=r, workspace=ws)
        covs.append(covariance(xi, r, kern_alt_exp, vas_testbed,
                               0, 0.0, 0.03, 1.0, lag))
    assert covs[0] > covs[1] > covs[2] > 0


def test_cir_product_moment_collapse_and_aged_evaluators(kern_single, cir_single):
    from smrates import RngStream, estimate_rate_moments, estimate_zcb_moment

    cfg = SolverConfig(step=0.01, horizon=1.5, rate_nodes=61, quad_order=24,
                       reference_rate=0.03)
    ws = LatticeWorkspace(kern_single, cir_single, cfg)
    idx = int(np.argmin(np.abs(ws.x_nodes - 0.03)))
    x0 = ws.x_nodes[idx]

    r = solve_rate_mean(kern_single, cir_single, cfg, workspace=ws)
    xi = solve_product_moment(0.5, kern_single, cir_single, cfg,
                              rate_mean_surface=r, workspace=ws)
    closed = np.asarray(cir_single.product_mean(0, x0, ws.thetas, 0.5))
    assert np.abs(xi.values[0, :, idx] - closed).max() < 1e-4

    v1 = solve_zcb_moment(1, kern_single, cir_single, cfg, workspace=ws)
    k = ws.grid.index_of(1.0)
    # age-zero evaluation reproduces the lattice through the chi-square rules
    assert abs(evaluate_zcb_moment(v1, kern_single, cir_single, 0, 0.0, x0, 1.0)
               - v1.values[0, k, idx]) <= 1e-8
    assert abs(evaluate_product_moment(xi, r, kern_single, cir_single, 0, 0.0, x0, 1.0)
               - xi.values[0, k, idx]) <= 1e-8
    # aged evaluation against Monte Carlo with the age-conditioned start
    aged = BackwardState(0, 0.4)
    rep = estimate_zcb_moment(kern_single, cir_single, aged, 0.03, 1, 1.0,
                              100000, 37, step=0.01)
    ana = evaluate_zcb_moment(v1, kern_single, cir_single, 0, 0.4, 0.03, 1.0)
    assert abs(rep.z_score(ana)) < 3
    mean_rep, prod_rep = estimate_rate_moments(kern_single, cir_single, aged,
                                               0.03, 0.5, 0.5, 100000, 38, step=0.01)
    mean_ana = evaluate_rate_mean(r, kern_single, cir_single, 0, 0.4, 0.03, 0.5)
    prod_ana = evaluate_product_moment(xi, r, kern_single, cir_single, 0, 0.4, 0.03, 0.5)
    assert abs(mean_rep.z_score(mean_ana)) < 3
    assert abs(prod_rep.z_score(prod_ana)) < 3


def test_hull_white_renewal_solver_vs_mc(kern_single):
    # time-varying coefficients whose clock restarts at every renewal:
    # the lattice solver and the simulator must agree on the modulated law
    from smrates import (HullWhiteParams, PiecewiseLinear, estimate_zcb_moment,
                         estimate_rate_moments)

    p = HullWhiteParams(
        PiecewiseLinear([0.0, 1.0], [0.03, 0.06]),
        PiecewiseLinear([0.0, 1.0], [1.5, 0.8]),
        PiecewiseLinear([0.0, 1.0], [0.01, 0.025]),
    )
    hw = RegimeRateModel.hull_white([p])
    cfg = SolverConfig(step=0.01, horizon=1.0, rate_nodes=61, quad_order=24,
                       reference_rate=0.03)
    ws = LatticeWorkspace(kern_single, hw, cfg)
    v1 = solve_zcb_moment(1, kern_single, hw, cfg, workspace=ws)
    r = solve_rate_mean(kern_single, hw, cfg, workspace=ws)

    # modest replication counts: per-path regime clocks make Hull-White
    # batches markedly slower than the homogeneous kinds
    start = BackwardState(0, 0.0)
    rep = estimate_zcb_moment(kern_single, hw, start, 0.03, 1, 1.0, 30000, 51)
    ana = evaluate_zcb_moment(v1, kern_single, hw, 0, 0.0, 0.03, 1.0)
    assert abs(rep.z_score(ana)) < 3
    mean_rep, _ = estimate_rate_moments(kern_single, hw, start, 0.03, 1.0, 0.0,
                                        30000, 52)
    mean_ana = evaluate_rate_mean(r, kern_single, hw, 0, 0.0, 0.03, 1.0)
    assert abs(mean_rep.z_score(mean_ana)) < 3


def test_gamma_kernel_zcb_vs_mc(vas_testbed):
    from smrates import estimate_zcb_moment

    kern = SemiMarkovKernel(
        [[0.0, 1.0], [1.0, 0.0]],
        [
            [None, SojournDistribution.gamma(2.0, 0.5)],
            [SojournDistribution.gamma(3.0, 0.3), None],
        ],
    )
    cfg = SolverConfig(step=0.005, horizon=1.0, rate_nodes=61, reference_rate=0.03)
    surf = solve_zcb_moment(1, kern, vas_testbed, cfg)
    ana = evaluate_zcb_moment(surf, kern, vas_testbed, 0, 0.0, 0.03, 1.0)
    rep = estimate_zcb_moment(kern, vas_testbed, BackwardState(0, 0.0), 0.03,
                              1, 1.0, 100000, 63)
    assert abs(rep.z_score(ana)) < 3
