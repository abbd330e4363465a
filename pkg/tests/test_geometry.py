import jax
import jax.numpy as jnp
import numpy as np
import pytest

from rfae import geometry as geo
from rfae.geometry import MetricField
from rfae.verify import RandomMetric, RandomSurface, dual_jet, fd_jacobian, loop_christoffel, loop_christoffel_derivs, loop_riemann, rel_err


def flat(u, t):
    return jnp.eye(2)


def test_flat_metric_all_zero():
    rep = geo.geometry_report(MetricField(flat, 2), np.array([0.3, 0.1]), 0.5)
    for arr in (rep.gamma, rep.dgamma, rep.riemann, rep.ricci, rep.residual):
        assert np.all(arr == 0)
    assert rep.residual_norm == 0.0


def test_polar_christoffel():
    polar = lambda u, t: jnp.diag(jnp.stack([jnp.ones(()), u[0] ** 2]))
    gamma, _ = geo.christoffel(MetricField(polar, 2), np.array([2.0, 0.4]), 0.0)
    # Gamma_22^1 = -r, Gamma_12^2 = Gamma_21^2 = 1/r
    assert gamma[1, 1, 0] == pytest.approx(-2.0)
    assert gamma[0, 1, 1] == pytest.approx(0.5)
    assert gamma[1, 0, 1] == pytest.approx(0.5)
    ric = geo.geometry_report(MetricField(polar, 2), np.array([2.0, 0.4]), 0.0).ricci
    assert np.max(np.abs(ric)) < 1e-12


def test_round_sphere_ricci_equals_metric():
    R = 1.7
    sph = lambda u, t: jnp.diag(jnp.stack([R**2 * jnp.ones(()), R**2 * jnp.sin(u[0]) ** 2]))
    u = np.array([0.9, 2.0])
    rep = geo.geometry_report(MetricField(sph, 2), u, 0.0)
    # Ric = K g with K = 1/R^2
    np.testing.assert_allclose(rep.ricci, np.asarray(sph(u, 0.0)) / R**2, atol=1e-13)


def test_time_dependent_scaled_metric_residual():
    # g = (1 + t) I: flat, so the residual is d_t g = I
    res, norm = geo.ricci_flow_residual(MetricField(lambda u, t: (1 + t) * jnp.eye(2), 2), np.zeros(2), 0.3)
    np.testing.assert_allclose(res, np.eye(2), atol=1e-14)
    assert norm == pytest.approx(np.sqrt(2))


def test_symmetrized_before_use():
    skew = lambda u, t: jnp.array([[1.0, 0.3 + u[0]], [0.3 - u[0], 2.0]])
    sym = lambda u, t: jnp.array([[1.0, 0.3], [0.3, 2.0]])
    a = geo.geometry_report(MetricField(skew, 2), np.array([0.2, 0.0]), 0.0)
    np.testing.assert_allclose(a.g, sym(None, None))
    assert np.max(np.abs(a.gamma)) < 1e-15


def test_singular_metric_rejected():
    bad = lambda u, t: jnp.diag(jnp.array([1.0, 1e-10]))
    with pytest.raises(geo.SingularMetricError):
        geo.geometry_report(MetricField(bad, 2), np.zeros(2), 0.0)


def test_indefinite_flagged():
    ind = lambda u, t: jnp.diag(jnp.array([1.0, -2.0]))
    assert geo.geometry_report(MetricField(ind, 2), np.zeros(2), 0.0).indefinite


@pytest.mark.parametrize("seed", range(5))
def test_pipeline_matches_dual_route(seed):
    met = RandomMetric(seed)
    u = np.random.default_rng(seed).uniform(-1, 1, 2)
    rep = geo.geometry_report(MetricField(met.jax, 2), u, 0.4)
    g, dg, d2g, dt = dual_jet(met, u, 0.4)
    np.testing.assert_allclose(rep.g, g, rtol=1e-13)
    np.testing.assert_allclose(rep.dt_g, dt, rtol=1e-12, atol=1e-13)
    gam = loop_christoffel(g, dg)
    dgam = loop_christoffel_derivs(g, dg, d2g)
    assert rel_err(rep.gamma, gam) < 1e-12
    assert rel_err(rep.dgamma, dgam) < 1e-12
    assert rel_err(rep.riemann, loop_riemann(gam, dgam)) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_christoffel_derivatives_match_fd(seed):
    met = RandomMetric(10 + seed)
    u = np.random.default_rng(seed).uniform(-1, 1, 2)
    mf = MetricField(met.jax, 2)
    dgam = geo.christoffel_derivatives(mf, u, 0.2)
    fd = fd_jacobian(lambda x: geo.christoffel(mf, x, 0.2)[0], u)
    assert rel_err(dgam, fd) < 1e-8


def test_riemann_antisymmetry_and_bianchi():
    met = RandomMetric(7)
    rep = geo.geometry_report(MetricField(met.jax, 2), np.array([0.1, -0.3]), 0.0)
    R = rep.riemann
    np.testing.assert_allclose(R, -np.swapaxes(R, 2, 3), atol=1e-13)
    # first Bianchi: R_i^l_jk + R_j^l_ki + R_k^l_ij = 0
    b = R + np.einsum("jlki->iljk", R) + np.einsum("klij->iljk", R)
    assert np.max(np.abs(b)) < 1e-13


def test_batched_reports_match_pointwise():
    met = RandomMetric(3)
    mf = MetricField(met.jax, 2)
    us = np.random.default_rng(0).uniform(-1, 1, (6, 2))
    ts = np.linspace(0, 1, 6)
    batch = geo.geometry_reports(mf, us, ts)
    for k in range(6):
        rep = geo.geometry_report(mf, us[k], ts[k])
        np.testing.assert_allclose(batch["ricci"][k], rep.ricci, rtol=1e-12, atol=1e-14)


def test_gram_metric_and_sff_on_sphere():
    embed = lambda u, t: 2.0 * jnp.stack([jnp.sin(u[0]) * jnp.cos(u[1]), jnp.sin(u[0]) * jnp.sin(u[1]), jnp.cos(u[0])])
    u = np.array([1.1, 0.4])
    g = geo.metric_from_jacobian(embed, u, 0.0)
    np.testing.assert_allclose(g, np.diag([4.0, 4.0 * np.sin(1.1) ** 2]), rtol=1e-14, atol=1e-15)
    s = geo.second_fundamental_form(embed, u, 0.0)
    # Ric = K g with K = 1/4
    np.testing.assert_allclose(s.ricci_sff, g / 4.0, atol=1e-13)


def test_sff_matches_christoffel_riemann():
    E = RandomSurface(4)
    u = np.array([0.2, -0.5])
    gram = lambda uu, tt: geo.metric_from_jacobian(E, uu, tt)
    a = geo.geometry_report(MetricField(gram, 2), u, 0.3)
    b = geo.second_fundamental_form(E, u, 0.3)
    assert rel_err(a.riemann, b.riemann_sff) < 1e-10


def test_sff_degenerate_plane():
    line = lambda u, t: jnp.stack([u[0], u[0], 0.0 * u[1]])
    with pytest.raises(geo.RankError):
        geo.second_fundamental_form(line, np.zeros(2), 0.0)


def test_sff_needs_surface_in_r3():
    with pytest.raises(ValueError):
        geo.second_fundamental_form(lambda u, t: jnp.concatenate([u, u]), np.zeros(3), 0.0)


def test_transform_metric_polar():
    r, th = 1.5, 0.7
    jac = np.array([[np.cos(th), -r * np.sin(th)], [np.sin(th), r * np.cos(th)]])
    np.testing.assert_allclose(geo.transform_metric(np.eye(2), jac), np.diag([1.0, r * r]), atol=1e-14)
    with pytest.raises(geo.SingularJacobianError):
        geo.transform_metric(np.eye(2), np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_transform_ricci_consistency():
    met = RandomMetric(21)
    A = np.array([[0.2, -0.1], [0.15, 0.1]])
    phi = lambda v: v + A @ jnp.sin(v)
    gnew = lambda v, t: jax.jacfwd(phi)(v).T @ met.jax(phi(v), t) @ jax.jacfwd(phi)(v)
    v = np.array([0.3, -0.6])
    J = np.asarray(jax.jacfwd(phi)(jnp.asarray(v)))
    old = geo.geometry_report(MetricField(met.jax, 2), np.asarray(phi(jnp.asarray(v))), 0.1).ricci
    new = geo.geometry_report(MetricField(gnew, 2), v, 0.1).ricci
    assert rel_err(geo.transform_ricci(old, J), new) < 1e-10
