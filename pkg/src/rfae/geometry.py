"""Differential-geometry kernel on a chart U x [0, tau].

Index conventions (0-based in code):

* ``dg[i, j, k]``       = d_i g_jk
* ``d2g[i, l, j, k]``   = d_i d_l g_jk
* ``gamma[i, j, l]``    = Gamma_ij^l
* ``dgamma[j, i, k, l]``= d_j Gamma_ik^l
* ``riemann[i, l, j, k]`` = R_i^l_jk
* ``ricci[i, k]``       = sum_l R_i^l_lk

The ``*_arrays`` functions are trace-safe (usable under ``jit``/``vmap``/``grad``)
and never raise; the public per-point functions check the metric condition
number and raise :class:`SingularMetricError`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

COND_THRESHOLD = 1e8


class SingularMetricError(ValueError):
    pass


class SingularJacobianError(ValueError):
    pass


class RankError(ValueError):
    """Tangent plane of an embedded surface is degenerate."""


def symmetrize(m):
    return 0.5 * (m + jnp.swapaxes(m, -1, -2))


def inverse(g):
    """Closed-form inverse for m <= 3, pivoted LU otherwise."""
    m = g.shape[-1]
    if m == 1:
        return 1.0 / g
    if m == 2:
        a, b, c, d = g[0, 0], g[0, 1], g[1, 0], g[1, 1]
        det = a * d - b * c
        return jnp.array([[d, -b], [-c, a]]) / det
    if m == 3:
        cof = jnp.stack(
            [jnp.cross(g[1], g[2]), jnp.cross(g[2], g[0]), jnp.cross(g[0], g[1])]
        )
        det = jnp.dot(g[0], cof[0])
        return cof.T / det
    return jnp.linalg.inv(g)


def condition_number(g):
    ev = jnp.abs(jnp.linalg.eigvalsh(symmetrize(g)))
    return jnp.max(ev) / jnp.maximum(jnp.min(ev), 1e-300)


# ---------------------------------------------------------------------------
# metric fields
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MetricField:
    """A metric g(u, t) given as a jax-traceable callable returning an m x m matrix."""

    evaluator: Callable
    m: int
    source: str = "network"
    _batched: Callable | None = field(default=None, repr=False)

    def __call__(self, u, t):
        return symmetrize(jnp.asarray(self.evaluator(jnp.asarray(u, dtype=jnp.float64), t)))

    def batched_report(self):
        """Jitted vmapped ``report_arrays`` for this field (compiled once)."""
        if self._batched is None:
            self._batched = jax.jit(jax.vmap(lambda u, t: report_arrays(self.evaluator, u, t)))
        return self._batched


def metric_jet(metric_fn: Callable, u, t):
    """(g, dg, d2g, dt_g) of the symmetrized metric at (u, t)."""
    u = jnp.asarray(u, dtype=jnp.float64)
    t = jnp.asarray(t, dtype=jnp.float64)

    def gs(uu, tt):
        return symmetrize(metric_fn(uu, tt))

    def first(uu):
        return jax.jacfwd(gs, argnums=0)(uu, t)  # [j, k, i]

    g = gs(u, t)
    jac = first(u)
    hess = jax.jacfwd(first)(u)  # [j, k, i, l]
    dt_g = jax.jacfwd(gs, argnums=1)(u, t)
    dg = jnp.transpose(jac, (2, 0, 1))
    d2g = jnp.transpose(hess, (2, 3, 0, 1))
    return g, dg, d2g, dt_g


def _bracket(dg):
    # A[i, j, k] = d_j g_ik - d_k g_ij + d_i g_kj
    return (
        jnp.einsum("jik->ijk", dg)
        - jnp.einsum("kij->ijk", dg)
        + jnp.einsum("ikj->ijk", dg)
    )


def christoffel_from_jet(g_inv, dg):
    return 0.5 * jnp.einsum("kl,ijk->ijl", g_inv, _bracket(dg))


def christoffel_derivatives_from_jet(g_inv, dg, d2g):
    """d_j Gamma_ik^l assembled by the product rule from metric derivatives only."""
    a = _bracket(dg)  # a[i, k, p]
    # d_j of the bracket: d_kj g_ip - d_pj g_ik + d_ij g_pk
    da = (
        jnp.einsum("kjip->jikp", d2g)
        - jnp.einsum("pjik->jikp", d2g)
        + jnp.einsum("ijpk->jikp", d2g)
    )
    dg_inv = -jnp.einsum("pa,jab,bl->jpl", g_inv, dg, g_inv)
    return 0.5 * (jnp.einsum("jpl,ikp->jikl", dg_inv, a) + jnp.einsum("pl,jikp->jikl", g_inv, da))


def riemann(gamma, dgamma):
    """R_i^l_jk = d_j G_ik^l - d_k G_ij^l + sum_p (G_ik^p G_pj^l - G_ij^p G_pk^l)."""
    return (
        jnp.einsum("jikl->iljk", dgamma)
        - jnp.einsum("kijl->iljk", dgamma)
        + jnp.einsum("ikp,pjl->iljk", gamma, gamma)
        - jnp.einsum("ijp,pkl->iljk", gamma, gamma)
    )


def ricci(riem):
    """Ric_ik = sum_l R_i^l_lk."""
    return jnp.einsum("illk->ik", riem)


def report_arrays(metric_fn: Callable, u, t) -> dict:
    """Full geometry at one point as a dict of arrays (trace-safe)."""
    g, dg, d2g, dt_g = metric_jet(metric_fn, u, t)
    g_inv = inverse(g)
    gamma = christoffel_from_jet(g_inv, dg)
    dgamma = christoffel_derivatives_from_jet(g_inv, dg, d2g)
    riem = riemann(gamma, dgamma)
    ric = ricci(riem)
    ev = jnp.linalg.eigvalsh(g)
    aev = jnp.abs(ev)
    return {
        "g": g,
        "g_inv": g_inv,
        "dg": dg,
        "d2g": d2g,
        "gamma": gamma,
        "dgamma": dgamma,
        "riemann": riem,
        "ricci": ric,
        "dt_g": dt_g,
        "residual": dt_g + 2.0 * ric,
        "cond": jnp.max(aev) / jnp.maximum(jnp.min(aev), 1e-300),
        "min_eig": jnp.min(ev),
    }


@dataclass
class GeometryReport:
    g: np.ndarray
    g_inv: np.ndarray
    dg: np.ndarray
    d2g: np.ndarray
    gamma: np.ndarray
    dgamma: np.ndarray
    riemann: np.ndarray
    ricci: np.ndarray
    dt_g: np.ndarray
    residual: np.ndarray
    cond: float
    indefinite: bool

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.residual))

    @classmethod
    def from_arrays(cls, arr: dict) -> "GeometryReport":
        a = {k: np.asarray(v) for k, v in arr.items()}
        return cls(
            **{k: a[k] for k in ("g", "g_inv", "dg", "d2g", "gamma", "dgamma", "riemann", "ricci", "dt_g", "residual")},
            cond=float(a["cond"]),
            indefinite=bool(a["min_eig"] <= 0.0),
        )


def _as_fn(mf):
    return mf.evaluator if isinstance(mf, MetricField) else mf


def _check_cond(g, threshold=COND_THRESHOLD):
    c = float(condition_number(jnp.asarray(g)))
    if not np.isfinite(c) or c > threshold:
        raise SingularMetricError(f"metric condition number {c:.3e} exceeds {threshold:.1e}")


def geometry_report(mf, u, t, threshold=COND_THRESHOLD) -> GeometryReport:
    arr = report_arrays(_as_fn(mf), u, t)
    rep = GeometryReport.from_arrays(arr)
    if not np.isfinite(rep.cond) or rep.cond > threshold:
        raise SingularMetricError(f"metric condition number {rep.cond:.3e} exceeds {threshold:.1e}")
    return rep


def geometry_reports(mf: MetricField, us, ts) -> dict:
    """Batched report arrays (numpy) for many points; no condition check."""
    out = mf.batched_report()(jnp.asarray(us, dtype=jnp.float64), jnp.asarray(ts, dtype=jnp.float64))
    return {k: np.asarray(v) for k, v in out.items()}


def christoffel(mf, u, t):
    """Returns ``(gamma, dg)``."""
    g, dg, _, _ = metric_jet(_as_fn(mf), u, t)
    _check_cond(g)
    return np.asarray(christoffel_from_jet(inverse(g), dg)), np.asarray(dg)


def christoffel_derivatives(mf, u, t):
    g, dg, d2g, _ = metric_jet(_as_fn(mf), u, t)
    _check_cond(g)
    return np.asarray(christoffel_derivatives_from_jet(inverse(g), dg, d2g))


def ricci_flow_residual(mf, u, t):
    """Returns ``(dt_g + 2 Ric, Frobenius norm)``."""
    rep = geometry_report(mf, u, t)
    return rep.residual, rep.residual_norm


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def embedding_jacobian(embed: Callable, u, t):
    """J[a, i] = d_i E^a."""
    return jax.jacfwd(embed, argnums=0)(jnp.asarray(u, dtype=jnp.float64), t)


def metric_from_jacobian(embed: Callable, u, t):
    """Gram matrix (JE)^T (JE) of tangent-vector inner products."""
    jac = embedding_jacobian(embed, u, t)
    return jac.T @ jac


def gram_metric_field(embed: Callable, m: int, source="embedding") -> MetricField:
    return MetricField(lambda u, t: metric_from_jacobian(embed, u, t), m, source)


# ---------------------------------------------------------------------------
# coordinate changes
# ---------------------------------------------------------------------------


def _check_jac(jac):
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim != 2 or jac.shape[0] != jac.shape[1]:
        raise SingularJacobianError("coordinate Jacobian must be square")
    s = np.linalg.svd(jac, compute_uv=False)
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise SingularJacobianError("coordinate Jacobian is singular")
    return jac


def transform_metric(g, jac):
    """g~_ab = sum_ij g_ij du^i/dv^a du^j/dv^b with ``jac[i, a] = du^i/dv^a``."""
    jac = _check_jac(jac)
    return jac.T @ np.asarray(g) @ jac


def transform_ricci(ric, jac):
    """Ricci is a covariant 2-tensor and transforms like the metric."""
    jac = _check_jac(jac)
    return jac.T @ np.asarray(ric) @ jac


# ---------------------------------------------------------------------------
# second fundamental form
# ---------------------------------------------------------------------------


def sff_arrays(embed: Callable, u, t) -> dict:
    """Second-fundamental-form route to curvature for a surface in R^3 (trace-safe)."""
    u = jnp.asarray(u, dtype=jnp.float64)
    t = jnp.asarray(t, dtype=jnp.float64)
    jac = jax.jacfwd(embed, argnums=0)(u, t)  # (3, 2)
    hess = jax.jacfwd(jax.jacfwd(embed, argnums=0), argnums=0)(u, t)  # (3, 2, 2)
    cross = jnp.cross(jac[:, 0], jac[:, 1])
    cnorm = jnp.linalg.norm(cross)
    n = cross / cnorm
    L = jnp.einsum("aij,a->ij", hess, n)
    g = jac.T @ jac
    g_inv = inverse(g)
    L_mixed = jnp.einsum("ik,il->lk", L, g_inv)  # L_mixed[l, k] = L^l_k
    riem = jnp.einsum("ik,lj->iljk", L, L_mixed) - jnp.einsum("ij,lk->iljk", L, L_mixed)
    ric = jnp.trace(L_mixed) * L - L @ L_mixed
    dt_gram = jax.jacfwd(lambda tt: metric_from_jacobian(embed, u, tt))(t)
    return {
        "L": L,
        "n": n,
        "L_mixed": L_mixed,
        "g": g,
        "riemann_sff": riem,
        "ricci_sff": ric,
        "dt_g": dt_gram,
        "residual_sff": dt_gram + 2.0 * ric,
        "cross_norm": cnorm,
    }


@dataclass
class SffReport:
    L: np.ndarray
    n: np.ndarray
    L_mixed: np.ndarray
    riemann_sff: np.ndarray
    residual_sff: np.ndarray
    ricci_sff: np.ndarray
    g: np.ndarray


def second_fundamental_form(embed: Callable, u, t, tol=1e-10) -> SffReport:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (2,):
        raise ValueError("second fundamental form needs a 2-d chart")
    arr = {k: np.asarray(v) for k, v in sff_arrays(embed, u, t).items()}
    if arr["n"].shape != (3,):
        raise ValueError("second fundamental form needs an embedding in R^3")
    if not np.isfinite(arr["cross_norm"]) or arr["cross_norm"] < tol:
        raise RankError("degenerate tangent plane (d1 E x d2 E ~ 0)")
    return SffReport(
        L=arr["L"],
        n=arr["n"],
        L_mixed=arr["L_mixed"],
        riemann_sff=arr["riemann_sff"],
        residual_sff=arr["residual_sff"],
        ricci_sff=arr["ricci_sff"],
        g=arr["g"],
    )
