"""Oracle suites behind ``rfae verify-geometry``.

Each check compares the jax geometry kernel against a route that does not
share code with it: the dual-number engine in :mod:`rfae.autodiff` feeding
loop-based tensor formulas, central finite differences, or a closed form.
"""
from __future__ import annotations

import math
import time

import jax
import jax.numpy as jnp
import numpy as np

from . import autodiff as ad
from . import closed_forms as cf
from .geometry import report_arrays, sff_arrays, transform_ricci

SUITES = ("autodiff", "cigar", "sphere", "pipeline", "sff", "transform")


def rel_err(a, b, floor=1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


def _check(name, err, tol):
    return {"name": name, "max_error": float(err), "tol": tol, "passed": bool(err < tol)}


# ---------------------------------------------------------------------------
# random smooth test objects
# ---------------------------------------------------------------------------


class RandomMetric:
    """g = A^T A + 0.5 I with A a sum of random sinusoids in (u, t); m = 2.

    Written against a pluggable ``sin`` so the same formula runs on floats,
    dual numbers and jax arrays.
    """

    def __init__(self, seed):
        r = np.random.default_rng(seed)
        self.c = r.normal(size=(2, 2))
        self.s = r.normal(scale=0.5, size=(2, 2, 2))
        self.w = r.normal(size=(2, 2, 2, 2))
        self.q = r.normal(scale=0.5, size=(2, 2, 2))
        self.p = r.uniform(0, 2 * np.pi, size=(2, 2, 2))

    def entries(self, u1, u2, t, sin):
        A = [[None, None], [None, None]]
        for a in range(2):
            for b in range(2):
                acc = self.c[a, b]
                for k in range(2):
                    w = self.w[a, b, k]
                    acc = acc + self.s[a, b, k] * sin(w[0] * u1 + w[1] * u2 + self.q[a, b, k] * t + self.p[a, b, k])
                A[a][b] = acc
        g = [[None, None], [None, None]]
        for i in range(2):
            for j in range(2):
                g[i][j] = A[0][i] * A[0][j] + A[1][i] * A[1][j] + (0.5 if i == j else 0.0)
        return g

    def jax(self, u, t):
        g = self.entries(u[0], u[1], t, jnp.sin)
        return jnp.array([[g[0][0], g[0][1]], [g[1][0], g[1][1]]])

    def numpy(self, u, t):
        return np.array(self.entries(u[0], u[1], t, np.sin), dtype=np.float64)


class RandomSurface:
    """Graph-like time-dependent surface E(u, t) in R^3."""

    def __init__(self, seed):
        r = np.random.default_rng(seed)
        self.a = r.normal(scale=0.4, size=(3, 3))
        self.w = r.normal(size=(3, 3, 2))
        self.q = r.normal(scale=0.5, size=(3, 3))
        self.p = r.uniform(0, 2 * np.pi, size=(3, 3))

    def __call__(self, u, t):
        f = [jnp.sum(self.a[c] * jnp.sin(self.w[c] @ u + self.q[c] * t + self.p[c])) for c in range(3)]
        return jnp.stack([u[0] + 0.3 * f[0], u[1] + 0.3 * f[1], f[2]])


# ---------------------------------------------------------------------------
# loop-based tensor formulas (independent of the einsum kernel)
# ---------------------------------------------------------------------------


def dual_jet(metric: RandomMetric, u, t):
    """(g, dg, d2g, dt_g) from forward-over-forward dual numbers."""
    out = ad.forward_eval(lambda a, b, c: metric.entries(a, b, c, ad.sin), [u[0], u[1], t], seeds=[0, 1, 2])
    g = np.zeros((2, 2))
    dg = np.zeros((2, 2, 2))
    d2g = np.zeros((2, 2, 2, 2))
    dt = np.zeros((2, 2))
    for n, o in enumerate(out):
        j, k = divmod(n, 2)
        g[j, k] = o.value
        dt[j, k] = o.d1.get(2, 0.0)
        for i in range(2):
            dg[i, j, k] = o.d1.get(i, 0.0)
            for l in range(2):
                d2g[i, l, j, k] = o.d2.get((i, l), 0.0)
    return g, dg, d2g, dt


def loop_christoffel(g, dg):
    gi = np.linalg.inv(g)
    m = g.shape[0]
    gam = np.zeros((m, m, m))
    for i in range(m):
        for j in range(m):
            for l in range(m):
                gam[i, j, l] = 0.5 * sum(gi[l, k] * (dg[i, j, k] + dg[j, i, k] - dg[k, i, j]) for k in range(m))
    return gam


def loop_christoffel_derivs(g, dg, d2g):
    """out[p, i, j, l] = d_p Gamma_ij^l."""
    gi = np.linalg.inv(g)
    m = g.shape[0]
    out = np.zeros((m, m, m, m))
    for p in range(m):
        dgi = -gi @ dg[p] @ gi
        for i in range(m):
            for j in range(m):
                for l in range(m):
                    s = 0.0
                    for k in range(m):
                        br = dg[i, j, k] + dg[j, i, k] - dg[k, i, j]
                        dbr = d2g[p, i, j, k] + d2g[p, j, i, k] - d2g[p, k, i, j]
                        s += dgi[l, k] * br + gi[l, k] * dbr
                    out[p, i, j, l] = 0.5 * s
    return out


def loop_riemann(gam, dgam):
    m = gam.shape[0]
    R = np.zeros((m, m, m, m))
    for i in range(m):
        for l in range(m):
            for j in range(m):
                for k in range(m):
                    s = dgam[j, i, k, l] - dgam[k, i, j, l]
                    for p in range(m):
                        s += gam[i, k, p] * gam[p, j, l] - gam[i, j, p] * gam[p, k, l]
                    R[i, l, j, k] = s
    return R


def loop_ricci(R):
    m = R.shape[0]
    return np.array([[sum(R[i, l, l, k] for l in range(m)) for k in range(m)] for i in range(m)])


def fd_jacobian(fn, u, h=1e-3):
    """Fourth-order central differences; output axis 0 is the derivative direction."""
    u = np.asarray(u, dtype=np.float64)
    cols = []
    for i in range(u.size):
        e = np.zeros_like(u)
        e[i] = h
        f = lambda s: np.asarray(fn(u + s * e))
        cols.append((-f(2) + 8 * f(1) - 8 * f(-1) + f(-2)) / (12 * h))
    return np.stack(cols)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def suite_autodiff(seed=0):
    rng = np.random.default_rng(seed)
    sizes = [5, 6, 6, 1]
    Ws = [rng.normal(scale=0.6, size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(scale=0.3, size=o) for o in sizes[1:]]

    def net(*xs):
        h = list(xs)
        for n, (W, b) in enumerate(zip(Ws, bs)):
            z = [sum(W[r, c] * h[c] for c in range(len(h))) + b[r] for r in range(W.shape[0])]
            h = z if n == len(Ws) - 1 else [ad.tanh(v) for v in z]
        return h[0]

    x0 = rng.normal(size=5)
    d = ad.forward_eval(net, list(x0), seeds=range(5))[0]
    fval = lambda x: float(net(*x))
    h = 1e-4
    g_fd = np.zeros(5)
    H_fd = np.zeros((5, 5))
    for i in range(5):
        e = np.eye(5)[i] * h
        g_fd[i] = (fval(x0 + e) - fval(x0 - e)) / (2 * h)
        for j in range(5):
            f = np.eye(5)[j] * h
            H_fd[i, j] = (fval(x0 + e + f) - fval(x0 + e - f) - fval(x0 - e + f) + fval(x0 - e - f)) / (4 * h * h)
    g_ad = np.array([d.d1[i] for i in range(5)])
    H_ad = np.array([[d.d2.get((i, j), 0.0) for j in range(5)] for i in range(5)])

    # reverse mode on the same network, differentiating a squared loss w.r.t. the weights
    flat = np.concatenate([w.ravel() for w in Ws] + [b for b in bs])

    def loss_of(params, tape=None):
        off = 0
        W2, b2 = [], []
        for W in Ws:
            W2.append(params[off : off + W.size].reshape(W.shape))
            off += W.size
        for b in bs:
            b2.append(params[off : off + b.size])
            off += b.size
        h_ = list(x0)
        for n, (W, b) in enumerate(zip(W2, b2)):
            z = [sum(W[r, c] * h_[c] for c in range(len(h_))) + b[r] for r in range(W.shape[0])]
            h_ = z if n == len(W2) - 1 else [ad.tanh(v) for v in z]
        return (h_[0] - 0.3) ** 2

    pv = ad.ParamVector.from_blocks([(("net", "all", "w"), flat)])
    tape = ad.Tape()
    out = loss_of(tape.params(pv))
    grad = ad.backward_grad(tape, out)
    gr_fd = np.zeros(flat.size)
    for k in range(flat.size):
        e = np.zeros(flat.size)
        e[k] = h
        gr_fd[k] = (loss_of(flat + e) - loss_of(flat - e)) / (2 * h)
    return [
        _check("forward d1 vs central differences", rel_err(g_ad, g_fd), 1e-6),
        _check("forward d2 vs central differences", rel_err(H_ad, H_fd), 1e-4),
        _check("d2 symmetry", float(np.max(np.abs(H_ad - H_ad.T))), 1e-15),
        _check("reverse gradient vs central differences", rel_err(grad, gr_fd), 1e-6),
    ]


def suite_cigar(n=500, seed=0):
    rng = np.random.default_rng(seed)
    us = rng.uniform(-2, 2, size=(n, 2))
    ts = rng.uniform(0, 1, size=n)
    t0 = time.perf_counter()
    res = jax.jit(jax.vmap(lambda u, t: report_arrays(cf.cigar_metric, u, t)["residual"]))(us, ts)
    worst = float(jnp.max(jnp.sqrt(jnp.sum(res**2, axis=(-2, -1)))))
    dt = time.perf_counter() - t0
    return [_check("cigar flow residual (Frobenius)", worst, 1e-8), _check("cigar runtime seconds", dt, 10.0)]


def suite_sphere(n=200, seed=0, R=1.0):
    rng = np.random.default_rng(seed)
    out = []
    for d in (3, 4, 5):
        m = d - 1
        T = cf.extinction_time(R, d)
        us = np.concatenate([rng.uniform(0.2, np.pi - 0.2, size=(n, m - 1)), rng.uniform(0, 2 * np.pi, size=(n, 1))], axis=1)
        ts = rng.uniform(0, 0.9 * T, size=n)
        fn = lambda u, t, d=d: cf.sphere_metric(u, t, R, d)
        res = jax.vmap(lambda u, t: report_arrays(fn, u, t)["residual"])(us, ts)
        worst = float(jnp.max(jnp.abs(res)))
        x = jax.vmap(lambda u, t: cf.sphere_embed(u, t, R, d))(us, ts)
        r = np.sqrt(R * R - 2.0 * (d - 2) * ts)
        norm_err = float(np.max(np.abs(np.linalg.norm(np.asarray(x), axis=1) - r)))
        out.append(_check(f"sphere d={d} flow residual", worst, 1e-7))
        out.append(_check(f"sphere d={d} |embed| = r(t)", norm_err, 1e-12))
    return out


def suite_pipeline(n=20, seed=0):
    rng = np.random.default_rng(seed)
    errs = {k: 0.0 for k in ("gamma_dual", "dgamma_dual", "riemann_dual", "ricci_dual", "gamma_fd", "dgamma_fd", "riemann_fd", "ricci_fd", "identity")}
    for s in range(n):
        met = RandomMetric(seed * 1000 + s)
        u = rng.uniform(-1, 1, size=2)
        t = float(rng.uniform(0, 1))
        arr = {k: np.asarray(v) for k, v in report_arrays(met.jax, jnp.asarray(u), t).items()}
        g, dg, d2g, _ = dual_jet(met, u, t)
        gam = loop_christoffel(g, dg)
        dgam = loop_christoffel_derivs(g, dg, d2g)
        R = loop_riemann(gam, dgam)
        errs["gamma_dual"] = max(errs["gamma_dual"], rel_err(arr["gamma"], gam))
        errs["dgamma_dual"] = max(errs["dgamma_dual"], rel_err(arr["dgamma"], dgam))
        errs["riemann_dual"] = max(errs["riemann_dual"], rel_err(arr["riemann"], R))
        errs["ricci_dual"] = max(errs["ricci_dual"], rel_err(arr["ricci"], loop_ricci(R)))
        # finite differences of the metric and of the kernel's own Christoffel map
        dg_fd = fd_jacobian(lambda x: met.numpy(x, t), u)
        gam_fd = loop_christoffel(met.numpy(u, t), dg_fd)
        gam_fn = jax.jit(lambda x: report_arrays(met.jax, x, t)["gamma"])
        dgam_fd = fd_jacobian(lambda x: gam_fn(jnp.asarray(x)), u)
        R_fd = loop_riemann(gam_fd, dgam_fd)
        errs["gamma_fd"] = max(errs["gamma_fd"], rel_err(arr["gamma"], gam_fd))
        errs["dgamma_fd"] = max(errs["dgamma_fd"], rel_err(arr["dgamma"], dgam_fd))
        errs["riemann_fd"] = max(errs["riemann_fd"], rel_err(arr["riemann"], R_fd))
        errs["ricci_fd"] = max(errs["ricci_fd"], rel_err(arr["ricci"], loop_ricci(R_fd)))
        # in two dimensions Ric = (scalar curvature / 2) g
        scal = float(np.sum(arr["g_inv"] * arr["ricci"]))
        errs["identity"] = max(errs["identity"], float(np.max(np.abs(arr["ricci"] - 0.5 * scal * arr["g"]))))
    return [
        _check("Christoffel vs dual-number route", errs["gamma_dual"], 1e-6),
        _check("Christoffel derivatives vs dual-number route", errs["dgamma_dual"], 1e-6),
        _check("Riemann vs dual-number route", errs["riemann_dual"], 1e-6),
        _check("Ricci vs dual-number route", errs["ricci_dual"], 1e-6),
        _check("Christoffel vs finite differences", errs["gamma_fd"], 1e-6),
        _check("Christoffel derivatives vs finite differences", errs["dgamma_fd"], 1e-6),
        _check("Riemann vs finite differences", errs["riemann_fd"], 1e-6),
        _check("Ricci vs finite differences", errs["ricci_fd"], 1e-6),
        _check("2-d identity Ric = (R/2) g", errs["identity"], 1e-9),
    ]


def suite_sff(n=10, seed=0):
    from .training import loss_ric, loss_sff

    rng = np.random.default_rng(seed)
    e_riem = 0.0
    e_loss = 0.0
    for s in range(n):
        E = RandomSurface(seed * 1000 + s)
        u = rng.uniform(-1, 1, size=(4, 2))
        t = rng.uniform(0, 1, size=4)
        gram = lambda uu, tt: jax.jacfwd(E, argnums=0)(uu, tt).T @ jax.jacfwd(E, argnums=0)(uu, tt)
        for k in range(4):
            a = report_arrays(gram, jnp.asarray(u[k]), t[k])
            b = sff_arrays(E, jnp.asarray(u[k]), t[k])
            e_riem = max(e_riem, rel_err(a["riemann"], b["riemann_sff"]))
        lr_, _ = loss_ric(gram, u, t)
        ls_, _ = loss_sff(E, u, t)
        e_loss = max(e_loss, abs(float(lr_) - float(ls_)))
    return [
        _check("Riemann: Christoffel route vs second fundamental form", e_riem, 1e-8),
        _check("loss_ric on Gram metric vs loss_sff", e_loss, 1e-6),
    ]


def suite_transform(n=10, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for s in range(n):
        met = RandomMetric(seed * 1000 + 500 + s)
        A = rng.normal(scale=0.25, size=(2, 2))
        c = rng.normal(size=2)

        def phi(v, A=A, c=c):  # chart change u = phi(v)
            return v + A @ jnp.sin(v + c)

        def g_new(v, t, phi=phi, met=met):
            J = jax.jacfwd(phi)(v)
            return J.T @ met.jax(phi(v), t) @ J

        v = rng.uniform(-1, 1, size=2)
        t = float(rng.uniform(0, 1))
        J = np.asarray(jax.jacfwd(phi)(jnp.asarray(v)))
        ric_old = np.asarray(report_arrays(met.jax, phi(jnp.asarray(v)), t)["ricci"])
        ric_new = np.asarray(report_arrays(g_new, jnp.asarray(v), t)["ricci"])
        worst = max(worst, rel_err(transform_ricci(ric_old, J), ric_new))
    polar = lambda u, t: jnp.diag(jnp.stack([jnp.ones(()), u[0] ** 2]))
    pts = np.column_stack([rng.uniform(0.2, 3.0, 50), rng.uniform(0, 2 * np.pi, 50)])
    ric = jax.vmap(lambda u: report_arrays(polar, u, 0.0)["ricci"])(pts)
    return [
        _check("transform_ricci vs Ricci in transformed chart", worst, 1e-6),
        _check("flat metric in polar coordinates has zero Ricci", float(jnp.max(jnp.abs(ric))), 1e-9),
    ]


def run_suites(names=("all",), seed=0) -> dict:
    if "all" in names:
        names = SUITES
    table = {
        "autodiff": suite_autodiff,
        "cigar": suite_cigar,
        "sphere": suite_sphere,
        "pipeline": suite_pipeline,
        "sff": suite_sff,
        "transform": suite_transform,
    }
    report = {"suites": {}, "passed": True}
    for name in names:
        if name not in table:
            raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
        checks = table[name](seed=seed)
        ok = all(c["passed"] for c in checks)
        report["suites"][name] = {"passed": ok, "checks": checks}
        report["passed"] = report["passed"] and ok
    return report
