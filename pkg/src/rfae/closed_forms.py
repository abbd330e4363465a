"""Closed-form geometries: cigar soliton, torus, shrinking (d-1)-sphere, surfaces of revolution.

All maps are jax-traceable so they can stand in for learned networks inside
the training losses and serve as oracles for the geometry kernel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from .geometry import MetricField

GEOMETRY_IDS = ("cigar", "torus", "sphere", "surface_of_revolution")


class ExtinctionError(ValueError):
    """Sphere radius reached zero: the flow is singular at this time."""


class DegenerateProfileError(ValueError):
    pass


def _concrete(x) -> bool:
    return not isinstance(x, jax.core.Tracer)


# ---------------------------------------------------------------------------
# cigar soliton
# ---------------------------------------------------------------------------


def cigar_metric(u, t):
    """(du1^2 + du2^2) / (exp(4t) + |u|^2)."""
    u = jnp.asarray(u, dtype=jnp.float64)
    return jnp.eye(2) / (jnp.exp(4.0 * t) + jnp.dot(u, u))


# ---------------------------------------------------------------------------
# torus
# ---------------------------------------------------------------------------


def torus_metric(u, t=0.0, a=-1.0, b=2.0):
    u = jnp.asarray(u, dtype=jnp.float64)
    return jnp.diag(jnp.stack([(b + a * jnp.cos(u[1])) ** 2, jnp.asarray(a * a, dtype=jnp.float64)]))


def torus_embed(u, t=0.0, a=-1.0, b=2.0):
    u = jnp.asarray(u, dtype=jnp.float64)
    rho = b + a * jnp.cos(u[1])
    return jnp.stack([rho * jnp.cos(u[0]), rho * jnp.sin(u[0]), a * jnp.sin(u[1])])


def torus_curvature(u, a=-1.0, b=2.0):
    """Gaussian curvature cos(u2) / (a (b + a cos u2))."""
    c = np.cos(u[1])
    return c / (a * (b + a * c))


# ---------------------------------------------------------------------------
# (d-1)-sphere
# ---------------------------------------------------------------------------


def sphere_radius(R, d, t):
    """sqrt(R^2 - 2 (d - 2) t); raises ExtinctionError when the radicand is not positive."""
    rad = R * R - 2.0 * (d - 2) * t
    if _concrete(rad) and not np.all(np.asarray(rad) > 0):
        raise ExtinctionError(f"sphere extinct: R^2 - 2(d-2)t = {np.min(np.asarray(rad)):.4g} <= 0")
    return jnp.sqrt(rad)


def extinction_time(R, d):
    return np.inf if d <= 2 else R * R / (2.0 * (d - 2))


def sphere_embed(u, t, R=1.0, d=3, shift=None):
    """Hyperspherical coordinates on the (d-1)-sphere of radius r(t), optionally shifted."""
    u = jnp.asarray(u, dtype=jnp.float64)
    if u.shape[-1] != d - 1:
        raise ValueError(f"sphere chart for d={d} needs {d - 1} angles, got {u.shape[-1]}")
    r = sphere_radius(R, d, t)
    sins = jnp.cumprod(jnp.sin(u))  # prod_{j<=i} sin u^j
    prefix = jnp.concatenate([jnp.ones(1), sins[:-1]])
    x = jnp.concatenate([prefix * jnp.cos(u), sins[-1:]]) * r
    if shift is not None:
        x = x + jnp.asarray(shift, dtype=jnp.float64)
    return x


def sphere_metric(u, t, R=1.0, d=3):
    u = jnp.asarray(u, dtype=jnp.float64)
    r = sphere_radius(R, d, t)
    prefix = jnp.concatenate([jnp.ones(1), jnp.cumprod(jnp.sin(u[:-1]) ** 2)])
    return jnp.diag(r * r * prefix)


# ---------------------------------------------------------------------------
# surfaces of revolution
# ---------------------------------------------------------------------------


def _profile_derivs(fn, u1, t):
    d1 = jax.grad(fn, argnums=0)
    return fn(u1, t), d1(u1, t), jax.grad(d1, argnums=0)(u1, t)


def sor_embed(r_fn: Callable, z_fn: Callable, u, t):
    u = jnp.asarray(u, dtype=jnp.float64)
    r = r_fn(u[0], t)
    return jnp.stack([r * jnp.cos(u[1]), r * jnp.sin(u[1]), z_fn(u[0], t)])


def sor_metric(r_fn: Callable, z_fn: Callable, u, t):
    """[(d1 r)^2 + (d1 z)^2] du1^2 + r^2 du2^2."""
    u = jnp.asarray(u, dtype=jnp.float64)
    r, dr, _ = _profile_derivs(r_fn, u[0], t)
    _, dz, _ = _profile_derivs(z_fn, u[0], t)
    if _concrete(r) and not float(r) > 0:
        raise DegenerateProfileError(f"profile radius r={float(r):.4g} must be positive")
    return jnp.diag(jnp.stack([dr * dr + dz * dz, r * r]))


def sor_christoffel(r_fn: Callable, z_fn: Callable, u, t):
    """Closed-form Christoffel symbols ``gamma[i, j, l]`` of a surface of revolution.

    Nonzero: G_11^1 = (r'r'' + z'z'')/(r'^2 + z'^2), G_22^1 = -r r'/(r'^2 + z'^2),
    G_12^2 = G_21^2 = r'/r.
    """
    u = jnp.asarray(u, dtype=jnp.float64)
    r, dr, ddr = _profile_derivs(r_fn, u[0], t)
    _, dz, ddz = _profile_derivs(z_fn, u[0], t)
    if _concrete(r) and not float(r) > 0:
        raise DegenerateProfileError(f"profile radius r={float(r):.4g} must be positive")
    a = dr * dr + dz * dz
    gamma = jnp.zeros((2, 2, 2))
    gamma = gamma.at[0, 0, 0].set((dr * ddr + dz * ddz) / a)
    gamma = gamma.at[1, 1, 0].set(-r * dr / a)
    gamma = gamma.at[0, 1, 1].set(dr / r)
    gamma = gamma.at[1, 0, 1].set(dr / r)
    return gamma


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


@dataclass
class ClosedFormGeometry:
    id: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.id not in GEOMETRY_IDS:
            raise ValueError(f"unknown geometry id {self.id!r}")
        p = self.params
        if self.id == "torus":
            a, b = p.setdefault("a", -1.0), p.setdefault("b", 2.0)
            if abs(b) <= abs(a):
                raise ValueError("torus requires b + a cos(u2) != 0, i.e. |b| > |a|")
        elif self.id == "sphere":
            p.setdefault("R", 1.0)
            p.setdefault("d", 3)

    @property
    def m(self) -> int:
        return int(self.params["d"]) - 1 if self.id == "sphere" else 2

    def check_horizon(self, tau_max: float):
        """Sphere: radius must stay positive on [0, tau_max]."""
        if self.id == "sphere":
            R, d = self.params["R"], int(self.params["d"])
            if not R * R - 2.0 * (d - 2) * tau_max > 0:
                raise ExtinctionError(
                    f"horizon tau={tau_max:.4g} reaches sphere extinction time {extinction_time(R, d):.4g}"
                )

    def metric(self, u, t):
        p = self.params
        if self.id == "cigar":
            return cigar_metric(u, t)
        if self.id == "torus":
            return torus_metric(u, t, p["a"], p["b"])
        if self.id == "sphere":
            return sphere_metric(u, t, p["R"], int(p["d"]))
        return sor_metric(p["r_fn"], p["z_fn"], u, t)

    def metric_field(self) -> MetricField:
        return MetricField(self.metric, self.m, source=self.id)
