"""Training objective and loop for Ricci-flow-guided autoencoders.

Networks: P (initial data -> chart point u), g (metric PINN), E (chart x time ->
R^d), D (R^d -> solution on the mesh).  Special-case modes swap some of them
for closed forms.  Loss-term functions take plain callables so they can be
checked against frozen analytic maps; :class:`RicciAutoencoder` wires them to
the networks of a :class:`~rfae.nn.ModelBundle`.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np

from . import closed_forms as cf
from .geometry import COND_THRESHOLD, metric_from_jacobian, report_arrays, sff_arrays, symmetrize
from .nn import (
    ConfigError,
    MlpSpec,
    ModelBundle,
    NonFiniteGradientError,
    OptimState,
    mlp_forward,
    optimizer_step,
    piecewise_constant,
    save_checkpoint,
)
from .pde_data import PdeDataset

log = logging.getLogger(__name__)

MODES = ("full_ricci", "fixed_metric", "sphere", "surface_of_revolution", "sff_residual")
HISTORY_FIELDS = ("iter", "l_ric", "l_dec", "l_met", "l_sym", "total", "lr", "wd")
TWO_PI = 2.0 * math.pi


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "full_ricci"
    geometry: Optional[str] = None
    geometry_params: dict = field(default_factory=dict)
    sphere_variant: str = "closed"
    lambda_dec: float = 1.0
    lambda_met: float = 1.0
    lambda_sym: float = 1.0
    torus_symmetry: bool = True
    time_scale: float = 0.5
    horizon: Optional[float] = None
    pairing: str = "identity"
    latent_dim: int = 2
    embed_dim: int = 3
    width: int = 64
    depth: int = 3
    activation: str = "tanh"
    variant: str = "vanilla"
    batch_size: int = 64
    iterations: int = 2000
    lr: float = 1e-4
    lr_schedule: list = field(default_factory=list)
    weight_decay: float = 1e-4
    late_weight_decay: Optional[float] = None
    late_phase_start: Optional[int] = None
    clip: float = 1.0
    noise_u: float = 0.0
    noise_m: float = 0.0
    dropout: list = field(default_factory=list)
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0
    singular_cap: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.lambda_dec < 0 or self.lambda_met < 0 or self.lambda_sym < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not self.time_scale > 0:
            raise ConfigError("time_scale must be positive")
        if self.pairing not in ("identity", "uniform"):
            raise ConfigError("pairing must be 'identity' or 'uniform'")
        if self.mode == "fixed_metric" and self.geometry not in ("cigar", "torus", "sphere"):
            raise ConfigError("fixed_metric mode needs geometry in {cigar, torus, sphere}")
        if self.sphere_variant not in ("closed", "shift"):
            raise ConfigError("sphere_variant must be 'closed' or 'shift'")
        if self.mode in ("surface_of_revolution", "sff_residual") and (self.latent_dim != 2 or self.embed_dim != 3):
            raise ConfigError(f"{self.mode} needs a 2-d chart embedded in R^3")
        if self.batch_size <= 0 or self.iterations < 0:
            raise ConfigError("batch_size must be positive and iterations nonnegative")
        if any(not 0.0 <= p < 1.0 for p in self.dropout):
            raise ConfigError("dropout rates must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def closed_geometry(self) -> Optional[cf.ClosedFormGeometry]:
        if self.mode == "fixed_metric":
            return cf.ClosedFormGeometry(self.geometry, dict(self.geometry_params))
        if self.mode == "sphere":
            return cf.ClosedFormGeometry("sphere", dict(self.geometry_params))
        return None

    def chart_dims(self) -> tuple[int, int]:
        """(m, d): chart dimension and embedding dimension."""
        geo = self.closed_geometry()
        if geo is not None and geo.id == "sphere":
            d = int(geo.params["d"])
            return d - 1, d
        return self.latent_dim, self.embed_dim


# ---------------------------------------------------------------------------
# loss terms on plain callables (single-sample maps, batched by vmap)
# ---------------------------------------------------------------------------


def _singular_mask(metric_fn, u, t, threshold=COND_THRESHOLD):
    def cond(uu, tt):
        ev = jnp.abs(jnp.linalg.eigvalsh(symmetrize(metric_fn(uu, tt))))
        return jnp.max(ev) / jnp.maximum(jnp.min(ev), 1e-300)

    c = jax.vmap(cond)(u, t)
    return jnp.isfinite(c) & (c < threshold)


def ricci_residuals(metric_fn: Callable, u, t, threshold=COND_THRESHOLD):
    """Per-sample ``dt_g + 2 Ric`` (B, m, m) and a validity mask.

    Near-singular samples get the identity metric substituted so their
    (discarded) values stay finite under differentiation.
    """
    valid = jax.lax.stop_gradient(_singular_mask(metric_fn, u, t, threshold))
    m = u.shape[-1]

    def one(uu, tt, ok):
        fn = lambda a, b: jnp.where(ok, symmetrize(metric_fn(a, b)), jnp.eye(m))
        return report_arrays(fn, uu, tt)["residual"]

    return jax.vmap(one)(u, t, valid), valid


def loss_ric(metric_fn: Callable, u, t):
    """Mean over valid samples of ||dt_g + 2 Ric(g)||_F^2 / m^2; returns (loss, n_skipped)."""
    u = jnp.atleast_2d(jnp.asarray(u, dtype=jnp.float64))
    t = jnp.atleast_1d(jnp.asarray(t, dtype=jnp.float64))
    res, valid = ricci_residuals(metric_fn, u, t)
    m = u.shape[-1]
    per = jnp.sum(res**2, axis=(-2, -1)) / m**2
    nv = jnp.sum(valid)
    return jnp.sum(jnp.where(valid, per, 0.0)) / jnp.maximum(nv, 1), u.shape[0] - nv


def loss_dec(pred, target):
    """Mean squared error per node, averaged over the batch."""
    pred = jnp.asarray(pred)
    target = jnp.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"decoder output shape {pred.shape} != snapshot shape {target.shape}")
    return jnp.mean((pred - target) ** 2)


def gram_batch(embed_fn: Callable, u, t):
    return jax.vmap(lambda a, b: metric_from_jacobian(embed_fn, a, b))(u, t)


def loss_met(metric_fn: Callable, embed_fn: Callable, u, tau_tilde, tau_hat=None):
    """Mean of ||g(u, tau~) - (JE)^T JE(u, tau^)||_F^2 / m^2."""
    u = jnp.atleast_2d(jnp.asarray(u, dtype=jnp.float64))
    tau_tilde = jnp.atleast_1d(jnp.asarray(tau_tilde, dtype=jnp.float64))
    tau_hat = tau_tilde if tau_hat is None else jnp.atleast_1d(jnp.asarray(tau_hat, dtype=jnp.float64))
    g = jax.vmap(lambda a, b: symmetrize(metric_fn(a, b)))(u, tau_tilde)
    G = gram_batch(embed_fn, u, tau_hat)
    m = u.shape[-1]
    return jnp.mean(jnp.sum((g - G) ** 2, axis=(-2, -1)) / m**2)


def loss_fixed_metric(embed_fn: Callable, u, tau_hat, geometry: cf.ClosedFormGeometry):
    """Metric-matching term against a closed-form metric.

    0.5 * sum_j (g_jj - |d_j E|^2)^2 + sum_{i<j} (g_ij - <d_i E, d_j E>)^2, i.e. half the
    squared Frobenius mismatch, averaged over the batch.
    """
    u = jnp.atleast_2d(jnp.asarray(u, dtype=jnp.float64))
    tau_hat = jnp.atleast_1d(jnp.asarray(tau_hat, dtype=jnp.float64))
    g = jax.vmap(geometry.metric)(u, tau_hat)
    G = gram_batch(embed_fn, u, tau_hat)
    return jnp.mean(0.5 * jnp.sum((g - G) ** 2, axis=(-2, -1)))


def loss_torus_symmetry(embed_fn: Callable, u, tau_hat, delta):
    """Gram-matrix invariance under u1 -> u1 + delta and u2 -> 2 pi - u2."""
    u = jnp.atleast_2d(jnp.asarray(u, dtype=jnp.float64))
    tau_hat = jnp.atleast_1d(jnp.asarray(tau_hat, dtype=jnp.float64))
    delta = jnp.atleast_1d(jnp.asarray(delta, dtype=jnp.float64))
    G = gram_batch(embed_fn, u, tau_hat)
    G_shift = gram_batch(embed_fn, u.at[:, 0].add(delta), tau_hat)
    G_flip = gram_batch(embed_fn, u.at[:, 1].set(TWO_PI - u[:, 1]), tau_hat)
    return jnp.mean(jnp.sum((G - G_shift) ** 2, axis=(-2, -1)) + jnp.sum((G - G_flip) ** 2, axis=(-2, -1)))


def sphere_points(u, tau_hat, R, d, shift=None):
    x = jax.vmap(lambda a, b: cf.sphere_embed(a, b, R, d))(u, tau_hat)
    return x if shift is None else x + shift


def loss_sphere(decode_fn: Callable, u, tau_hat, target, R=1.0, d=3, shift=None):
    """Decoder-only objective through the closed-form shrinking sphere (optionally shifted)."""
    x = sphere_points(jnp.atleast_2d(u), jnp.atleast_1d(tau_hat), R, d, shift)
    return loss_dec(decode_fn(x), target)


def sor_ricci(r_fn: Callable, z_fn: Callable, u, t):
    """Ricci tensor of a surface of revolution from its closed-form Christoffel symbols."""
    from .geometry import ricci, riemann

    gamma = cf.sor_christoffel(r_fn, z_fn, u, t)
    dgam = jax.jacfwd(lambda uu: cf.sor_christoffel(r_fn, z_fn, uu, t))(u)  # [i, k, l, j]
    dgamma = jnp.transpose(dgam, (3, 0, 1, 2))
    return ricci(riemann(gamma, dgamma))


def sor_terms(r_fn: Callable, z_fn: Callable, u, t):
    """Per-sample residual terms (diag-11, diag-22, off-diagonal) for the profile flow."""
    u = jnp.asarray(u, dtype=jnp.float64)
    ric = sor_ricci(r_fn, z_fn, u, t)

    def g11(tt):
        dr = jax.grad(r_fn, argnums=0)(u[0], tt)
        dz = jax.grad(z_fn, argnums=0)(u[0], tt)
        return dr * dr + dz * dz

    dt11 = jax.grad(g11)(t)
    dt22 = jax.grad(lambda tt: r_fn(u[0], tt) ** 2)(t)
    return jnp.stack(
        [
            (dt11 + 2.0 * ric[0, 0]) ** 2,
            (dt22 + 2.0 * ric[1, 1]) ** 2,
            (2.0 * ric[0, 1]) ** 2 + (2.0 * ric[1, 0]) ** 2,
        ]
    )


def loss_sor(r_fn: Callable, z_fn: Callable, u, t):
    """Flow residual for surfaces of revolution: mean of the three residual terms' sum."""
    u = jnp.atleast_2d(jnp.asarray(u, dtype=jnp.float64))
    t = jnp.atleast_1d(jnp.asarray(t, dtype=jnp.float64))
    terms = jax.vmap(lambda a, b: sor_terms(r_fn, z_fn, a, b))(u, t)
    return jnp.mean(jnp.sum(terms, axis=-1))


def loss_sff(embed_fn: Callable, u, t, tol=1e-10):
    """Second-fundamental-form flow residual, mean of ||.||_F^2 / m^2; returns (loss, n_skipped)."""
    u = jnp.atleast_2d(jnp.asarray(u, dtype=jnp.float64))
    t = jnp.atleast_1d(jnp.asarray(t, dtype=jnp.float64))

    def cross_norm(a, b):
        jac = jax.jacfwd(embed_fn, argnums=0)(a, b)
        return jnp.linalg.norm(jnp.cross(jac[:, 0], jac[:, 1]))

    cn = jax.lax.stop_gradient(jax.vmap(cross_norm)(u, t))
    valid = jnp.isfinite(cn) & (cn > tol)

    def one(a, b, ok):
        # planar fallback keeps discarded samples finite
        fn = lambda uu, tt: jnp.where(ok, embed_fn(uu, tt), jnp.stack([uu[0], uu[1], 0.0 * tt]))
        return sff_arrays(fn, a, b)["residual_sff"]

    res = jax.vmap(one)(u, t, valid)
    m = u.shape[-1]
    per = jnp.sum(res**2, axis=(-2, -1)) / m**2
    nv = jnp.sum(valid)
    return jnp.sum(jnp.where(valid, per, 0.0)) / jnp.maximum(nv, 1), u.shape[0] - nv


def inject_noise(x, kind: str, constant: float, key, radius=1.0):
    """Multiplicative chart noise ``u + C u * xi`` or radius-scaled manifold noise ``M + C r xi``."""
    if constant == 0.0 or key is None:
        return x
    xi = jax.random.normal(key, jnp.shape(x), dtype=jnp.float64)
    if kind == "u":
        return x + constant * x * xi
    if kind == "manifold":
        r = jnp.asarray(radius, dtype=jnp.float64)
        if r.ndim == 1:
            r = r[:, None]
        return x + constant * r * xi
    raise ValueError(f"unknown noise kind {kind!r}")


# ---------------------------------------------------------------------------
# model wiring
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    l_ric: float
    l_dec: float
    l_met: float
    l_sym: float
    total: float
    n_singular: int = 0


def build_specs(cfg: TrainConfig, n_mesh: int) -> dict[str, MlpSpec]:
    m, d = cfg.chart_dims()
    hidden = (cfg.width,) * cfg.depth

    def spec(i, o):
        return MlpSpec(i, o, hidden, cfg.activation, cfg.variant)

    specs = {"P": spec(n_mesh, m)}
    if cfg.mode == "full_ricci":
        specs["g"] = spec(m + 1, m * m)
        specs["E"] = spec(m + 1, d)
    elif cfg.mode in ("fixed_metric", "sff_residual"):
        specs["E"] = spec(m + 1, d)
    elif cfg.mode == "sphere" and cfg.sphere_variant == "shift":
        specs["S"] = spec(1, d)
    elif cfg.mode == "surface_of_revolution":
        specs["r"] = spec(2, 1)
        specs["z"] = spec(2, 1)
    specs["D"] = spec(d, n_mesh)
    return specs


def build_bundle(cfg: TrainConfig, dataset: PdeDataset) -> ModelBundle:
    geo = cfg.closed_geometry()
    T = cfg.horizon if cfg.horizon is not None else dataset.horizon
    if geo is not None:
        geo.check_horizon(cfg.time_scale * T)
    info = {"N": int(dataset.mesh.size), "T": float(T), "pde": dataset.pde, "mesh": dataset.mesh.to_dict()}
    return ModelBundle.initialize(
        build_specs(cfg, dataset.mesh.size),
        cfg.seed,
        cfg.time_scale,
        {"train": cfg.to_dict(), "data": info},
    )


class RicciAutoencoder:
    """Pure functions of the flat parameter vector for one bundle."""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        self.cfg = TrainConfig.from_dict(bundle.config["train"])
        self.info = bundle.config["data"]
        self.geometry = self.cfg.closed_geometry()
        self.m, self.d = self.cfg.chart_dims()
        self.tau_max = self.cfg.time_scale * self.info["T"]

    # -- networks ----------------------------------------------------------
    def _net(self, name, theta, x, dropout=(), key=None):
        return mlp_forward(self.bundle.specs[name], self.bundle.params.view(name, theta), x, dropout, key)

    def chart(self, theta, phi0):
        """u = P(phi0), mapped smoothly into the angle box where the chart is periodic."""
        raw = self._net("P", theta, phi0)
        geo = self.geometry
        if geo is not None and geo.id == "torus":
            return TWO_PI * jax.nn.sigmoid(raw)
        if geo is not None and geo.id == "sphere":
            hi = jnp.full(self.m, jnp.pi).at[-1].set(TWO_PI)
            return hi * jax.nn.sigmoid(raw)
        return raw

    def metric_fn(self, theta):
        m = self.m
        return lambda u, t: self._net("g", theta, jnp.concatenate([u, jnp.atleast_1d(t)])).reshape(m, m)

    def embed_fn(self, theta):
        cfg = self.cfg
        if cfg.mode == "surface_of_revolution":
            r_fn, z_fn = self.profile_fns(theta)
            return lambda u, t: cf.sor_embed(r_fn, z_fn, u, t)
        if cfg.mode == "sphere":
            R, d = self.geometry.params["R"], int(self.geometry.params["d"])
            if cfg.sphere_variant == "shift":
                return lambda u, t: cf.sphere_embed(u, t, R, d) + self._net("S", theta, jnp.atleast_1d(t))
            return lambda u, t: cf.sphere_embed(u, t, R, d)
        return lambda u, t: self._net("E", theta, jnp.concatenate([u, jnp.atleast_1d(t)]))

    def profile_fns(self, theta):
        r_fn = lambda u1, t: jax.nn.softplus(self._net("r", theta, jnp.stack([u1, t]))[0]) + 1e-3
        z_fn = lambda u1, t: self._net("z", theta, jnp.stack([u1, t]))[0]
        return r_fn, z_fn

    def radius(self, tau):
        if self.cfg.mode == "sphere":
            return cf.sphere_radius(self.geometry.params["R"], int(self.geometry.params["d"]), tau)
        return jnp.ones_like(tau)

    def decode(self, theta, x, key=None):
        return self._net("D", theta, x, self.cfg.dropout if key is not None else (), key)

    def embed_batch(self, theta, u, tau):
        return jax.vmap(self.embed_fn(theta))(u, tau)

    def predict(self, theta, phi0, t):
        """Deterministic prediction of phi(., t) from phi0 (batched)."""
        u = self.chart(theta, phi0)
        tau = self.cfg.time_scale * jnp.asarray(t, dtype=jnp.float64)
        return self.decode(theta, self.embed_batch(theta, u, tau))

    # -- objective ---------------------------------------------------------
    def losses(self, theta, batch, key=None):
        """Total loss and its parts for one batch.  ``key=None`` disables noise and dropout."""
        cfg = self.cfg
        u = self.chart(theta, batch["phi0"])
        tau_hat, tau_tilde = batch["tau_hat"], batch["tau_tilde"]
        if key is not None:
            k_u, k_m, k_d = jax.random.split(key, 3)
        else:
            k_u = k_m = k_d = None
        embed = self.embed_fn(theta)
        u_dec = inject_noise(u, "u", cfg.noise_u, k_u)
        x = jax.vmap(embed)(u_dec, tau_hat)
        x = inject_noise(x, "manifold", cfg.noise_m, k_m, self.radius(tau_hat))
        l_dec = loss_dec(self.decode(theta, x, k_d), batch["target"])
        zero = jnp.zeros((), dtype=jnp.float64)
        l_ric = l_met = l_sym = zero
        n_sing = jnp.zeros((), dtype=jnp.int64)
        if cfg.mode == "full_ricci":
            gfn = self.metric_fn(theta)
            l_ric, n_sing = loss_ric(gfn, u, tau_tilde)
            l_met = loss_met(gfn, embed, u, tau_tilde, tau_hat)
            total = l_ric + cfg.lambda_dec * l_dec + cfg.lambda_met * l_met
        elif cfg.mode == "fixed_metric":
            l_met = loss_fixed_metric(embed, u, tau_hat, self.geometry)
            if self.geometry.id == "torus" and cfg.torus_symmetry:
                l_sym = loss_torus_symmetry(embed, u, tau_hat, batch["delta"])
            total = cfg.lambda_dec * l_dec + cfg.lambda_met * l_met + cfg.lambda_sym * l_sym
        elif cfg.mode == "sphere":
            total = cfg.lambda_dec * l_dec
        elif cfg.mode == "surface_of_revolution":
            r_fn, z_fn = self.profile_fns(theta)
            l_ric = loss_sor(r_fn, z_fn, u, tau_hat)
            total = l_ric + cfg.lambda_dec * l_dec
        else:  # sff_residual
            l_ric, n_sing = loss_sff(embed, u, tau_tilde)
            total = l_ric + cfg.lambda_dec * l_dec
        return total, {"l_ric": l_ric, "l_dec": l_dec, "l_met": l_met, "l_sym": l_sym, "n_singular": n_sing}

    def breakdown(self, theta, batch, key=None) -> LossBreakdown:
        total, parts = self.losses(jnp.asarray(theta), batch, key)
        return LossBreakdown(
            float(parts["l_ric"]),
            float(parts["l_dec"]),
            float(parts["l_met"]),
            float(parts["l_sym"]),
            float(total),
            int(parts["n_singular"]),
        )


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def draw_batch(rng: np.random.Generator, ds: PdeDataset, cfg: TrainConfig, tau_max: float) -> dict:
    """Sample (initial condition, snapshot) pairs and their collocation times."""
    n, k = ds.snap_times.shape
    B = cfg.batch_size
    i = rng.integers(n, size=B)
    j = rng.integers(k, size=B)
    tau_hat = cfg.time_scale * ds.snap_times[i, j]
    if cfg.pairing == "identity":
        tau_tilde = tau_hat.copy()
    else:
        tau_tilde = rng.uniform(0.0, tau_max, size=B)
    delta = rng.uniform(0.0, TWO_PI, size=B)
    return {
        "phi0": ds.phi0[i],
        "target": ds.snapshots[i, j],
        "tau_hat": tau_hat,
        "tau_tilde": tau_tilde,
        "delta": delta,
    }


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list = field(default_factory=list)
    n_singular: int = 0
    seconds: float = 0.0

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row["iter"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()


def make_step_fn(model: RicciAutoencoder):
    def f(theta, batch, key):
        return model.losses(theta, batch, key)

    return jax.jit(jax.value_and_grad(f, has_aux=True))


def train(cfg: TrainConfig, dataset: PdeDataset, out_dir=None, bundle: ModelBundle | None = None, progress=None) -> TrainResult:
    """Run the optimization loop; writes checkpoints/history into ``out_dir`` when given."""
    if bundle is None:
        bundle = build_bundle(cfg, dataset)
    if dataset.mesh.size != bundle.config["data"]["N"]:
        raise ConfigError("dataset mesh size does not match decoder output size")
    model = RicciAutoencoder(bundle)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    base_key = jax.random.PRNGKey(cfg.seed)
    regularized = cfg.noise_u > 0 or cfg.noise_m > 0 or any(p > 0 for p in cfg.dropout)
    step_fn = make_step_fn(model)
    state = OptimState.zeros(len(bundle.params), lr=cfg.lr, weight_decay=cfg.weight_decay, clip=cfg.clip)
    history = []
    n_sing_total = 0
    t0 = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        batch = draw_batch(rng, dataset, cfg, model.tau_max)
        key = jax.random.fold_in(base_key, it) if regularized else None
        theta = jnp.asarray(bundle.params.data)
        (total, parts), grad = step_fn(theta, batch, key)
        total = float(total)
        n_sing = int(parts["n_singular"])
        n_sing_total += n_sing
        if n_sing > cfg.singular_cap * cfg.batch_size:
            log.warning("iteration %d: %d near-singular metric samples skipped", it, n_sing)
        lr = piecewise_constant(it, cfg.lr, cfg.lr_schedule)
        wd = cfg.weight_decay
        if cfg.late_weight_decay is not None and cfg.late_phase_start is not None and it >= cfg.late_phase_start:
            wd = cfg.late_weight_decay
        if not math.isfinite(total):
            _abort(out, bundle, it, "non-finite total loss")
        state.lr, state.weight_decay = lr, wd
        try:
            optimizer_step(state, bundle.params, np.asarray(grad))
        except NonFiniteGradientError as exc:
            _abort(out, bundle, it, str(exc))
        bundle.step = it
        history.append(
            {
                "iter": it,
                "l_ric": float(parts["l_ric"]),
                "l_dec": float(parts["l_dec"]),
                "l_met": float(parts["l_met"]),
                "l_sym": float(parts["l_sym"]),
                "total": total,
                "lr": lr,
                "wd": wd,
            }
        )
        if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{it:06d}", bundle)
        if progress is not None:
            progress(it, history[-1])
    seconds = time.perf_counter() - t0
    if out is not None:
        save_checkpoint(out / "final", bundle)
        (out / "history.csv").write_text(history_to_csv(history))
        with open(out / "train.log", "a") as fh:
            fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} finished {cfg.iterations} iterations in {seconds:.1f}s\n")
    return TrainResult(bundle, history, n_sing_total, seconds)


def _abort(out, bundle, it, why):
    if out is not None:
        save_checkpoint(out / "last_good", bundle)
    raise TrainingDivergedError(f"iteration {it}: {why}; last good parameters kept")
