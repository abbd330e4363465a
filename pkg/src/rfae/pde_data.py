"""Dataset generation: viscous Burgers, diffusion-reaction with source, 2-d wave.

Datasets are stored as ``<name>.meta.json`` plus ``<name>.f64`` (raw
little-endian float64, arrays concatenated in manifest order).
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import lu_factor, lu_solve

DS_MAGIC = "RFAE-DS"
DS_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


class ReactionBlowUpError(SolverError):
    pass


class CFLError(ValueError):
    def __init__(self, ratio, limit, suggested_dt):
        super().__init__(
            f"CFL number {ratio:.4g} exceeds {limit:.4g}; use a time step <= {suggested_dt:.4g}"
        )
        self.suggested_dt = suggested_dt


class NormalizationError(ValueError):
    def __init__(self, sample, value):
        super().__init__(f"sample {sample}: integral {value:.3e} too close to zero to normalize")
        self.sample = sample


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mesh1D:
    """Equispaced 1-d mesh.  Periodic meshes omit the right endpoint (it duplicates x=a)."""

    a: float = 0.0
    b: float = 1.0
    n: int = 101
    periodic: bool = False

    @property
    def h(self) -> float:
        return (self.b - self.a) / (self.n if self.periodic else self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.a + self.h * np.arange(self.n)

    @property
    def size(self) -> int:
        return self.n

    @property
    def cell_volume(self) -> float:
        return self.h

    def to_dict(self):
        return {"kind": "1d", "a": self.a, "b": self.b, "n": self.n, "periodic": self.periodic}


@dataclass(frozen=True)
class Mesh2D:
    ax: float = 0.0
    bx: float = 5.0
    nx: int = 80
    ay: float = 0.0
    by: float = 5.0
    ny: int = 80

    @property
    def hx(self) -> float:
        return (self.bx - self.ax) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.by - self.ay) / (self.ny - 1)

    @property
    def x(self) -> np.ndarray:
        return self.ax + self.hx * np.arange(self.nx)

    @property
    def y(self) -> np.ndarray:
        return self.ay + self.hy * np.arange(self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_volume(self) -> float:
        return self.hx * self.hy

    def grid(self):
        return np.meshgrid(self.x, self.y, indexing="ij")

    def to_dict(self):
        return {"kind": "2d", "ax": self.ax, "bx": self.bx, "nx": self.nx, "ay": self.ay, "by": self.by, "ny": self.ny}


def mesh_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    return Mesh1D(**d) if kind == "1d" else Mesh2D(**d)


# ---------------------------------------------------------------------------
# initial-condition families
# ---------------------------------------------------------------------------

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class IcFamily:
    id: str
    ranges: dict
    pde: str


FAMILIES = {
    "A1": IcFamily("A1", {"alpha": (-1.0, 1.0), "beta": (-1.0, 1.0)}, "burgers"),
    # magnitudes in [1, 1.5] with random sign: outside the A1 box
    "A1_new": IcFamily("A1_new", {"alpha": (-1.5, -1.0, 1.0, 1.5), "beta": (-1.5, -1.0, 1.0, 1.5)}, "burgers"),
    "A2": IcFamily("A2", {"alpha": (-1.0, 1.0), "beta": (-1.0, 1.0)}, "diffusion_reaction"),
    "A2_new1": IcFamily(
        "A2_new1", {"alpha": (-1.75, 1.75), "beta": (-1.75, 1.75), "gamma": (-1.0, 1.0)}, "diffusion_reaction"
    ),
    "A2_new2": IcFamily("A2_new2", {"alpha": (0.0, 1.0), "beta": (0.0, 1.0)}, "diffusion_reaction"),
    "A2_new3": IcFamily("A2_new3", {"alpha": (0.0, 1.0), "beta": (0.0, 1.0)}, "diffusion_reaction"),
    "gauss_impulse": IcFamily("gauss_impulse", {"mu1": (1.0, 4.0), "mu2": (1.0, 4.0)}, "wave2d"),
}


def family_formula(fid: str, p: dict, mesh) -> np.ndarray:
    if fid == "gauss_impulse":
        X, Y = mesh.grid()
        return (10.0 * np.exp(-((X - p["mu1"]) ** 2) / 0.1 - (Y - p["mu2"]) ** 2 / 0.1)).ravel()
    x = mesh.nodes
    a, b = p.get("alpha", 0.0), p.get("beta", 0.0)
    if fid in ("A1", "A1_new"):
        return a * np.sin(TWO_PI * x) + b * np.cos(TWO_PI * x) ** 3
    if fid == "A2":
        return a * np.sin(TWO_PI * x) + (a + 0.5) / 2 * np.cos(2 * TWO_PI * x) + b / 3 * np.sin(2 * TWO_PI * x)
    if fid == "A2_new1":
        g = p["gamma"]
        return a * np.sin(TWO_PI * x) + (g + 0.5) * np.cos(2 * TWO_PI * x) + b * np.sin(2 * TWO_PI * x)
    if fid == "A2_new2":
        k = 3.5 * np.pi
        return a * np.sin(TWO_PI * x) + (a + 0.5) / 2 * np.cos(k * x) + b / 3 * np.sin(k * x)
    if fid == "A2_new3":
        k = 4.5 * np.pi
        return a * np.sin(TWO_PI * x) + (a + 1.0) / 2 * np.cos(k * x) + b / 3 * np.sin(k * x)
    raise ValueError(f"unknown family {fid!r}")


def _draw(rng, r):
    if len(r) == 2:
        return float(rng.uniform(r[0], r[1]))
    # union of [r0, r1] and [r2, r3] with equal total weight per piece length
    lo1, hi1, lo2, hi2 = r
    w1 = hi1 - lo1
    s = rng.uniform(0.0, w1 + hi2 - lo2)
    return float(lo1 + s if s < w1 else lo2 + (s - w1))


def sample_ic(family, rng, mesh=None):
    """Draw family coefficients uniformly from their box; returns ``(params, phi0)``."""
    if isinstance(family, str):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}")
        family = FAMILIES[family]
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if mesh is None:
        mesh = default_mesh(family.pde)
    params = {k: _draw(rng, r) for k, r in family.ranges.items()}
    return params, family_formula(family.id, params, mesh)


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def _check_grid(times):
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0 or times[0] < 0 or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing and start at t >= 0")
    return times


def solve_burgers(phi0, nu: float, mesh: Mesh1D, times, cfl=0.5):
    """Periodic viscous Burgers on ``mesh``; returns snapshots at ``times``.

    Conservative Engquist-Osher upwind flux for (phi^2/2)_x, explicit; diffusion
    Crank-Nicolson, solved exactly in Fourier space.  Sub-steps are chosen so
    max|phi| dt / h <= ``cfl``.
    """
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    if not mesh.periodic:
        raise ValueError("Burgers solver needs a periodic mesh")
    times = _check_grid(times)
    phi = np.array(phi0, dtype=np.float64)
    n, h = mesh.n, mesh.h
    k = np.arange(n // 2 + 1)
    lap_eig = (2.0 * np.cos(TWO_PI * k / n) - 2.0) / h**2
    bound = np.max(np.abs(phi)) + 1e-12
    out = np.empty((times.size, n))
    t = 0.0
    cached_dt, mult = None, None
    for i, t_out in enumerate(times):
        while t < t_out - 1e-14:
            amax = max(np.max(np.abs(phi)), 1e-12)
            dt = min(cfl * h / amax, t_out - t)
            nsub = max(1, math.ceil((t_out - t) / dt - 1e-12))
            dt = (t_out - t) / nsub
            if dt != cached_dt:
                cached_dt = dt
                mult = (1.0 + 0.5 * dt * nu * lap_eig, 1.0 - 0.5 * dt * nu * lap_eig)
            for _ in range(nsub):
                fp = 0.5 * np.maximum(phi, 0.0) ** 2
                fm = 0.5 * np.minimum(phi, 0.0) ** 2
                flux = fp + np.roll(fm, -1)  # F_{j+1/2}
                adv = -(flux - np.roll(flux, 1)) / h
                rhs = np.fft.rfft(phi) * mult[0] + dt * np.fft.rfft(adv)
                phi = np.fft.irfft(rhs / mult[1], n)
            t = t_out
            if not np.all(np.isfinite(phi)) or np.max(np.abs(phi)) > 10.0 * bound:
                raise SolverError(f"Burgers solver failed to stabilize near t={t:.4g}")
        out[i] = phi
    return out


def _dirichlet_lap(n_int, h):
    main = -2.0 * np.ones(n_int)
    off = np.ones(n_int - 1)
    return (np.diag(main) + np.diag(off, 1) + np.diag(off, -1)) / h**2


def solve_diffusion_reaction(f, D: float, lam: float, mesh: Mesh1D, times, phi0=None, substeps=1):
    """d_t phi = D phi_xx + lam phi^2 + f(x) with zero Dirichlet boundaries.

    Crank-Nicolson diffusion with a Heun predictor-corrector for the reaction
    and source terms (second order in time).  ``phi0`` defaults to ``f``.
    """
    if D <= 0:
        raise ValueError("diffusion coefficient must be positive")
    if mesh.periodic:
        raise ValueError("diffusion-reaction solver uses a Dirichlet mesh")
    times = _check_grid(times)
    f = np.asarray(f, dtype=np.float64)
    phi = np.array(f if phi0 is None else phi0, dtype=np.float64)
    n, h = mesh.n, mesh.h
    L = _dirichlet_lap(n - 2, h)
    fi = f[1:-1]
    out = np.empty((times.size, n))
    t = 0.0
    cache = {}
    for i, t_out in enumerate(times):
        if t_out > t + 1e-14:
            nsub = max(1, int(substeps))
            dt = (t_out - t) / nsub
            key = round(dt, 15)
            if key not in cache:
                eye = np.eye(n - 2)
                cache[key] = (eye + 0.5 * dt * D * L, lu_factor(eye - 0.5 * dt * D * L))
            A, lu = cache[key]
            u = phi[1:-1].copy()
            for _ in range(nsub):
                r0 = lam * u * u + fi
                base = A @ u
                pred = lu_solve(lu, base + dt * r0)
                r1 = lam * pred * pred + fi
                u = lu_solve(lu, base + 0.5 * dt * (r0 + r1))
            phi = np.concatenate([[0.0], u, [0.0]])
            t = t_out
            amax = np.max(np.abs(phi))
            if not np.isfinite(amax) or amax > 1e6:
                raise ReactionBlowUpError(f"reaction blow-up near t={t:.4g}")
        out[i] = phi
    return out


def _neumann_lap(phi, hx, hy):
    p = np.pad(phi, 1, mode="reflect")
    return (p[2:, 1:-1] - 2 * phi + p[:-2, 1:-1]) / hx**2 + (p[1:-1, 2:] - 2 * phi + p[1:-1, :-2]) / hy**2


def _trap_weights(mesh: Mesh2D):
    wx = np.ones(mesh.nx)
    wx[[0, -1]] = 0.5
    wy = np.ones(mesh.ny)
    wy[[0, -1]] = 0.5
    return np.outer(wx, wy) * mesh.hx * mesh.hy


def wave_energy(prev, nxt, dt, c, mesh: Mesh2D) -> float:
    """Discrete energy between two leapfrog levels (conserved exactly by the scheme)."""
    w = _trap_weights(mesh)
    kin = 0.5 * np.sum(w * ((nxt - prev) / dt) ** 2)
    pot = -0.5 * c * c * np.sum(w * nxt * _neumann_lap(prev, mesh.hx, mesh.hy))
    return float(kin + pot)


def solve_wave2d(phi0, c: float, mesh: Mesh2D, times, substeps=1, return_energy=False):
    """Leapfrog for phi_tt = c^2 Lap phi with Neumann boundaries and zero initial velocity.

    ``times`` must be uniform; the step is the grid spacing divided by ``substeps``.
    """
    times = _check_grid(times)
    if times[0] != 0.0:
        raise ValueError("wave time grid must start at 0")
    steps = np.diff(times)
    if steps.size and not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ValueError("wave solver needs a uniform time grid")
    phi = np.asarray(phi0, dtype=np.float64).reshape(mesh.nx, mesh.ny)
    out = np.empty((times.size, mesh.size))
    out[0] = phi.ravel()
    energies = []
    if times.size == 1:
        return (out, np.array(energies)) if return_energy else out
    dt = steps[0] / max(1, int(substeps))
    limit = 1.0 / math.sqrt(2.0)
    hmin = min(mesh.hx, mesh.hy)
    ratio = c * dt / hmin
    if ratio > limit:
        raise CFLError(ratio, limit, limit * hmin / c)
    nsub = max(1, int(substeps))
    prev = phi
    cur = phi + 0.5 * (c * dt) ** 2 * _neumann_lap(phi, mesh.hx, mesh.hy)
    energies.append(wave_energy(prev, cur, dt, c, mesh))
    level = 1
    for i in range(1, times.size):
        target = i * nsub
        while level < target:
            nxt = 2 * cur - prev + (c * dt) ** 2 * _neumann_lap(cur, mesh.hx, mesh.hy)
            prev, cur = cur, nxt
            level += 1
            energies.append(wave_energy(prev, cur, dt, c, mesh))
        out[i] = cur.ravel()
    return (out, np.array(energies)) if return_energy else out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


PDES = ("burgers", "diffusion_reaction", "wave2d")


def default_mesh(pde: str):
    if pde == "burgers":
        return Mesh1D(0.0, 1.0, 100, periodic=True)
    if pde == "diffusion_reaction":
        return Mesh1D(0.0, 1.0, 101, periodic=False)
    if pde == "wave2d":
        return Mesh2D()
    raise ValueError(f"unknown pde {pde!r}")


def default_times(pde: str) -> np.ndarray:
    if pde == "wave2d":
        return np.linspace(0.0, 4.0, 101)
    return np.linspace(0.0, 1.0, 101)


DEFAULT_PDE_PARAMS = {
    "burgers": {"nu": 0.01},
    "diffusion_reaction": {"D": 0.01, "lam": 0.01},
    "wave2d": {"c": 1.0},
}


@dataclass
class PdeDataset:
    pde: str
    family: str
    mesh: Mesh1D | Mesh2D
    times: np.ndarray  # full solver time grid
    params: list  # per-sample family coefficients
    phi0: np.ndarray  # (n, N)
    snap_times: np.ndarray  # (n, k)
    snapshots: np.ndarray  # (n, k, N)
    norm: np.ndarray  # (n,)
    pde_params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        n, N = self.phi0.shape
        if N != self.mesh.size:
            raise ValueError("initial arrays do not match mesh size")
        if self.snapshots.shape[0] != n or self.snapshots.shape[2] != N:
            raise ValueError("snapshot array shape mismatch")
        if self.snap_times.shape != self.snapshots.shape[:2]:
            raise ValueError("snapshot times shape mismatch")
        if self.norm.shape != (n,) or len(self.params) != n:
            raise ValueError("per-sample metadata length mismatch")
        T = self.times[-1]
        if np.any(self.snap_times < self.times[0] - 1e-12) or np.any(self.snap_times > T + 1e-12):
            raise ValueError("snapshot time outside [0, T]")

    @property
    def n_samples(self) -> int:
        return self.phi0.shape[0]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def subset(self, idx) -> "PdeDataset":
        idx = np.asarray(idx)
        return PdeDataset(
            self.pde,
            self.family,
            self.mesh,
            self.times,
            [self.params[i] for i in idx],
            self.phi0[idx],
            self.snap_times[idx],
            self.snapshots[idx],
            self.norm[idx],
            dict(self.pde_params),
            dict(self.meta),
        )


def _solve_one(pde, phi0, mesh, times, pp):
    if pde == "burgers":
        return solve_burgers(phi0, pp["nu"], mesh, times)
    if pde == "diffusion_reaction":
        return solve_diffusion_reaction(phi0, pp["D"], pp["lam"], mesh, times)
    return solve_wave2d(phi0, pp["c"], mesh, times)


def _threads():
    env = os.environ.get("RFAE_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def generate_dataset(pde: str, family: str, n: int, nt: int = 100, seed: int = 0, mesh=None, times=None, workers=None, **pde_params):
    """Sample ``n`` initial conditions and ``nt`` snapshot times each (without replacement).

    Every sample has its own seed stream, so results do not depend on ``workers``.
    When ``nt`` is at least the grid length, every grid time is kept.
    """
    if pde not in PDES:
        raise ValueError(f"unknown pde {pde!r}")
    fam = FAMILIES.get(family)
    if fam is None:
        raise ValueError(f"unknown family {family!r}")
    if fam.pde != pde:
        raise ValueError(f"family {family} belongs to pde {fam.pde}, not {pde}")
    if n <= 0 or nt <= 0:
        raise ValueError("n and nt must be positive")
    mesh = mesh or default_mesh(pde)
    times = default_times(pde) if times is None else _check_grid(times)
    pp = {**DEFAULT_PDE_PARAMS[pde], **pde_params}
    streams = np.random.SeedSequence(seed).spawn(n)
    k = min(nt, times.size)

    def work(ss):
        rng = np.random.default_rng(ss)
        params, phi0 = sample_ic(fam, rng, mesh)
        sol = _solve_one(pde, phi0, mesh, times, pp)
        idx = np.arange(times.size) if k == times.size else np.sort(rng.choice(times.size, size=k, replace=False))
        return params, phi0, times[idx], sol[idx]

    nw = workers or _threads()
    if nw > 1:
        with ThreadPoolExecutor(nw) as ex:
            results = list(ex.map(work, streams))
    else:
        results = [work(s) for s in streams]
    return PdeDataset(
        pde,
        family,
        mesh,
        times,
        [r[0] for r in results],
        np.stack([r[1] for r in results]),
        np.stack([r[2] for r in results]),
        np.stack([r[3] for r in results]),
        np.ones(n),
        pp,
        {"seed": seed, "nt": nt},
    )


def integrate(arr, mesh) -> np.ndarray:
    """Trapezoid quadrature over the last axis (a plain node sum on periodic meshes)."""
    arr = np.asarray(arr, dtype=np.float64)
    if isinstance(mesh, Mesh1D):
        w = np.ones(mesh.n)
        if not mesh.periodic:
            w[[0, -1]] = 0.5
        return arr @ w * mesh.h
    w = _trap_weights(mesh).ravel()
    return arr @ w


def normalize_dataset(ds: PdeDataset, mode: str = "none", threshold: float = 1e-3) -> PdeDataset:
    """Scale each sample (initial array and all its snapshots) by one constant.

    ``integral`` divides by the integral of phi0, ``l1`` by its L1 norm.  The
    constant is folded into ``ds.norm``.
    """
    if mode == "none":
        return ds.subset(np.arange(ds.n_samples))
    if mode == "integral":
        c = integrate(ds.phi0, ds.mesh)
        bad = np.flatnonzero(np.abs(c) <= threshold)
        if bad.size:
            raise NormalizationError(int(bad[0]), float(c[bad[0]]))
    elif mode == "l1":
        c = integrate(np.abs(ds.phi0), ds.mesh)
        bad = np.flatnonzero(c <= 1e-300)
        if bad.size:
            raise NormalizationError(int(bad[0]), float(c[bad[0]]))
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    out = ds.subset(np.arange(ds.n_samples))
    out.phi0 = ds.phi0 / c[:, None]
    out.snapshots = ds.snapshots / c[:, None, None]
    out.norm = ds.norm * c
    out.meta = {**ds.meta, "normalization": mode}
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_ARRAYS = ("times", "phi0", "snap_times", "snapshots", "norm")


def _base_path(path) -> Path:
    trailing = str(path).endswith(("/", os.sep))
    path = Path(path)
    if path.is_dir() or trailing:
        return path / "dataset"
    name = path.name
    for suffix in (".meta.json", ".f64"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def write_dataset(ds: PdeDataset, path) -> Path:
    base = _base_path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    manifest, off = [], 0
    chunks = []
    for name in _ARRAYS:
        arr = np.ascontiguousarray(getattr(ds, name), dtype=np.float64)
        manifest.append({"name": name, "offset": off, "length": int(arr.size), "shape": list(arr.shape)})
        off += arr.size
        chunks.append(arr.astype("<f8").tobytes())
    meta = {
        "magic": DS_MAGIC,
        "version": DS_VERSION,
        "pde": ds.pde,
        "family": ds.family,
        "mesh": ds.mesh.to_dict(),
        "time_grid": {"t0": float(ds.times[0]), "t1": float(ds.times[-1]), "count": int(ds.times.size)},
        "n_samples": ds.n_samples,
        "params": ds.params,
        "normalization_constants": [float(c) for c in ds.norm],
        "pde_params": ds.pde_params,
        "meta": ds.meta,
        "element_count": off,
        "arrays": manifest,
    }
    Path(str(base) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    Path(str(base) + ".f64").write_bytes(b"".join(chunks))
    return base


def read_dataset(path) -> PdeDataset:
    base = _base_path(path)
    meta_path = Path(str(base) + ".meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{meta_path}: missing metadata file") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{meta_path}: bad JSON ({exc})") from None
    if meta.get("magic") != DS_MAGIC:
        raise DatasetFormatError(f"{meta_path}: bad magic {meta.get('magic')!r}")
    if meta.get("version") != DS_VERSION:
        raise DatasetFormatError(f"{meta_path}: unsupported version {meta.get('version')!r}")
    payload_path = Path(str(base) + ".f64")
    raw = payload_path.read_bytes() if payload_path.exists() else b""
    declared = int(meta["element_count"])
    if len(raw) != 8 * declared:
        raise DatasetFormatError(
            f"{payload_path}: payload is {len(raw)} bytes, header declares {declared} float64 values (truncated)"
        )
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    arrays = {}
    for item in meta["arrays"]:
        lo, ln = item["offset"], item["length"]
        if lo + ln > declared:
            raise DatasetFormatError(f"array {item['name']} exceeds payload")
        arrays[item["name"]] = flat[lo : lo + ln].reshape(item["shape"])
    return PdeDataset(
        meta["pde"],
        meta["family"],
        mesh_from_dict(meta["mesh"]),
        arrays["times"],
        meta["params"],
        arrays["phi0"],
        arrays["snap_times"],
        arrays["snapshots"],
        arrays["norm"],
        meta.get("pde_params", {}),
        meta.get("meta", {}),
    )
