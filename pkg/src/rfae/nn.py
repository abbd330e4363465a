"""Network definitions, parameter bundle, AdamW optimizer and checkpoints.

Networks are plain functions of a parameter dict so they can be evaluated on a
slice of one flat float64 vector inside ``jax.grad``/``jax.jacfwd``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import erf

from .autodiff import ParamVector

ACTIVATIONS = ("tanh", "gelu")
VARIANTS = ("vanilla", "modified")
CKPT_MAGIC = b"RFAE-CKPT\x00"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block, index):
        super().__init__(f"non-finite gradient in parameter block {block} (flat index {index})")
        self.block = block
        self.index = index


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    widths: tuple[int, ...]
    activation: str = "tanh"
    variant: str = "vanilla"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError("widths must be a nonempty list of positive ints")
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigError("input/output dims must be positive")
        if self.activation not in ACTIVATIONS:
            # relu has a vanishing second derivative a.e. and breaks the Ricci residual
            raise ConfigError(f"activation {self.activation!r} is not C2; choose one of {ACTIVATIONS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == "modified" and len(set(self.widths)) != 1:
            raise ConfigError("modified MLP needs equal hidden widths")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def activation_fn(name: str) -> Callable:
    if name == "tanh":
        return jnp.tanh
    if name == "gelu":
        return lambda z: 0.5 * z * (1.0 + erf(z / jnp.sqrt(2.0)))
    raise ConfigError(f"unknown activation {name!r}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def init_mlp(spec: MlpSpec, name: str, rng: np.random.Generator):
    """Glorot-uniform weights, zero biases, as ``((name, layer, role), array)`` blocks."""
    blocks = []
    w = spec.widths
    if spec.variant == "modified":
        for layer in ("hat", "tilde"):
            blocks.append(((name, layer, "W"), _glorot(rng, spec.input_dim, w[0])))
            blocks.append(((name, layer, "b"), np.zeros(w[0])))
    dims = [spec.input_dim, *w]
    for i in range(len(w)):
        blocks.append(((name, str(i), "W"), _glorot(rng, dims[i], dims[i + 1])))
        blocks.append(((name, str(i), "b"), np.zeros(dims[i + 1])))
    blocks.append(((name, "out", "W"), _glorot(rng, w[-1], spec.output_dim)))
    blocks.append(((name, "out", "b"), np.zeros(spec.output_dim)))
    return blocks


def _dense(p, layer, x):
    return x @ p[(layer, "W")].T + p[(layer, "b")]


def _dropout(h, rate, key):
    if key is None or rate <= 0.0:
        return h
    keep = jax.random.bernoulli(key, 1.0 - rate, h.shape)
    return jnp.where(keep, h / (1.0 - rate), 0.0)


def mlp_forward(spec: MlpSpec, params: Mapping, x, dropout: Sequence[float] = (), key=None):
    """Vanilla MLP.  ``x`` has shape ``(..., input_dim)``.

    ``dropout`` gives one inverted-dropout rate per hidden layer; it is only
    active when a PRNG ``key`` is passed.
    """
    if spec.variant == "modified":
        return mmlp_forward(spec, params, x, dropout, key)
    x = jnp.asarray(x)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"expected input dim {spec.input_dim}, got {x.shape[-1]}")
    act = activation_fn(spec.activation)
    h = x
    keys = _split(key, len(spec.widths))
    for i in range(len(spec.widths)):
        h = act(_dense(params, str(i), h))
        h = _dropout(h, _rate(dropout, i), keys[i])
    return _dense(params, "out", h)


def mmlp_forward(spec: MlpSpec, params: Mapping, x, dropout: Sequence[float] = (), key=None, trace=None):
    """Modified (gated two-stream) MLP.

    zeta_hat = s(W_hat x + b_hat), zeta_tilde = s(W_tilde x + b_tilde),
    zeta_1 = s(W_0 x + b_0), zeta_{i+1} = (1 - s(W_i zeta_i + b_i)) * zeta_hat
    + s(W_i zeta_i + b_i) * zeta_tilde, then an affine output layer.
    If ``trace`` is a list, intermediates are appended to it.
    """
    if spec.variant != "modified" or len(set(spec.widths)) != 1:
        raise ConfigError("mmlp_forward needs a modified spec with equal hidden widths")
    x = jnp.asarray(x)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"expected input dim {spec.input_dim}, got {x.shape[-1]}")
    act = activation_fn(spec.activation)
    z_hat = act(_dense(params, "hat", x))
    z_tilde = act(_dense(params, "tilde", x))
    keys = _split(key, len(spec.widths))
    z = act(_dense(params, "0", x))
    z = _dropout(z, _rate(dropout, 0), keys[0])
    if trace is not None:
        trace.extend([z_hat, z_tilde, z])
    for i in range(1, len(spec.widths)):
        gate = act(_dense(params, str(i), z))
        z = (1.0 - gate) * z_hat + gate * z_tilde
        z = _dropout(z, _rate(dropout, i), keys[i])
        if trace is not None:
            trace.append(z)
    return _dense(params, "out", z)


def _rate(dropout, i):
    return float(dropout[i]) if i < len(dropout) else 0.0


def _split(key, n):
    if key is None:
        return [None] * n
    return list(jax.random.split(key, n))


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """Specs and flat parameters of the networks P, g, E, D (and optional S, r, z).

    ``config`` holds the training configuration the bundle was built for; the
    mode-specific geometry (closed-form metric ids, sphere radius, ...) lives there.
    """

    specs: dict[str, MlpSpec]
    params: ParamVector
    time_scale: float = 0.5
    config: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if not self.time_scale > 0:
            raise ConfigError("time scale C_t must be positive")

    @classmethod
    def initialize(cls, specs: Mapping[str, MlpSpec], seed: int, time_scale=0.5, config=None):
        rng = np.random.default_rng(seed)
        blocks = []
        for name, spec in specs.items():
            blocks.extend(init_mlp(spec, name, rng))
        return cls(dict(specs), ParamVector.from_blocks(blocks), time_scale, dict(config or {}))

    def net_params(self, name: str, flat=None) -> dict:
        return self.params.view(name, flat)

    def apply(self, name: str, x, flat=None, dropout=(), key=None):
        spec = self.specs[name]
        return mlp_forward(spec, self.net_params(name, flat), x, dropout, key)

    def copy(self) -> "ModelBundle":
        return ModelBundle(dict(self.specs), self.params.copy(), self.time_scale, json.loads(json.dumps(self.config)), self.step)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "OptimState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def clip_by_global_norm(grads: np.ndarray, clip: float) -> np.ndarray:
    norm = float(np.sqrt(np.dot(grads, grads)))
    if np.isfinite(clip) and norm > clip:
        return grads * (clip / norm)
    return grads


def optimizer_step(state: OptimState, params: ParamVector, grads: np.ndarray):
    """One AdamW step in place: global-norm clipping, then moments, then decoupled decay.

    Returns ``(params, state)`` for convenience.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.data.shape:
        raise ValueError("gradient not aligned with parameter vector")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NonFiniteGradientError(params.owner(int(bad[0])), int(bad[0]))
    g = clip_by_global_norm(grads, state.clip)
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    update = m_hat / (np.sqrt(v_hat) + state.eps)
    params.data[:] = params.data * (1.0 - state.lr * state.weight_decay) - state.lr * update
    return params, state


def piecewise_constant(step: int, base: float, drops: Sequence[Sequence[float]] = ()) -> float:
    """Value in effect at ``step`` given ``[[start_step, value], ...]`` changes."""
    val = base
    for start, v in sorted(drops, key=lambda d: d[0]):
        if step >= start:
            val = v
    return float(val)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, bundle: ModelBundle, rng_state=None) -> Path:
    path = Path(path)
    if path.suffix != ".ckpt":
        path = path.with_name(path.name + ".ckpt")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CKPT_VERSION,
        "specs": {k: s.to_dict() for k, s in bundle.specs.items()},
        "layout": [[list(k), off, list(shape)] for k, (off, shape) in bundle.params.layout.items()],
        "n_params": int(bundle.params.data.size),
        "time_scale": bundle.time_scale,
        "step": int(bundle.step),
        "rng_state": rng_state,
        "config": bundle.config,
        "config_hash": config_hash(bundle.config),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(bundle.params.data.astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    path = Path(path)
    if not path.exists() and path.suffix != ".ckpt":
        path = path.with_name(path.name + ".ckpt")
    blob = path.read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CKPT_MAGIC)
    if len(blob) < pos + 8:
        raise ValueError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    header = json.loads(blob[pos : pos + hlen].decode())
    pos += hlen
    if header.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    n = header["n_params"]
    if len(blob) - pos != 8 * n:
        raise ValueError(f"{path}: payload has {len(blob) - pos} bytes, expected {8 * n}")
    data = np.frombuffer(blob[pos:], dtype="<f8").astype(np.float64)
    layout = {tuple(k): (off, tuple(shape)) for k, off, shape in header["layout"]}
    specs = {k: MlpSpec.from_dict(v) for k, v in header["specs"].items()}
    bundle = ModelBundle(specs, ParamVector(data, layout), header["time_scale"], header["config"], header["step"])
    return bundle, header
