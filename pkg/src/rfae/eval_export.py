"""Relative-L1 evaluation and latent-geometry export."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from .nn import ModelBundle
from .pde_data import PdeDataset
from .training import RicciAutoencoder

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class UndefinedMetricError(ValueError):
    """Truth has (near) zero L1 norm, so the relative error is undefined."""


def _l1(arr, mesh):
    return np.sum(np.abs(arr), axis=-1) * mesh.cell_volume


def relative_l1(pred, truth, mesh) -> float:
    """||pred - truth||_L1 / ||truth||_L1 with node-sum x spacing quadrature."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    den = _l1(truth, mesh)
    if den <= NORM_FLOOR:
        raise UndefinedMetricError(f"truth L1 norm {den:.3g} below {NORM_FLOOR}")
    return float(_l1(pred - truth, mesh) / den)


@dataclass
class EvalReport:
    times: list
    mean: list
    std: list
    n_samples: list
    mode: str = ""
    dataset_id: str = ""
    excluded: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self, label=None) -> str:
        label = label or self.mode or "model"
        heads = [f"t={t:g}" for t in self.times]
        cells = [f"{m:.4f} ± {s:.4f}" for m, s in zip(self.mean, self.std)]
        w0 = max(len("method"), len(label))
        ws = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        line1 = "  ".join(["method".ljust(w0)] + [h.rjust(w) for h, w in zip(heads, ws)])
        line2 = "  ".join([label.ljust(w0)] + [c.rjust(w) for c, w in zip(cells, ws)])
        return f"{line1}\n{line2}\n(relative L1, mean ± population std over samples)\n"

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        path.with_suffix(".txt").write_text(self.table())
        return path


def _nearest(ds: PdeDataset, i: int, t: float) -> int:
    st = ds.snap_times[i]
    j = int(np.argmin(np.abs(st - t)))
    ht = np.min(np.diff(st)) if st.size > 1 else np.inf
    if abs(st[j] - t) > ht / 2 + 1e-12:
        log.warning("sample %d: no snapshot near t=%g, using t=%g", i, t, st[j])
    return j


def _predictor(bundle: ModelBundle):
    model = RicciAutoencoder(bundle)
    fn = jax.jit(model.predict)
    theta = jnp.asarray(bundle.params.data.copy())
    return lambda phi0, t: np.asarray(fn(theta, jnp.asarray(phi0), jnp.asarray(t)))


def evaluate(bundle: ModelBundle, dataset: PdeDataset, times: Sequence[float], predictor=None) -> EvalReport:
    """Per-time mean/std of relative L1 over all samples; deterministic.

    ``predictor(phi0 (n, N), t (n,)) -> (n, N)`` overrides the bundle (useful for stubs).
    """
    T = dataset.horizon
    for t in times:
        if t < -1e-12 or t > T + 1e-12:
            raise ValueError(f"time {t} outside dataset horizon [0, {T}]")
    predict = predictor or _predictor(bundle)
    n = dataset.n_samples
    means, stds, counts, excluded = [], [], [], []
    for t in times:
        idx = [_nearest(dataset, i, t) for i in range(n)]
        truth = dataset.snapshots[np.arange(n), idx]
        tt = dataset.snap_times[np.arange(n), idx]
        pred = predict(dataset.phi0, tt)
        errs = []
        bad = 0
        for i in range(n):
            try:
                errs.append(relative_l1(pred[i], truth[i], dataset.mesh))
            except UndefinedMetricError:
                bad += 1
        errs = np.asarray(errs)
        means.append(float(errs.mean()) if errs.size else float("nan"))
        stds.append(float(errs.std()) if errs.size else float("nan"))
        counts.append(int(errs.size))
        excluded.append(bad)
    mode = bundle.config.get("train", {}).get("mode", "") if bundle is not None else ""
    ds_id = f"{dataset.pde}/{dataset.family}"
    return EvalReport([float(t) for t in times], means, stds, counts, mode, ds_id, excluded)


def latent_rows(bundle: ModelBundle, datasets: Mapping[str, PdeDataset], times: Sequence[float]):
    """(header, rows) of the latent cloud: chart point and embedded point per (sample, time)."""
    model = RicciAutoencoder(bundle)
    theta = jnp.asarray(bundle.params.data.copy())
    chart = jax.jit(model.chart)
    embed = jax.jit(model.embed_batch)
    m, d = model.m, model.d
    pkeys = sorted({k for ds in datasets.values() for p in ds.params for k in p})
    header = ["split", "sample_id", "time"] + [f"u{i + 1}" for i in range(m)] + [f"x{i + 1}" for i in range(d)] + pkeys
    rows = []
    for split, ds in datasets.items():
        u = np.asarray(chart(theta, jnp.asarray(ds.phi0)))
        for t in times:
            tau = np.full(ds.n_samples, model.cfg.time_scale * t)
            x = np.asarray(embed(theta, jnp.asarray(u), jnp.asarray(tau)))
            for i in range(ds.n_samples):
                vals = [ds.params[i].get(k, "") for k in pkeys]
                rows.append([split, i, float(t)] + [float(v) for v in u[i]] + [float(v) for v in x[i]] + vals)
    return header, rows


def export_latent(bundle: ModelBundle, datasets: Mapping[str, PdeDataset], times: Sequence[float], path) -> Path:
    header, rows = latent_rows(bundle, datasets, times)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path
