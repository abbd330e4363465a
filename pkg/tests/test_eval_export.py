import csv
import json

import jax.numpy as jnp
import numpy as np
import pytest

from rfae import closed_forms as cf
from rfae import eval_export as ev
from rfae import pde_data as pd
from rfae import training as tr

DR = pd.default_mesh("diffusion_reaction")


@pytest.fixture(scope="module")
def ds():
    return pd.generate_dataset("burgers", "A1", 4, nt=11, seed=5)


def _bundle(ds, **kw):
    return tr.build_bundle(tr.TrainConfig(width=8, depth=1, **kw), ds)


def test_relative_l1_values():
    truth = np.sin(2 * np.pi * DR.nodes)
    assert ev.relative_l1(truth, truth, DR) == 0.0
    assert ev.relative_l1(2 * truth, truth, DR) == pytest.approx(1.0, rel=1e-14)
    per = pd.default_mesh("burgers")  # periodic nodes, where the node sum is the rectangle rule
    wave = np.sin(2 * np.pi * per.nodes)
    assert ev.relative_l1(wave + 0.1, wave, per) == pytest.approx(0.1 / (2 / np.pi), rel=1e-3)


def test_relative_l1_scale_invariance():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=101), rng.normal(size=101)
    base = ev.relative_l1(p, t, DR)
    for c in (-3.0, 1e-3, 7.5):
        assert ev.relative_l1(c * p, c * t, DR) == pytest.approx(base, rel=1e-13)


def test_relative_l1_undefined():
    with pytest.raises(ev.UndefinedMetricError):
        ev.relative_l1(np.ones(101), np.zeros(101), DR)
    with pytest.raises(ValueError):
        ev.relative_l1(np.ones(100), np.ones(101), DR)


def _lookup(ds):
    # a stub predictor that returns the stored snapshot for each (phi0, t)
    def pred(phi0, t):
        out = []
        for p, tt in zip(phi0, t):
            i = int(np.argmin(np.abs(ds.phi0 - p).sum(axis=1)))
            out.append(ds.snapshots[i, int(np.argmin(np.abs(ds.snap_times[i] - tt)))])
        return np.array(out)

    return pred


def test_perfect_and_zero_predictors(ds):
    b = _bundle(ds)
    rep = ev.evaluate(b, ds, [0.0, 0.5, 1.0], predictor=_lookup(ds))
    assert rep.mean == [0.0, 0.0, 0.0] and rep.n_samples == [4, 4, 4]
    rep = ev.evaluate(b, ds, [0.0, 1.0], predictor=lambda phi0, t: np.zeros_like(phi0))
    np.testing.assert_allclose(rep.mean, 1.0, rtol=1e-14)
    np.testing.assert_allclose(rep.std, 0.0, atol=1e-14)


def test_report_mean_is_hand_average(ds, tmp_path):
    b = _bundle(ds)
    rep = ev.evaluate(b, ds, [0.5])
    model = tr.RicciAutoencoder(b)
    errs = []
    for i in range(ds.n_samples):
        j = int(np.argmin(np.abs(ds.snap_times[i] - 0.5)))
        pred = np.asarray(model.predict(jnp.asarray(b.params.data), ds.phi0[i : i + 1], ds.snap_times[i, j : j + 1]))[0]
        errs.append(ev.relative_l1(pred, ds.snapshots[i, j], ds.mesh))
    assert rep.mean[0] == pytest.approx(np.mean(errs), rel=1e-12)
    assert rep.std[0] == pytest.approx(np.std(errs), rel=1e-10)
    assert ev.evaluate(b, ds, [0.5]).to_json() == rep.to_json()
    path = rep.write(tmp_path / "r.json")
    assert json.loads(path.read_text())["mean"] == rep.mean
    assert "t=0.5" in (tmp_path / "r.txt").read_text()


def test_evaluate_rejects_times_outside_horizon(ds):
    with pytest.raises(ValueError):
        ev.evaluate(_bundle(ds), ds, [1.5])


def test_undefined_samples_excluded(ds):
    zeroed = pd.PdeDataset(**{**ds.__dict__})
    zeroed.snapshots = ds.snapshots.copy()
    zeroed.snapshots[0] = 0.0
    rep = ev.evaluate(_bundle(ds), zeroed, [0.5], predictor=lambda p, t: np.ones_like(p))
    assert rep.n_samples == [3] and rep.excluded == [1]


def _read(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_export_rows_and_chart_columns(ds, tmp_path):
    b = _bundle(ds)
    before = b.params.data.copy()
    two = pd.PdeDataset(**{**ds.__dict__})
    two.phi0, two.snapshots, two.snap_times, two.params = ds.phi0[:2], ds.snapshots[:2], ds.snap_times[:2], ds.params[:2]
    rows = _read(ev.export_latent(b, {"train": two}, [0.0, 0.5, 1.0], tmp_path / "l.csv"))
    assert rows[0] == ["split", "sample_id", "time", "u1", "u2", "x1", "x2", "x3", "alpha", "beta"]
    assert len(rows) == 7
    model = tr.RicciAutoencoder(b)
    u = np.asarray(model.chart(jnp.asarray(b.params.data), two.phi0))
    for r in rows[1:]:
        np.testing.assert_allclose([float(v) for v in r[3:5]], u[int(r[1])], rtol=1e-15)
        assert float(r[8]) == two.params[int(r[1])]["alpha"]
    np.testing.assert_array_equal(b.params.data, before)


@pytest.mark.parametrize("variant", ["closed", "shift"])
def test_export_sphere_rows_on_sphere(ds, tmp_path, variant):
    b = _bundle(ds, mode="sphere", sphere_variant=variant, time_scale=0.4)
    rows = _read(ev.export_latent(b, {"test": ds}, [0.0, 1.0], tmp_path / "s.csv"))
    model = tr.RicciAutoencoder(b)
    theta = jnp.asarray(b.params.data)
    for r in rows[1:]:
        t = float(r[2])
        x = np.array([float(v) for v in r[5:8]])
        shift = np.asarray(model._net("S", theta, jnp.atleast_1d(0.4 * t))) if variant == "shift" else 0.0
        assert abs(np.linalg.norm(x - shift) - float(cf.sphere_radius(1.0, 3, 0.4 * t))) < 1e-9


def test_nearest_snapshot_warning(ds, caplog):
    gappy = pd.PdeDataset(**{**ds.__dict__})
    gappy.snap_times = np.tile(np.array([0.0, 0.1, 1.0]), (ds.n_samples, 1))
    with caplog.at_level("WARNING"):
        assert ev._nearest(gappy, 0, 0.12) == 1
    assert not caplog.records
    with caplog.at_level("WARNING"):
        assert ev._nearest(gappy, 0, 0.5) == 1
    assert "no snapshot near" in caplog.text
