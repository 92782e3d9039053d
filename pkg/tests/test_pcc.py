import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import small_synthetic
from gradcases import E2E_TOL, analytic_and_numeric, cascade_case, tiny_model
from oracles import rel_err
from pccmjo import container, gridio, pcc

SMALL_UNET = pcc.UNetConfig(spatial_kernels=((3, 3), (3, 3)), temporal_kernels=(3, 3),
                            channels=(2, 3), pool_factors=((1, 2, 2), (1, 2, 2)))


def _fitted(model, seed=0):
    ref = tiny_model(seed, model.n_leads)
    model.zscore, model.basis = ref.zscore, ref.basis
    return model


# ---------------------------------------------------------------- U-Net

def test_default_unet_preserves_shape():
    model = pcc.build_model(pcc.UNetConfig(channels=(2, 2, 2, 2)))
    x = np.random.default_rng(0).standard_normal((2, 3, 40, 17, 144))
    assert pcc.unet_forward(x, model).shape == (2, 3, 40, 17, 144)


def test_zero_parameters_give_head_bias():
    cfg = replace(SMALL_UNET, residual=False)
    model = pcc.build_model(cfg, grid=gridio.GridSpec(n_lat=5, n_lon=16), n_leads=4)
    for t in model.unet.values():
        t.data[...] = 0.0
    model.unet["head.b"].data[...] = [0.5, -1.0, 2.0]
    out = pcc.unet_forward(np.random.default_rng(0).standard_normal((1, 3, 4, 5, 16)), model).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([0.5, -1.0, 2.0])[None, :, None, None, None],
                                                       out.shape))


def test_residual_head_starts_at_identity(rng):
    model = pcc.build_model(SMALL_UNET, n_leads=4)
    x = rng.standard_normal((1, 3, 4, 5, 16))
    np.testing.assert_array_equal(pcc.unet_forward(x, model).data, x)


@pytest.mark.parametrize("shift", [4, 8, 12])
def test_unet_equivariant_to_pool_multiple_shifts(shift, rng):
    model = pcc.build_model(SMALL_UNET, seed=3)
    model.unet["head.w"].data[...] = rng.standard_normal(model.unet["head.w"].shape)
    x = rng.standard_normal((1, 3, 4, 5, 16))
    y = pcc.unet_forward(x, model).data
    ys = pcc.unet_forward(np.roll(x, shift, axis=-1), model).data
    np.testing.assert_allclose(ys, np.roll(y, shift, axis=-1), atol=1e-12)


def test_stage1_loss_examples(rng):
    a = rng.standard_normal((2, 3, 4, 5))
    assert pcc.stage1_loss(a, a).item() == 0.0
    assert pcc.stage1_loss(a, a + 1).item() == pytest.approx(1.0, abs=1e-15)
    b = rng.standard_normal(a.shape)
    brute = math.fsum(((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist()))) / a.size
    assert pcc.stage1_loss(a, b).item() == pytest.approx(brute, rel=1e-12)


# ---------------------------------------------------------------- stage 2

def test_stage2_zero_lstm_without_residual_gives_bias(rng):
    model = tiny_model(0)
    model.lstm_residual = False
    for t in model.lstm.values():
        t.data[...] = 0.0
    model.lstm["b_out"].data[...] = [0.25, -0.75]
    out = pcc.stage2_forward(rng.standard_normal((2, 3, 4, 3, 8)), model).data
    np.testing.assert_array_equal(out, np.broadcast_to([0.25, -0.75], out.shape))


def test_projection_of_scaled_eof1_is_unit_rmm1():
    model = tiny_model(1)
    b, z, g = model.basis, model.zscore, model.grid
    prof = (b.scale[0] * b.eof1).reshape(3, g.n_lon) * b.norms[:, None]   # physical profile
    phys = np.broadcast_to(prof[:, None, None, :], (3, model.n_leads, g.n_lat, g.n_lon))
    x = (phys - z.mu[:, None, None, None]) / z.sigma[:, None, None, None]
    prelim = pcc.project_standardized(x[None], model).data
    np.testing.assert_allclose(prelim[0, 2], [1.0, 0.0], atol=1e-12)


def test_stage2_loss_examples(rng):
    a = rng.standard_normal((6, 5, 2))
    assert pcc.stage2_loss(a, a).item() == pytest.approx(-1.0, abs=1e-15)
    assert pcc.stage2_loss(-a, a).item() == pytest.approx(1.0, abs=1e-15)
    rot = np.stack([-a[..., 1], a[..., 0]], axis=-1)
    assert abs(pcc.stage2_loss(rot, a).item()) < 1e-15
    assert pcc.stage2_loss(3.7 * rot + 2.0 * a, a).item() == \
        pytest.approx(pcc.stage2_loss(rot + (2.0 / 3.7) * a, a).item(), abs=1e-14)


def test_stage2_loss_skips_degenerate_leads(rng):
    a = rng.standard_normal((4, 3, 2))
    a[:, 1] = 0.0
    b = rng.standard_normal(a.shape)
    loss, mask = pcc.stage2_loss_with_flags(b, a)
    assert mask.tolist() == [False, True, False]
    assert np.isfinite(loss.item())


@pytest.mark.parametrize("param", ["enc0.w", "enc1.w", "dec0.w", "dec1.b", "head.w"])
def test_cascade_gradient_matches_finite_differences(param):
    fn, arrays = cascade_case(7, param)
    analytic, numeric = analytic_and_numeric(fn, arrays)
    assert np.linalg.norm(analytic[1]) > 0
    assert rel_err(analytic[1], numeric[1]) < E2E_TOL
    assert rel_err(analytic[0], numeric[0]) < E2E_TOL


# ---------------------------------------------------------------- parameter counts

def test_parameter_counts():
    assert pcc.count_parameters(pcc.build_model())[1] == 4546
    single = pcc.UNetConfig(spatial_kernels=((7, 5),), temporal_kernels=(3,), channels=(8,),
                            pool_factors=((1, 2, 2),))
    enc = pcc.init_unet(single, np.random.default_rng(0))
    assert enc["enc0.w"].size + enc["enc0.b"].size == 8 * 3 * 3 * 5 * 7 + 8 == 2528
    for cfg in (pcc.UNetConfig(), SMALL_UNET, single):
        model = pcc.build_model(cfg)
        assert pcc.count_parameters(model)[0] == pcc.unet_param_count(cfg)


def test_doubling_channels_scales_conv_count():
    base = pcc.UNetConfig()
    wide = replace(base, channels=tuple(2 * c for c in base.channels))
    ratio = pcc.unet_param_count(wide) / pcc.unet_param_count(base)
    # every weight tensor except the 3-channel input and output quadruples
    assert 3.9 < ratio < 4.0


# ---------------------------------------------------------------- training

def _small_dataset(**kw):
    return gridio.generate_synthetic(small_synthetic(**kw))


def _cfg(**kw):
    base = dict(stage1_epochs=1, stage2_epochs=2, batch_size=8, micro_batch=4, lstm_hidden=4)
    base.update(kw)
    return pcc.TrainConfig(**base)


def test_identity_degradation_has_nothing_to_learn():
    sigma = 0.05
    ds = _small_dataset(forecast_damping_rate=0.0, forecast_phase_lag_rate=0.0, noise_sigma=sigma)
    model = pcc.train(ds, _cfg(stage="stage1"), SMALL_UNET)
    first = model.history[0][2]
    # forecast and truth carry independent noise, so their standardized difference has
    # variance 2 sigma^2 / sigma_z^2 per element
    noise_var = float(np.mean(2 * sigma ** 2 / model.zscore.sigma ** 2))
    assert first <= 1.05 * noise_var
    _, test = gridio.chronological_split(ds)
    F = pcc.stack_cases(test, "forecast")
    fields, _ = pcc.correct_batch(model, F)
    assert np.max(np.abs(fields - F)) < 10 * sigma


def test_training_is_deterministic():
    ds = _small_dataset()
    a = pcc.train(ds, _cfg(seed=4), SMALL_UNET)
    b = pcc.train(ds, _cfg(seed=4), SMALL_UNET)
    for k in a.unet:
        assert a.unet[k].data.tobytes() == b.unet[k].data.tobytes()
    for k in a.lstm:
        assert a.lstm[k].data.tobytes() == b.lstm[k].data.tobytes()
    c = pcc.train(ds, _cfg(seed=5), SMALL_UNET)
    assert not np.array_equal(a.unet["enc0.w"].data, c.unet["enc0.w"].data)


def test_basis_is_frozen_during_training():
    ds = _small_dataset()
    zs, basis = pcc.fit_preprocessing(gridio.chronological_split(ds)[0], ds.grid)
    before = basis.to_bytes()
    model = pcc.train(ds, _cfg(finetune_unet=True), SMALL_UNET, zscore=zs, basis=basis)
    assert model.basis.to_bytes() == before


@pytest.mark.parametrize("stage, s1, s2", [("stage1", True, False), ("stage2", False, True),
                                           ("cascade", True, True)])
def test_ablation_stages_are_runnable(stage, s1, s2):
    ds = _small_dataset()
    model = pcc.train(ds, _cfg(stage=stage), SMALL_UNET)
    assert (model.use_stage1, model.use_stage2) == (s1, s2)
    stages = {h[1] for h in model.history}
    assert stages == {s for s, on in (("stage1", s1), ("stage2", s2)) if on}
    _, test = gridio.chronological_split(ds)
    fields, rmm = pcc.correct_batch(model, pcc.stack_cases(test, "forecast"))
    assert np.isfinite(rmm).all()
    if not s1:
        np.testing.assert_allclose(fields, pcc.stack_cases(test, "forecast"), atol=1e-5)


def test_correct_returns_valid_field():
    ds = _small_dataset()
    model = pcc.train(ds, _cfg(), SMALL_UNET)
    fld, series = pcc.correct(model, ds.cases[-1].forecast)
    assert isinstance(fld, gridio.AnomalyField) and fld.values.shape == ds.cases[-1].forecast.values.shape
    assert series.rmm.shape == (6, 2) and series.init_date == ds.cases[-1].init_date


def test_unfitted_model_and_bad_configs():
    with pytest.raises(pcc.UnfittedModelError):
        pcc.correct(pcc.build_model(SMALL_UNET), _small_dataset().cases[0].forecast)
    with pytest.raises(ValueError):
        pcc.TrainConfig(stage="stage3")
    with pytest.raises(ValueError):
        pcc.UNetConfig(channels=(2, 2))


# ---------------------------------------------------------------- persistence

def test_model_round_trip(tmp_path):
    ds = _small_dataset()
    model = pcc.train(ds, _cfg(), SMALL_UNET)
    pcc.save_model(model, tmp_path / "m.mjow")
    back = pcc.load_model(tmp_path / "m.mjow")
    F = pcc.stack_cases(ds.cases[-3:], "forecast")
    np.testing.assert_array_equal(pcc.correct_batch(back, F)[1], pcc.correct_batch(model, F)[1])
    assert back.history == model.history
    assert pcc.training_log_csv(back).splitlines()[0] == "epoch,stage,loss"


def test_incompatible_checkpoint(tmp_path):
    ds = _small_dataset()
    model = pcc.train(ds, _cfg(stage="stage1", stage1_epochs=0), SMALL_UNET)
    entries = pcc.model_entries(model)
    entries["unet/enc0.w"] = np.zeros((1, 1, 1, 1, 1))
    container.save(tmp_path / "bad.mjow", pcc.MODEL_MAGIC, entries)
    with pytest.raises(pcc.ModelError):
        pcc.load_model(tmp_path / "bad.mjow")
    del entries["manifest"]
    container.save(tmp_path / "bad2.mjow", pcc.MODEL_MAGIC, entries)
    with pytest.raises(pcc.ModelError):
        pcc.load_model(tmp_path / "bad2.mjow")


# ---------------------------------------------------------------- linear baseline

def test_linear_baseline_matches_polyfit(rng):
    f = rng.standard_normal((30, 2, 3))
    y = 0.7 * f - 0.2 + 0.1 * rng.standard_normal(f.shape)
    bl = pcc.fit_linear_baseline(f, y)
    slope, icpt = np.polyfit(f[:, 1, 2], y[:, 1, 2], 1)
    assert bl.slope[1, 2] == pytest.approx(slope, rel=1e-10)
    assert bl.intercept[1, 2] == pytest.approx(icpt, rel=1e-10)
    np.testing.assert_allclose(bl.apply(f), bl.slope * f + bl.intercept)
