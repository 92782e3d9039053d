"""Random small-shape gradient-check instances for every differentiable operation.

``op_cases(seed)`` yields (name, fn, arrays): ``fn`` maps Tensors to a scalar Tensor and
``arrays`` are the inputs. ``analytic_and_numeric`` evaluates both sides of the check.
"""

from __future__ import annotations

import numpy as np

from oracles import central_difference, rel_err
from pccmjo import eofrmm, gridio, pcc, prep, tensor as T

OP_TOL = 1e-6
E2E_TOL = 1e-5


def _weighted(out, r):
    return (out * r).sum()


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def op_cases(seed: int):
    rng = np.random.default_rng(seed)
    s = tuple(rng.integers(2, 4, size=2))
    R = rng.standard_normal(s)
    yield "add", lambda a, b: _weighted(a + b, R), [rng.standard_normal(s), rng.standard_normal(s)]
    yield "sub_broadcast", lambda a, b: _weighted(a - b, R), [rng.standard_normal(s),
                                                               rng.standard_normal(s[1:])]
    yield "mul", lambda a, b: _weighted(a * b, R), [rng.standard_normal(s), rng.standard_normal(s)]
    yield "div", lambda a, b: _weighted(a / b, R), [rng.standard_normal(s),
                                                     rng.uniform(0.5, 2.0, s)]
    yield "power", lambda a: _weighted(a ** 3, R), [rng.standard_normal(s)]
    yield "sqrt", lambda a: _weighted(T.sqrt(a), R), [rng.uniform(0.5, 2.0, s)]
    yield "exp", lambda a: _weighted(T.exp(a), R), [rng.standard_normal(s)]
    yield "relu", lambda a: _weighted(T.relu(a), R), [_away_from_zero(rng, s)]
    yield "sigmoid", lambda a: _weighted(T.sigmoid(a), R), [3 * rng.standard_normal(s)]
    yield "tanh", lambda a: _weighted(T.tanh(a), R), [rng.standard_normal(s)]
    ax = int(rng.integers(0, 2))
    Rs = rng.standard_normal(s[1 - ax])
    yield "sum_axis", lambda a: _weighted(a.sum(axis=ax), Rs), [rng.standard_normal(s)]
    yield "mean_axis", lambda a: _weighted(a.mean(axis=ax), Rs), [rng.standard_normal(s)]
    yield "reshape", lambda a: _weighted(a.reshape(-1), R.reshape(-1)), [rng.standard_normal(s)]
    yield "transpose", lambda a: _weighted(a.transpose(1, 0), R.T), [rng.standard_normal(s)]
    idx = rng.integers(0, s[0], size=4)
    Rg = rng.standard_normal((4, s[1]))
    yield "getitem_fancy", lambda a: _weighted(a[idx], Rg), [rng.standard_normal(s)]
    yield "getitem_slice", lambda a: _weighted(a[:, 1:], R[:, 1:]), [rng.standard_normal(s)]
    Rc = rng.standard_normal((2 * s[0], s[1]))
    yield "concat", lambda a, b: _weighted(T.concat([a, b], 0), Rc), [rng.standard_normal(s),
                                                                       rng.standard_normal(s)]
    Rst = rng.standard_normal((s[0], 2, s[1]))
    yield "stack", lambda a, b: _weighted(T.stack([a, b], 1), Rst), [rng.standard_normal(s),
                                                                      rng.standard_normal(s)]
    k = int(rng.integers(2, 4))
    Rm = rng.standard_normal((2, s[0], k))
    yield "matmul_batched", lambda a, b: _weighted(a @ b, Rm), [rng.standard_normal((2,) + s),
                                                                 rng.standard_normal((s[1], k))]

    # 5-D operators on (N, C, T, H, W)
    shape = (2, 2, int(rng.integers(2, 4)), int(rng.integers(3, 6)), int(rng.integers(4, 7)))
    kern = tuple(int(v) for v in rng.choice([1, 3], size=3))
    pad = tuple(rng.choice(["zero", "circular"], size=3))
    w = rng.standard_normal((3, 2) + kern)
    Ro = rng.standard_normal((2, 3) + shape[2:])
    yield (f"conv3d_{kern}_{'-'.join(pad)}",
           lambda x, ww, b: _weighted(T.conv3d(x, ww, b, pad), Ro),
           [rng.standard_normal(shape), w, rng.standard_normal(3)])
    f = tuple(int(v) for v in rng.integers(1, 3, size=3))
    pooled = T.pooled_extents(shape[2:], f)
    Rp = rng.standard_normal(shape[:2] + pooled)
    yield f"pool_avg_{f}", lambda x: _weighted(T.pool_avg(x, f), Rp), [rng.standard_normal(shape)]
    yield f"pool_max_{f}", lambda x: _weighted(T.pool_max(x, f), Rp), [rng.standard_normal(shape)]
    Ru = rng.standard_normal(shape)
    yield f"upsample_{f}", lambda x: _weighted(T.upsample_nn(x, shape[2:], f), Ru), \
        [rng.standard_normal(shape[:2] + pooled)]
    Rcc = rng.standard_normal((2, 4) + shape[2:])
    yield "concat_channels", lambda a, b: _weighted(T.concat_channels(a, b), Rcc), \
        [rng.standard_normal(shape), rng.standard_normal(shape)]

    spec = T.LstmSpec(2, 3, 2)
    L = int(rng.integers(2, 5))
    Rl = rng.standard_normal((2, L, 2))
    p = T.init_lstm(spec, rng)
    names = sorted(p)

    def lstm_fn(seq, *ws):
        return _weighted(T.lstm_forward(seq, dict(zip(names, ws)), spec), Rl)
    yield "lstm", lstm_fn, [rng.standard_normal((2, L, 2))] + \
        [p[n].data + 0.1 * rng.standard_normal(p[n].shape) for n in names]


def analytic_and_numeric(fn, arrays):
    ts = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    T.backward(fn(*ts))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
    numeric = central_difference(lambda *xs: fn(*[T.Tensor(x) for x in xs]).item(), arrays)
    return analytic, numeric


def worst_error(fn, arrays) -> float:
    analytic, numeric = analytic_and_numeric(fn, arrays)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


# ---------------------------------------------------------------- end-to-end cascade

GRID = gridio.GridSpec(n_lat=3, n_lon=8, lat_start_deg=-2.5, lat_step_deg=2.5,
                       lon_start_deg=0.0, lon_step_deg=45.0)


def tiny_model(seed: int, n_leads: int = 4):
    """Two-level U-Net and 3-unit LSTM with a fitted basis and randomized head."""
    rng = np.random.default_rng(seed)
    ucfg = pcc.UNetConfig(spatial_kernels=((3, 3), (3, 1)), temporal_kernels=(3, 1),
                          channels=(2, 2), pool_factors=((1, 1, 2), (2, 1, 2)))
    model = pcc.build_model(ucfg, lstm_hidden=3, seed=seed, grid=GRID, n_leads=n_leads)
    truth = rng.standard_normal((12, 3, n_leads, GRID.n_lat, GRID.n_lon))
    model.zscore = prep.zscore_fit(truth, 1)
    prof = eofrmm.profiles_from_fields(truth, GRID)
    model.basis = eofrmm.fit_eof(prof.reshape(-1, 3, GRID.n_lon), GRID)
    model.unet["head.w"].data[...] = 0.5 * rng.standard_normal(model.unet["head.w"].shape)
    for t in model.unet.values():
        if t.data.ndim == 1:
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
    return model


def cascade_case(seed: int, param: str):
    """Stage-2 loss of the full cascade as a function of the input and one U-Net parameter."""
    model = tiny_model(seed)
    rng = np.random.default_rng(seed + 1000)
    x = rng.standard_normal((3, 3, model.n_leads, GRID.n_lat, GRID.n_lon))
    obs = rng.standard_normal((3, model.n_leads, 2))

    def fn(xt, wt):
        model.unet[param] = wt
        return pcc.stage2_loss(pcc.stage2_forward(pcc.unet_forward(xt, model), model), obs)
    return fn, [x, model.unet[param].data.copy()]
