import csv

import numpy as np
import pytest

from cetplan.model import Dataset, LayerSpec, ModelSpec, Objective, ParameterVector, init_params, loss, perturbed_loss
from cetplan.taylor import (
    DEFAULT_SCALES,
    evaluate_gap,
    first_order_check,
    layer_direction,
    predicted_delta_loss,
    taylor_gap,
    tolerance_profile,
)

from oracles import quadratic_surrogate


def test_zero_delta(random_net):
    spec, params, batch = random_net
    z = ParameterVector.zeros(params.segments)
    assert predicted_delta_loss(spec, params, batch, z) == 0.0
    assert taylor_gap(spec, params, batch, z) == 0.0


def test_quadratic_surrogate_is_exact(rng):
    B = rng.standard_normal((6, 6))
    A = B @ B.T + np.eye(6)
    spec, params, batch = quadratic_surrogate(A, np.zeros(6))
    for _ in range(5):
        d = params.like(rng.standard_normal(6))
        actual = perturbed_loss(spec, params, d, batch) - loss(spec, params, batch)
        assert predicted_delta_loss(spec, params, batch, d) == pytest.approx(actual, rel=1e-12, abs=1e-14)
        assert taylor_gap(spec, params, batch, d) < 1e-12


def test_quadratic_surrogate_off_minimum(rng):
    A = np.diag([1.0, 2.0, 3.0])
    spec, params, batch = quadratic_surrogate(A, [0.5, -1.0, 2.0])
    d = params.like(rng.standard_normal(3))
    assert taylor_gap(spec, params, batch, d) < 1e-12


def test_first_order_switch(random_net, rng):
    spec, params, batch = random_net
    d = params.like(rng.standard_normal(len(params)) * 1e-2)
    g = Objective(spec, batch).gradient_array(params)
    with_g = predicted_delta_loss(spec, params, batch, d, include_first_order=True)
    without = predicted_delta_loss(spec, params, batch, d, include_first_order=False)
    assert with_g - without == pytest.approx(g @ d.values, rel=1e-12)


def test_small_random_delta_matches_direct_evaluation(trained_mlp, teacher_splits, rng):
    spec, params = trained_mlp.spec, trained_mlp.params
    batch = teacher_splits["calibration"]
    f0 = loss(spec, params, batch)
    for _ in range(5):
        d = rng.standard_normal(len(params))
        d = params.like(d * 1e-3 / np.sqrt(np.mean(d ** 2)))
        actual = perturbed_loss(spec, params, d, batch) - f0
        assert abs(predicted_delta_loss(spec, params, batch, d) - actual) < 1e-3


def test_gap_takes_worse_sign(trained_mlp, teacher_splits, rng):
    spec, params = trained_mlp.spec, trained_mlp.params
    batch = teacher_splits["calibration"]
    d = params.like(rng.standard_normal(len(params)) * 0.05)
    ev = evaluate_gap(spec, params, batch, d)
    up = abs(ev.actual_plus - (ev.first_order + ev.second_order))
    down = abs(ev.actual_minus - (ev.second_order - ev.first_order))
    assert ev.gap == max(up, down)
    assert taylor_gap(spec, params, batch, -d) == pytest.approx(ev.gap, rel=1e-12)


def test_gap_grows_with_scale(trained_mlp, teacher_splits, rng):
    spec, params = trained_mlp.spec, trained_mlp.params
    batch = teacher_splits["calibration"]
    obj = Objective(spec, batch)
    u = rng.standard_normal(len(params))
    u /= np.sqrt(np.mean(u ** 2))
    gaps = [taylor_gap(spec, params, batch, params.like(s * u), obj) for s in DEFAULT_SCALES]
    rising = sum(b >= a for a, b in zip(gaps, gaps[1:]))
    assert rising >= 0.9 * (len(gaps) - 1)


def test_layer_direction_confined(trained_mlp, rng):
    d = layer_direction(trained_mlp.params, "layer_1", 0.01, rng)
    rms = d.layer_rms()
    assert rms["layer_1"] == pytest.approx(0.01, rel=1e-12)
    assert rms["layer_0"] == 0.0 and rms["layer_2"] == 0.0


def test_profile_quadratic_surrogate_all_pass():
    spec, params, batch = quadratic_surrogate(np.diag([1.0, 5.0, 2.0]))
    prof = tolerance_profile(spec, params, batch, directions=3)
    assert prof.admissible_rms == {"layer_0": DEFAULT_SCALES[-1]}
    assert all(p.passed for p in prof.probes)


def test_profile_dead_layer_gets_max_scale(rng):
    # second layer has zero weights, so the first layer has zero fan-out
    spec = ModelSpec((LayerSpec("dense", (3,), (4,), "tanh"), LayerSpec("dense", (4,), (1,), "none", bias=False)),
                     "mse")
    vals = np.array(init_params(spec, 0).values)
    o, n = spec.segment_map()["layer_1"]
    vals[o:o + n] = 0.0
    params = ParameterVector.for_spec(spec, vals)
    batch = Dataset(rng.standard_normal((20, 3)), np.zeros(20, dtype=int), "train", 1,
                    targets=rng.standard_normal((20, 1)))
    prof = tolerance_profile(spec, params, batch, directions=3)
    assert prof.admissible_rms["layer_0"] == DEFAULT_SCALES[-1]
    assert max(prof.gaps("layer_0")) == 0.0


def test_profile_no_passing_scale_warns(trained_mlp, teacher_splits):
    prof = tolerance_profile(trained_mlp.spec, trained_mlp.params, teacher_splits["calibration"],
                             scale_grid=(0.5, 1.0), threshold=1e-12, directions=2)
    # MSE is exactly quadratic in the linear output layer, so only hidden layers fail
    assert prof.admissible_rms["layer_0"] == 0.0 and prof.admissible_rms["layer_1"] == 0.0
    assert set(prof.warnings) == {"layer_0", "layer_1"}
    assert prof.admissible_rms["layer_2"] == 1.0


def test_profile_trained_mlp_below_threshold(trained_mlp, teacher_splits):
    spec, params = trained_mlp.spec, trained_mlp.params
    batch = teacher_splits["calibration"]
    prof = tolerance_profile(spec, params, batch, directions=4)
    for lid, s in prof.admissible_rms.items():
        assert s > 0
        at = [p for p in prof.probes if p.layer_id == lid and p.scale == s]
        assert len(at) == 1 and at[0].gap < 1e-3


def test_profile_grid_validation(random_net):
    spec, params, batch = random_net
    with pytest.raises(ValueError):
        tolerance_profile(spec, params, batch, scale_grid=(0.1, 0.01))


def test_profile_csv(tmp_path, random_net):
    spec, params, batch = random_net
    prof = tolerance_profile(spec, params, batch, scale_grid=(1e-3, 1e-2), directions=2)
    path = tmp_path / "profile.csv"
    prof.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 * len(params.layer_ids)
    assert set(rows[0]) == {"layer_id", "scale", "gap", "pass"}


def test_first_order_check_at_minimum():
    spec, params, batch = quadratic_surrogate(np.diag([2.0, 3.0]), [0.0, 0.0])
    rep = first_order_check(spec, params, batch)
    assert rep.grad_inf_norm == 0.0 and rep.fraction_below == 1.0


def test_first_order_check_reflects_training(trained_mlp, teacher_splits):
    rep = first_order_check(trained_mlp.spec, trained_mlp.params, teacher_splits["train"])
    assert rep.grad_inf_norm == pytest.approx(trained_mlp.meta["final_grad_inf_norm"], rel=1e-12)
    assert rep.grad_inf_norm < 1e-3


def test_first_order_check_random_init(random_net):
    spec, params, batch = random_net
    assert first_order_check(spec, params, batch).fraction_below < 0.5
