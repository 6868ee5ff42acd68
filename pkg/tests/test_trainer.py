import math

import numpy as np
import pytest

from orthoreg import measures
from orthoreg.gradcheck import finite_difference, relative_error
from orthoreg.measures import RegularizerSpec, Variant
from orthoreg.trainer import (DatasetSpec, ToyNetwork, TrainConfig, TrainingError, architecture_of,
                              inaccessible_orthogonality_demo, layer_masks, make_synthetic_dataset,
                              objective, resolve_plan, task_loss_and_grads, train)

BASE = dict(epochs=30, batch_size=32, lr=0.05, lr_milestones=[15, 25], lr_factor=0.1, seed=0,
            hidden=[8], dataset=dict(classes=4, input_dim=32, samples_per_class=100, separation=4.0))


def cfg(**changes):
    return TrainConfig.from_dict({**BASE, **changes})


def test_dataset_shapes_and_split():
    tr, va = make_synthetic_dataset(DatasetSpec(3, 5, 20, 2.0), seed=1)
    assert tr.x.shape == (54, 5) and va.x.shape == (6, 5)
    assert set(np.unique(np.concatenate([tr.y, va.y]))) == {0, 1, 2}


def test_dataset_deterministic():
    a = make_synthetic_dataset(DatasetSpec(), seed=4)
    b = make_synthetic_dataset(DatasetSpec(), seed=4)
    assert a[0].x.tobytes() == b[0].x.tobytes() and a[1].y.tobytes() == b[1].y.tobytes()


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        DatasetSpec(samples_per_class=0)


def test_separable_task_single_layer():
    config = TrainConfig.from_dict(dict(epochs=10, hidden=[], seed=0,
                                        dataset=dict(classes=2, input_dim=8, samples_per_class=100,
                                                     separation=10.0)))
    _, hist = train(config)
    assert hist.final["val_acc"] >= 0.99


def test_vanilla_two_class_with_hidden_layer():
    config = TrainConfig.from_dict(dict(epochs=10, hidden=[8], seed=0,
                                        dataset=dict(classes=2, input_dim=8, samples_per_class=100,
                                                     separation=10.0)))
    _, hist = train(config)
    assert hist.final["val_acc"] >= 0.99


def test_network_composition_checked():
    with pytest.raises(ValueError):
        ToyNetwork([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])


def test_task_gradient_finite_differences(rng):
    net = ToyNetwork.init([6, 5, 3], seed=2)
    x = rng.standard_normal((10, 6))
    y = rng.integers(0, 3, size=10)
    _, gw, gb = task_loss_and_grads(net, x, y)
    for n in range(2):
        def f(W, n=n):
            other = net.copy()
            other.weights[n] = W
            return task_loss_and_grads(other, x, y)[0]
        assert relative_error(gw[n], finite_difference(f, net.weights[n])) <= 1e-6


def _flat(net):
    return np.concatenate([p.ravel() for p in net.params()])


def _unflat(net, vec):
    out = net.copy()
    pos = 0
    for p in out.params():
        p[...] = vec[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return out


@pytest.mark.parametrize("variant", ["frobenius", "scaled_frobenius", "srip", "disentangled", "relaxed"])
def test_objective_gradient_end_to_end(rng, variant):
    config = cfg(hidden=[12, 6], dataset=dict(classes=3, input_dim=5, samples_per_class=10, separation=2.0),
                 regularize=[0, 1])
    net = ToyNetwork.init(config.sizes, seed=1)
    x = rng.standard_normal((16, 5))
    y = rng.integers(0, 3, size=16)
    layers = config.regularized_layers()
    masks = {}
    if variant == "relaxed":
        spec = RegularizerSpec(Variant.DISENTANGLED, 0.1)
        plan = resolve_plan(TrainConfig.from_dict({**config.to_dict(), "relaxation": {"attribute": 3, "trials": 500},
                                                   "regularizer": spec.to_dict()}))
        masks = layer_masks(net, layers, plan)
        assert masks, "the 12x5 layer is over-determined and must get a mask"
    else:
        spec = RegularizerSpec(Variant(variant), 0.1, 2, 3)
    _, gw, gb = objective(net, x, y, spec, 0.7, 0.1, layers, masks)
    analytic = np.concatenate([g.ravel() for g in gw + gb])
    numeric = finite_difference(lambda v: objective(_unflat(net, v), x, y, spec, 0.7, 0.1, layers, masks)[0],
                                _flat(net), 1e-5)
    assert relative_error(analytic, numeric) <= 1e-4


def test_lr_schedule_exact():
    c = cfg(lr=0.1, lr_milestones=[3, 5], lr_factor=0.2, epochs=7)
    _, hist = train(c)
    lrs = [r["lr"] for r in hist.epochs]
    assert lrs == [0.1, 0.1, 0.1, 0.1 * 0.2, 0.1 * 0.2, 0.1 * 0.2 ** 2, 0.1 * 0.2 ** 2]


def test_training_deterministic():
    c = cfg(regularizer={"variant": "srip"}, c_reg=0.05, epochs=5)
    _, a = train(c)
    _, b = train(c)
    assert a.to_jsonl() == b.to_jsonl()


def test_one_record_per_epoch():
    _, hist = train(cfg(epochs=4))
    assert [r["epoch"] for r in hist.epochs] == [0, 1, 2, 3]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_location():
    c = cfg(lr=1e6, regularizer={"variant": "frobenius"}, c_reg=10.0, epochs=3)
    with pytest.raises(TrainingError, match="epoch"):
        train(c)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(momentum=1.0)
    with pytest.raises(ValueError):
        cfg(regularizer={"variant": "relaxed_disentangled",
                         "exemption_mask": {"o": 2, "exempt": []}})


def test_architecture_groups():
    c = cfg(hidden=[8, 8, 8])
    arch = architecture_of(c)
    assert [(l.group, l.module_index) for l in arch] == [("8x32", 0), ("8x8", 0), ("8x8", 1), ("4x8", 0)]


def test_plan_mismatch_rejected():
    c = cfg(regularizer={"variant": "disentangled"},
            plan=[{"layer": "layer0", "o": 9, "d": 32, "determinacy": "less_determined", "structural_dim": 9,
                   "freed_count": 0, "expected_relaxed_pairs": 0.0, "ratio": 1.0, "exempt_total": 0,
                   "exempt_positive": 0, "exempt_negative": 0}])
    with pytest.raises(ValueError, match="plan entry"):
        resolve_plan(c)


def test_scheduler_calibrates_lambda_and_share():
    c = cfg(epochs=30, regularizer={"variant": "disentangled", "lambda_diag": 0.1}, c_reg=0.1,
            balance={"calibration_epoch": 5})
    _, hist = train(c)
    records = hist.scheduler
    lam, creg = [r for r in records if r["action"] == "calibrate"]
    assert (lam["coefficient"], creg["coefficient"]) == ("lambda_diag", "c_reg")
    assert lam["epoch"] == creg["epoch"] == 5
    assert abs(lam["share_after"] - c.balance.target_diag_share) <= c.balance.eps_diag
    assert abs(creg["share_after"] - 0.10) <= c.balance.eps_reg
    assert [r["epoch"] for r in records if r["action"] in ("cap", "check")] == [15, 20, 25, 27]
    # the coefficients in force from epoch 5 on are the logged ones
    assert hist.epochs[5]["c_reg"] == creg["new"] and hist.epochs[5]["lambda_diag"] == lam["new"]
    assert hist.epochs[4]["c_reg"] == 0.1


def test_scheduler_cap_during_training():
    # an over-determined layer keeps the Frobenius loss above its floor while the task loss falls
    c = cfg(epochs=30, hidden=[48], regularizer={"variant": "frobenius"}, c_reg=0.1,
            balance={"calibration_epoch": 5},
            dataset=dict(classes=4, input_dim=32, samples_per_class=100, separation=8.0))
    _, hist = train(c)
    adjustments = [r for r in hist.scheduler if r["action"] in ("cap", "check")]
    assert any(r["action"] == "cap" for r in adjustments)
    for r in adjustments:
        assert r["share_after"] <= c.balance.cap_share + 1e-9
        if r["action"] == "cap":
            assert r["share_before"] > c.balance.cap_share
            assert r["share_after"] == pytest.approx(0.35, abs=1e-12)


def test_strict_disentangled_less_determined():
    strict = cfg(epochs=40, lr_milestones=[20, 30], regularizer={"variant": "disentangled", "lambda_diag": 0.1},
                 c_reg=0.5)
    _, hist = train(strict)
    layer = hist.final["layers"][0]
    assert (layer["o"], layer["d"]) == (8, 32)
    assert layer["tril_std"] <= 0.05
    assert 0.8 <= layer["diag_mean"] <= 1.2
    _, vanilla = train(cfg(epochs=40, lr_milestones=[20, 30]))
    assert layer["abs_corr_mean"] <= vanilla.final["layers"][0]["abs_corr_mean"] - 0.01


def test_demo_floor_and_relaxation():
    c = cfg(epochs=30, hidden=[16], dataset=dict(classes=4, input_dim=8, samples_per_class=100, separation=4.0),
            regularizer={"variant": "disentangled", "lambda_diag": 0.1}, c_reg=0.5)
    report = inaccessible_orthogonality_demo(c, c_regs=(0.0, 0.1, 1.0))
    assert (report.o, report.d) == (16, 8)
    assert all(r.frobenius >= math.sqrt(8) - 1e-6 for r in report.rows)
    assert report.rows[0].c_reg == 0.0
    # unregularized baseline row equals a plain run's residual
    _, base = train(TrainConfig.from_dict({**c.to_dict(), "regularizer": {"variant": "frobenius"},
                                           "c_reg": 0.0, "regularize": [0]}))
    assert report.rows[0].frobenius == pytest.approx(base.final["layers"][0]["frobenius"], rel=1e-12)
    assert report.relaxed_exempt[0] + report.relaxed_exempt[1] > 0
    assert report.relaxed_masked_corr < report.strict_corr


def test_demo_needs_overdetermined_layer():
    with pytest.raises(ValueError, match="over-determined"):
        inaccessible_orthogonality_demo(cfg(), c_regs=(0.0,))
