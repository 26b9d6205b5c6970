import csv

import numpy as np
import pytest

from sigquant.checkpoint import load_checkpoint, save_checkpoint
from sigquant.core import PRESETS
from sigquant.datasets import load_dataset
from sigquant.exceptions import ConfigurationError, DivergenceError
from sigquant.nn import SGD, Network
from sigquant.training import (
    AblationConfig,
    PhasePlan,
    StepLR,
    TemperatureSchedule,
    ablation_suite,
    build_quantized_network,
    evaluate,
    finalize,
    train,
    train_float,
)

ARCH = "conv:4:3:1,relu,pool:2,flatten,linear:16,relu,linear:4"


@pytest.fixture(scope="module")
def blobs():
    ds = load_dataset(format="synthetic", seed=3, classes=4, n=240, features=16)
    return ds.split(0.25, 0)


@pytest.fixture(scope="module")
def pretrained(blobs):
    tr, va = blobs
    net, _ = train_float(Network.from_arch(ARCH, tr.input_shape, 0), tr, va, 3, 0)
    return net


class TestSchedules:
    def test_temperature(self):
        assert TemperatureSchedule(10)(3) == 30
        assert TemperatureSchedule(5)(1) == 5

    def test_temperature_epoch_zero(self):
        with pytest.raises(ConfigurationError):
            TemperatureSchedule(10)(0)

    def test_step_lr(self):
        sched = StepLR(1.0, (3, 5))
        assert [sched(e) for e in (1, 2, 3, 4, 5)] == pytest.approx([1, 1, 0.1, 0.1, 0.01])

    def test_default_plan_tiles(self):
        plan = PhasePlan.default(10)
        assert [(p.name, p.start, p.end) for p in plan.phases] == [
            ("weights", 1, 4), ("activations", 5, 6), ("joint", 7, 10)]
        assert not plan.phases[0].quantize_activations
        assert not plan.phases[1].train_weights

    def test_plan_without_activations(self):
        plan = PhasePlan.default(10, with_activations=False)
        assert [(p.name, p.start, p.end) for p in plan.phases] == [("weights", 1, 4), ("joint", 5, 10)]

    def test_plan_roundtrip(self):
        plan = PhasePlan.default(7)
        assert PhasePlan.from_list(plan.to_list()) == plan

    def test_plan_must_tile(self):
        from sigquant.training import Phase

        with pytest.raises(ConfigurationError):
            PhasePlan((Phase("a", 1, 3), Phase("b", 5, 6)))


class TestBuild:
    def test_interior_layers_only(self):
        base = Network.from_arch("linear:8,relu,linear:8,relu,linear:8,relu,linear:2", (4,))
        net = build_quantized_network(base, "ternary")
        quantized = [l.name for l in net.parameterized_layers() if l.weight_quantizer is not None]
        assert quantized == ["fc2", "fc3"]
        assert base.quantizers() == []

    def test_binary_constants(self):
        base = Network.from_arch("linear:8,relu,linear:8,relu,linear:2", (4,))
        q = build_quantized_network(base, "binary").weight_quantizers()[0]
        assert (q.levels.n, q.levels.step_scales, q.levels.offset) == (1, (2,), 1.0)
        np.testing.assert_array_equal(q.params.biases, [0.0])

    def test_binary_activations(self, rng):
        base = Network.from_arch("linear:8,relu,linear:8,relu,linear:2", (4,))
        net = build_quantized_network(base, "ternary", "act1bit", rng.normal(size=(50, 4)))
        (aq,) = net.activation_quantizers()
        assert aq.levels.step_scales == (1,) and aq.levels.offset == 0.0
        assert net.layers[1].activation_quantizer is aq

    def test_conv_activation_after_pool(self, pretrained, blobs):
        net = build_quantized_network(pretrained, "ternary", "act2bit", blobs[0].X, quantize_first_last=True)
        assert net.layer("pool1").activation_quantizer is not None

    def test_shared(self):
        base = Network.from_arch("linear:8,relu,linear:8,relu,linear:8,relu,linear:2", (4,))
        net = build_quantized_network(base, "3bit±4", shared=True)
        assert [q.name for q in net.quantizers()] == ["shared.wq"]

    def test_activations_need_calibration(self):
        base = Network.from_arch("linear:8,relu,linear:8,relu,linear:2", (4,))
        with pytest.raises(ConfigurationError):
            build_quantized_network(base, "ternary", "act2bit")


class TestTrain:
    def test_one_epoch_one_record(self, pretrained, blobs):
        tr, va = blobs
        net = build_quantized_network(pretrained, "ternary", quantize_first_last=True)
        _, metrics = train(net, tr, va, PhasePlan.single(1), TemperatureSchedule(10), SGD(0.01), 1)
        assert len(metrics.records) == 1
        r = metrics.last
        assert r.T == 10 and 0 <= r.val_acc_soft <= 100 and 0 <= r.val_acc_hard <= 100

    def test_finalize_matches_last_hard_accuracy(self, pretrained, blobs):
        tr, va = blobs
        net = build_quantized_network(pretrained, "ternary", quantize_first_last=True)
        net, metrics = train(net, tr, va, PhasePlan.default(3, with_activations=False),
                             TemperatureSchedule(10), SGD(0.01, 0.9), 3)
        model = finalize(net)
        assert model.accuracy(va.X, va.y) == metrics.last.val_acc_hard
        assert model.packed().accuracy(va.X, va.y, use_packed=True) == metrics.last.val_acc_hard
        for op in model.dense_ops():
            assert set(np.unique(op.codes)) <= {-1.0, 0.0, 1.0}

    def test_metrics_csv_header(self, tmp_path, pretrained, blobs):
        tr, va = blobs
        net = build_quantized_network(pretrained, "ternary", quantize_first_last=True)
        _, metrics = train(net, tr, va, PhasePlan.single(2), TemperatureSchedule(10), SGD(0.01), 2)
        metrics.to_csv(tmp_path / "m.csv")
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0] == ["epoch", "T", "train_loss", "train_acc", "val_acc_soft", "val_acc_hard",
                           "gap_layer_0", "gap_layer_1", "gap_layer_2"]
        assert len(rows) == 3

    def test_gap_shrinks_with_temperature(self, pretrained, blobs):
        tr, va = blobs
        net = build_quantized_network(pretrained, "3bit±4", quantize_first_last=True)
        _, metrics = train(net, tr, va, PhasePlan.single(3), TemperatureSchedule(10), SGD(0.001), 3)
        gaps = [r.gaps[0] for r in metrics.records]
        assert gaps[0] > gaps[1] > gaps[2]

    def test_resume_is_bitwise(self, tmp_path, pretrained, blobs):
        tr, va = blobs
        plan, sched = PhasePlan.default(4, with_activations=False), TemperatureSchedule(10)
        base = build_quantized_network(pretrained, "ternary", quantize_first_last=True)
        full, full_m = train(base.copy(), tr, va, plan, sched, SGD(0.01, 0.9, 5e-4, 5.0), 4, seed=5)

        def stop_after_two(epoch, net, opt, metrics):
            if epoch == 2:
                save_checkpoint(tmp_path / "c.npz", net, opt, epoch, metrics)

        part = base.copy()
        train(part, tr, va, plan, sched, SGD(0.01, 0.9, 5e-4, 5.0), 2, seed=5, on_epoch_end=stop_after_two)
        ck = load_checkpoint(tmp_path / "c.npz")
        resumed, res_m = train(ck.network, tr, va, plan, sched, ck.opt, 4, seed=5, start_epoch=3,
                               metrics=ck.metrics)
        for k, v in full.named_parameters().items():
            np.testing.assert_array_equal(resumed.named_parameters()[k], v)
        assert res_m.to_dict() == full_m.to_dict()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, blobs):
        tr, va = blobs
        net = Network.from_arch(ARCH, tr.input_shape, 0)
        net.layer("fc1").weight[...] *= 1e300
        with pytest.raises(DivergenceError) as err:
            train(net, tr, va, PhasePlan.single(2), TemperatureSchedule(10), SGD(0.1), 2)
        assert err.value.epoch == 1

    def test_evaluate_modes_agree_without_quantizers(self, pretrained, blobs):
        _, va = blobs
        accs = {m: evaluate(pretrained, va.X, va.y, m) for m in ("float", "soft", "hard")}
        assert len(set(accs.values())) == 1


def test_ablation_rows(blobs):
    tr, va = blobs
    rows = ablation_suite(AblationConfig(ARCH, "3bit±4", pretrain_epochs=2, epochs=2), tr, va)
    assert [r["ablation"] for r in rows] == ["bias initialization", "quantizer sharing", "starting point"]
    for r in rows:
        assert r["difference"] == pytest.approx(r["acc_a"] - r["acc_b"])
        assert r["holds"] == (r["acc_a"] >= r["acc_b"])
