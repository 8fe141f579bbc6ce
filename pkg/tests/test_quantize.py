import numpy as np
import pytest

from clickseg import blocks as B
from clickseg import modelfile as MF
from clickseg import quantize as Q
from clickseg import tensor as T
from clickseg.model import ClickSegNet, ModelConfig, PromptSet
from clickseg.tensor import Tensor, make_rng

MICRO = ModelConfig(input_size=16, channel_schedule=(4, 8, 8, 16), token_dim=16, head_count=2)


def micro_net(seed=0, warm=True):
    net = ClickSegNet(MICRO, make_rng(seed))
    if warm:
        # push the running stats away from their init so folding is non-trivial
        rng = make_rng(seed + 1)
        for _ in range(3):
            x = Tensor(rng.standard_normal((2, 5, 16, 16)).astype(np.float32))
            clicks = [[(4, 4, "fg")], [(9, 9, "fg")]]
            from clickseg.model import Click
            net.forward_tensors(x, [[Click(*c) for c in cl] for cl in clicks])
            T.reset_tape()
    net.eval()
    return net


def predict_logits(net, seed=3):
    rng = make_rng(seed)
    img = (rng.random((3, 16, 16)) * 255).astype(np.uint8)
    out = net.predict(img, PromptSet(clicks=((5, 5, "fg"), (12, 3, "bg"))))
    return out.mask_logits, out.iou_scores


class TestQuantizeTensor:
    def test_ternary_weights_round_trip_exactly(self):
        rng = make_rng(0)
        w = rng.choice([-1.0, 0.0, 1.0], size=(8, 4, 3, 3)).astype(np.float32)
        w[0] = 0.0  # include an all-zero channel
        qt = Q.quantize_tensor(w, 0)
        np.testing.assert_array_equal(Q.dequantize_tensor(qt), w)

    def test_error_bound_half_scale(self):
        rng = make_rng(1)
        for axis, shape in ((0, (6, 3, 3, 3)), (1, (4, 7, 2, 2)), (1, (10, 5))):
            w = (rng.standard_normal(shape) * rng.uniform(0.01, 3)).astype(np.float32)
            qt = Q.quantize_tensor(w, axis)
            err = np.abs(w - Q.dequantize_tensor(qt))
            assert np.all(err <= qt.scales / 2 + 1e-6)
            assert np.all(np.abs(qt.values.astype(np.int32)) <= 127)

    def test_zero_channel_sentinel(self):
        w = np.zeros((3, 2, 1, 1), np.float32)
        w[1] = 5.0
        qt = Q.quantize_tensor(w, 0)
        assert qt.scales[0, 0, 0, 0] == 1.0
        assert np.all(qt.values[0] == 0)
        assert qt.scales.shape == (3, 1, 1, 1)

    def test_channel_axis_one(self):
        rng = make_rng(2)
        w = rng.standard_normal((3, 5, 2, 2)).astype(np.float32)
        qt = Q.quantize_tensor(w, 1)
        assert qt.scales.shape == (1, 5, 1, 1)
        # each output channel's max maps to +/-127
        got = np.abs(qt.values).max(axis=(0, 2, 3))
        assert np.all(got == 127)

    def test_zero_points_fixed(self):
        with pytest.raises(ValueError):
            Q.QuantizedTensor(values=np.zeros(3, np.int8), scales=np.ones(3, np.float32),
                              zero_points=1)


class TestFolding:
    def test_fold_count_and_idempotence(self):
        net = micro_net()
        n_bns = sum(1 for _, l in MF._walk_layers(net) if isinstance(l, B.BatchNorm2d))
        assert Q.fold_all_batchnorms(net) == n_bns
        assert Q.fold_all_batchnorms(net) == 0

    def test_folded_inference_matches(self):
        net = micro_net()
        before = predict_logits(net)
        Q.fold_all_batchnorms(net)
        after = predict_logits(net)
        assert np.max(np.abs(before[0] - after[0])) < 1e-4
        assert np.max(np.abs(before[1] - after[1])) < 1e-4

    def test_quantize_requires_folding(self):
        with pytest.raises(ValueError):
            Q.quantize_model(micro_net())

    def test_mixed_fold_state_rejected(self):
        net = micro_net()
        stage = net.encoder[0]
        B.fold_conv_bn(stage.conv1, stage.bn1)
        with pytest.raises(ValueError):
            MF.bundle_from_model(net)


class TestModelFile:
    def test_float_round_trip_bitwise(self, tmp_path):
        net = micro_net()
        p1, p2 = str(tmp_path / "a.sqsm"), str(tmp_path / "b.sqsm")
        MF.save_model(p1, net)
        net2, bundle = MF.load_model(p1)
        for (n1, t1), (n2, t2) in zip(net.named_parameters(), net2.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)
        for (n1, b1), (n2, b2) in zip(net.named_buffers(), net2.named_buffers()):
            assert n1 == n2
            np.testing.assert_array_equal(b1, b2)
        MF.save_bundle(p2, bundle)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_loaded_model_predicts_bitwise(self, tmp_path):
        net = micro_net()
        path = str(tmp_path / "m.sqsm")
        MF.save_model(path, net)
        net2, _ = MF.load_model(path)
        a, b = predict_logits(net), predict_logits(net2)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_quantized_round_trip_bitwise(self, tmp_path):
        net = micro_net()
        Q.fold_all_batchnorms(net)
        bundle = Q.quantize_model(net)
        assert bundle.config["quantized"] and bundle.config["folded"]
        p1, p2 = str(tmp_path / "q1.sqsm"), str(tmp_path / "q2.sqsm")
        MF.save_bundle(p1, bundle)
        MF.save_bundle(p2, MF.load_bundle(p1))
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_quantized_model_loads_with_bounded_weight_error(self, tmp_path):
        net = micro_net()
        Q.fold_all_batchnorms(net)
        bundle = Q.quantize_model(net)
        path = str(tmp_path / "q.sqsm")
        MF.save_bundle(path, bundle)
        net2 = MF.model_from_bundle(MF.load_bundle(path))
        axes = Q._quantizable_weight_axes(net)
        p1 = dict(net.named_parameters())
        p2 = dict(net2.named_parameters())
        assert p1.keys() == p2.keys()
        for name in p1:
            if name in axes:
                qt = Q.quantize_tensor(p1[name].data, axes[name])
                assert np.max(np.abs(p1[name].data - p2[name].data)) <= qt.scales.max() / 2 + 1e-6
            else:
                np.testing.assert_array_equal(p1[name].data, p2[name].data)

    def test_fold_then_quantize_equals_quantize_of_folded_weights(self):
        net = micro_net()
        Q.fold_all_batchnorms(net)
        bundle = Q.quantize_model(net)
        w = dict(net.named_parameters())["encoder.0.conv1.weight"].data
        qt = Q.quantize_tensor(w, 0)
        np.testing.assert_array_equal(bundle.tensors["encoder.0.conv1.weight"], qt.values)

    def test_bad_magic_rejected(self, tmp_path):
        net = micro_net(warm=False)
        path = str(tmp_path / "m.sqsm")
        MF.save_model(path, net)
        raw = bytearray(open(path, "rb").read())
        raw[:4] = b"XXXX"
        open(path, "wb").write(bytes(raw))
        with pytest.raises(MF.ModelFormatError) as err:
            MF.load_bundle(path)
        assert err.value.offset == 0

    def test_bad_version_rejected(self, tmp_path):
        net = micro_net(warm=False)
        path = str(tmp_path / "m.sqsm")
        MF.save_model(path, net)
        raw = bytearray(open(path, "rb").read())
        raw[4:6] = (99).to_bytes(2, "little")
        open(path, "wb").write(bytes(raw))
        with pytest.raises(MF.ModelFormatError):
            MF.load_bundle(path)

    def test_truncation_rejected_with_offset(self, tmp_path):
        net = micro_net(warm=False)
        path = str(tmp_path / "m.sqsm")
        n = MF.save_model(path, net)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: n - 100])
        with pytest.raises(MF.ModelFormatError) as err:
            MF.load_bundle(path)
        assert err.value.offset is not None

    def test_missing_and_unknown_tensors_rejected(self, tmp_path):
        net = micro_net(warm=False)
        bundle = MF.bundle_from_model(net)
        sabotaged = MF.ModelBundle(config=bundle.config, tensors=dict(bundle.tensors))
        sabotaged.tensors.pop("mask_tokens")
        with pytest.raises(MF.ModelFormatError):
            MF.model_from_bundle(sabotaged)
        extra = MF.ModelBundle(config=bundle.config, tensors=dict(bundle.tensors))
        extra.tensors["bogus"] = np.zeros(3, np.float32)
        with pytest.raises(MF.ModelFormatError):
            MF.model_from_bundle(extra)

    def test_int8_without_scale_rejected(self):
        net = micro_net(warm=False)
        bundle = MF.bundle_from_model(net)
        bundle.tensors["mask_tokens"] = bundle.tensors["mask_tokens"].astype(np.int8)
        with pytest.raises(MF.ModelFormatError):
            MF.model_from_bundle(bundle)

    def test_reference_config_file_sizes(self, tmp_path):
        cfg = ModelConfig()  # full-scale defaults
        net = ClickSegNet(cfg, make_rng(0))
        n_params = B.param_count(net)
        f32_path = str(tmp_path / "ref.sqsm")
        f32_bytes = MF.save_model(f32_path, net)
        Q.fold_all_batchnorms(net)
        q_bytes = MF.save_bundle(str(tmp_path / "ref_q.sqsm"), Q.quantize_model(net))
        print(f"\nreference config: {n_params:,} params; "
              f"float file {f32_bytes / 1e6:.1f} MB; int8 file {q_bytes / 1e6:.1f} MB "
              f"(paper-scale anchor: ~12.5 MB)")
        assert q_bytes < 0.4 * f32_bytes
