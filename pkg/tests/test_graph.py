import numpy as np
import pytest

import expected
from maiq.errors import EmptyCalibrationSet, ShapeMismatch
from maiq.graph import LayerKind, LayerSpec, Mode, ModelGraph, infer, layer_errors, quantize_model
from maiq.kernels import Padding, conv_output_extent
from maiq.presets import PresetId, build_preset, color_probe, tiny_layers
from maiq.tensor import DType


def table_rows(graph):
    """Layer specs and input shapes of the architecture rows (between RESIZE and SOFTMAX)."""
    shapes = graph.shapes()
    return [(graph.layers[i], shapes[i]) for i in range(1, len(graph.layers) - 1)], shapes[-2]


class TestByteScene:
    def test_input_shapes(self):
        rows, out = table_rows(build_preset("bytescene"))
        assert [s for _, s in rows] == expected.BYTESCENE_INPUT_SHAPES
        assert out == expected.BYTESCENE_OUTPUT_SHAPE

    def test_block_counts(self):
        g = build_preset("bytescene")
        bnecks = [s for s in g.layers if s.kind is LayerKind.BNECK]
        assert len(bnecks) == expected.BYTESCENE_BNECKS
        assert sum(b.bneck.use_se for b in bnecks) == expected.BYTESCENE_SE_BLOCKS

    def test_same_padding_rule_on_consecutive_rows(self):
        rows, out = table_rows(build_preset("bytescene"))
        shapes = [s for _, s in rows] + [out]
        for (spec, (h, w, _)), (nh, nw, _) in zip(rows, shapes[1:]):
            stride = spec.conv.stride if spec.kind is LayerKind.CONV else (
                spec.bneck.stride if spec.kind is LayerKind.BNECK else None)
            if stride is None:
                continue
            assert conv_output_extent(h, 3, stride, Padding.SAME) == nh
            assert conv_output_extent(w, 3, stride, Padding.SAME) == nw

    def test_residual_placement(self):
        rows, _ = table_rows(build_preset("bytescene"))
        res = [s.bneck.has_residual(shape[2]) for s, shape in rows if s.kind is LayerKind.BNECK]
        # no residual on stride-2 or channel-changing rows
        assert res[:5] == [True, False, False, True, True]
        assert res[8] is False and res[-1] is True

    def test_head(self):
        g = build_preset("bytescene")
        assert g.layers[-3].units == 1280 and g.layers[-2].units == 30
        assert g.num_classes == 30


class TestPresets:
    @pytest.mark.parametrize("pid", list(PresetId))
    def test_builds_and_validates(self, pid):
        g = build_preset(pid)
        assert g.mode is Mode.REAL
        assert g.shapes()[0] == (384, 576, 3)
        assert g.shapes()[-1][-1] == 30

    def test_evai_input_and_head(self):
        g = build_preset("evai")
        assert g.shapes()[1] == (96, 144, 3)
        assert not any(s.kind is LayerKind.FC for s in g.layers)
        assert g.layers[-2].kind is LayerKind.GLOBAL_AVGPOOL

    def test_tiny_is_small(self):
        assert build_preset("tiny").param_count() <= 70_000

    def test_param_counts_stable(self):
        assert build_preset("tiny").param_count() == 66_162
        assert build_preset("evai").param_count() == 590_854
        assert build_preset("bytescene").param_count() == 7_690_702

    def test_seeded_weights(self):
        a, b, c = build_preset("tiny", 1), build_preset("tiny", 1), build_preset("tiny", 2)
        for wa, wb, wc in zip(a.weights, b.weights, c.weights):
            for k in wa:
                np.testing.assert_array_equal(wa[k], wb[k])
        assert not np.array_equal(a.weights[1]["w"], c.weights[1]["w"])

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            build_preset("resnet")

    def test_color_probe_rejects_other_presets(self):
        from maiq.dataset import default_palette

        with pytest.raises(ValueError):
            color_probe(build_preset("evai"), default_palette())


class TestValidation:
    def test_must_start_with_resize(self):
        g = build_preset("tiny")
        with pytest.raises(ShapeMismatch):
            ModelGraph(g.input, g.layers[1:], g.weights[1:], g.labels)

    def test_blob_shape_checked(self):
        g = build_preset("tiny")
        w = [dict(d) for d in g.weights]
        w[1]["w"] = np.zeros((3, 3, 3, 7), np.float32)
        with pytest.raises(ShapeMismatch):
            ModelGraph(g.input, g.layers, w, g.labels)

    def test_label_count_checked(self):
        g = build_preset("tiny")
        with pytest.raises(ShapeMismatch):
            ModelGraph(g.input, g.layers, g.weights, g.labels[:-1])

    def test_wrong_image_shape(self):
        with pytest.raises(ShapeMismatch):
            build_preset("tiny").predict_proba(np.zeros((100, 100, 3)))

    def test_avgpool_too_small(self):
        with pytest.raises(ShapeMismatch):
            LayerSpec(LayerKind.AVGPOOL, pool=2).output_shape((1, 1, 4))


class TestExecution:
    def test_probabilities(self, random_images):
        g = build_preset("tiny")
        p = infer(g, random_images[0])
        assert p.shape == (30,) and p.sum() == pytest.approx(1.0) and np.all(p >= 0)
        batch = g.predict_proba(np.stack(random_images))
        assert batch.shape == (3, 30)
        np.testing.assert_allclose(batch[0], p)

    def test_preprocess_range(self):
        g = build_preset("tiny")
        lo = g.preprocess(np.zeros((384, 576, 3)))
        hi = g.preprocess(np.full((384, 576, 3), 255.0))
        assert lo.shape == (1, 128, 128, 3)
        np.testing.assert_allclose(lo, -1.0)
        np.testing.assert_allclose(hi, 1.0)

    def test_empty_calibration(self):
        with pytest.raises(EmptyCalibrationSet):
            quantize_model(build_preset("tiny"), [])

    def test_quantize_requires_real(self, preset_pairs, random_images):
        _, q = preset_pairs["tiny"]
        with pytest.raises(ValueError):
            quantize_model(q, random_images)

    def test_quantized_graph_metadata(self, preset_pairs):
        for real, q in preset_pairs.values():
            assert q.mode is Mode.QUANTIZED and q.input_params is not None
            assert q.param_count() == real.param_count()
            for blobs in q.weights:
                for name, t in blobs.items():
                    assert t.dtype is (DType.INT32 if name.endswith("b") else DType.INT8)

    def test_activations_stay_int8(self, preset_pairs, random_images):
        for _, q in preset_pairs.values():
            trace = []
            q.forward_quantized(q.preprocess(random_images[0]), trace=trace)
            assert trace and all(dtype == np.int8 for *_, dtype in trace)

    def test_quantized_probabilities(self, preset_pairs, random_images):
        for real, q in preset_pairs.values():
            p = q.predict_proba(random_images[0])
            assert p.shape == (1, 30) and p.sum() == pytest.approx(1.0)

    def test_quantization_deterministic(self, preset_pairs, random_images):
        from maiq import serialize

        real, q = preset_pairs["tiny"]
        again = quantize_model(real, random_images)
        assert serialize.to_bytes(again) == serialize.to_bytes(q)
        a = q.predict_proba(np.stack(random_images))
        b = again.predict_proba(np.stack(random_images))
        np.testing.assert_array_equal(a, b)


class TestLayerErrors:
    def test_tiny_end_to_end(self, preset_pairs, random_images):
        real, q = preset_pairs["tiny"]
        rows = layer_errors(real, q, random_images)
        assert len(rows) == len(real.layers) - 2
        assert max(r["mean_abs_err_scales"] for r in rows) <= 2.0

    @pytest.mark.parametrize("name", ["evai", "bytescene"])
    def test_deep_presets_isolated(self, preset_pairs, random_images, name):
        real, q = preset_pairs[name]
        rows = layer_errors(real, q, random_images[:1], isolated=True)
        assert max(r["mean_abs_err_scales"] for r in rows) <= 2.0

    def test_probe_end_to_end(self, probe_pair, small_corpus):
        real, q = probe_pair
        imgs = [it.pixels for it in list(small_corpus)[:10]]
        rows = layer_errors(real, q, imgs)
        assert max(r["max_abs_err_scales"] for r in rows) <= 2.0

    def test_probe_agrees_across_modes(self, probe_pair, small_corpus):
        real, q = probe_pair
        for it in small_corpus:
            assert np.argmax(real.predict_proba(it.pixels)) == it.label
            assert np.argmax(q.predict_proba(it.pixels)) == it.label


def test_tiny_layers_end_in_softmax():
    assert tiny_layers()[-1].kind is LayerKind.SOFTMAX


class TestQuantizedArtifacts:
    def test_weight_round_trip_per_channel(self, preset_pairs):
        real, q = preset_pairs["bytescene"]
        for rb, qb in zip(real.weights, q.weights):
            for name, w in rb.items():
                if name.endswith("w"):
                    err = np.abs(qb[name].dequantize() - w)
                    assert np.all(err <= qb[name].qparams.scale_array() / 2 * (1 + 1e-6) + 1e-12)

    def test_bytescene_size_band(self, preset_pairs):
        from maiq import serialize

        mb = serialize.serialized_size(preset_pairs["bytescene"][1]) / 1e6
        assert 6.0 <= mb <= 10.5

    def test_same_seed_same_bytes(self):
        from maiq import serialize

        assert serialize.to_bytes(build_preset("evai", 4)) == serialize.to_bytes(build_preset("evai", 4))

    def test_activation_chain_is_single_pass(self, preset_pairs, random_images):
        _, q = preset_pairs["bytescene"]
        trace = []
        q.forward_quantized(q.preprocess(random_images[0]), trace=trace)
        for (_, _, out_bytes, _), (_, in_bytes, _, _) in zip(trace, trace[1:]):
            assert out_bytes == in_bytes

    @pytest.mark.parametrize("name", ["tiny", "evai", "bytescene"])
    def test_real_vs_quantized_agreement_reported(self, preset_pairs, name):
        from conftest import REPORTED_METRICS

        real, q = preset_pairs[name]
        gen = np.random.default_rng(11)
        images = gen.uniform(0, 255, (100, 384, 576, 3))
        agree = 0
        for chunk in np.array_split(images, 10):
            agree += int(np.sum(real.predict_proba(chunk).argmax(1) == q.predict_proba(chunk).argmax(1)))
        REPORTED_METRICS.append(f"{name}: REAL vs INT8 top-1 agreement on 100 random images = {agree}%")
        assert 0 <= agree <= 100
