"""Detector assembly: shapes, decode, NMS, accounting, checkpoints."""

import numpy as np
import pytest

from oracles import nms_bruteforce
from ssmdet.blocks import Conv2dLayer, conv_flops
from ssmdet.model import Detection, Detector, ScaleSpec, decode, get_scale, nms
from ssmdet.tensor import ShapeError, Tensor

TOY = get_scale("n", width_override=0.125)


@pytest.fixture(scope="module")
def toy_model():
    return Detector(TOY, seed=0).eval()


class TestBuild:
    def test_smoke_and_param_count(self, toy_model):
        assert toy_model.count_params() > 100_000

    def test_same_seed_builds_identical_weights(self):
        a = Detector(TOY, seed=3)
        b = Detector(TOY, seed=3)
        for (name_a, pa), (name_b, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert name_a == name_b
            assert np.array_equal(pa.data, pb.data), name_a

    def test_different_seeds_differ(self):
        a = Detector(TOY, seed=0)
        b = Detector(TOY, seed=1)
        assert not np.array_equal(a.stem.conv1.weight.data, b.stem.conv1.weight.data)

    def test_scale_monotonicity(self):
        counts = [Detector(get_scale(s)).count_params() for s in ("n", "s", "m")]
        assert counts[0] < counts[1] < counts[2]

    def test_invalid_scale_rejected(self):
        with pytest.raises(ValueError):
            get_scale("x")
        with pytest.raises(ValueError):
            ScaleSpec("n", width=-1.0, depth=0.33)


class TestForward:
    def test_grid_ladder_64(self, toy_model):
        x = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        pyramid, maps = toy_model(x)
        assert [cls.shape[2:] for cls, _ in maps] == [(8, 8), (4, 4), (2, 2)]
        assert pyramid.p3.shape[2:] == (8, 8)
        assert pyramid.p4.shape[2:] == (4, 4)
        assert pyramid.p5.shape[2:] == (2, 2)

    def test_pyramid_halves_between_levels(self, toy_model):
        x = Tensor(np.zeros((1, 3, 96, 64), dtype=np.float32))
        pyramid, _ = toy_model(x)
        p3, p4, p5 = pyramid.p3.shape[2:], pyramid.p4.shape[2:], pyramid.p5.shape[2:]
        assert p3 == (12, 8) and p4 == (6, 4) and p5 == (3, 2)

    def test_indivisible_input_names_padding(self, toy_model):
        x = Tensor(np.zeros((1, 3, 60, 64), dtype=np.float32))
        with pytest.raises(ShapeError, match="divisible by 32"):
            toy_model(x)

    def test_forward_deterministic(self, toy_model):
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
        _, maps_a = toy_model(x)
        _, maps_b = toy_model(x)
        for (ca, ra), (cb, rb) in zip(maps_a, maps_b):
            assert np.array_equal(ca.data, cb.data)
            assert np.array_equal(ra.data, rb.data)

    def test_reg_maps_non_negative(self, toy_model):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
        _, maps = toy_model(x)
        for _, reg in maps:
            assert np.all(reg.data >= 0.0)


def _single_level_maps(grid, stride, nc=2, fill_logit=-40.0):
    cls_map = np.full((nc, grid, grid), fill_logit, dtype=np.float32)
    reg_map = np.zeros((4, grid, grid), dtype=np.float32)
    return cls_map, reg_map


class TestDecode:
    def test_all_low_logits_give_nothing(self):
        maps = [_single_level_maps(4, 8), _single_level_maps(2, 16)]
        dets = decode(maps, (8, 16), conf_threshold=0.01, max_dets=10, frame_hw=(32, 32))
        assert dets == []

    def test_hand_decoded_cell(self):
        cls_map, reg_map = _single_level_maps(20, 32)
        cls_map[1, 0, 0] = 10.0
        reg_map[:, 0, 0] = 1.0
        dets = decode([(cls_map, reg_map)], (32,), 0.01, 10, frame_hw=(640, 640))
        assert len(dets) == 1
        d = dets[0]
        # center (16,16), half-extents 32, clamped at the frame edge
        assert d.box == (0.0, 0.0, 48.0, 48.0)
        assert d.class_id == 1
        assert d.score == pytest.approx(1.0 / (1.0 + np.exp(-10.0)), rel=1e-6)

    def test_hand_decoded_interior_cell(self):
        cls_map, reg_map = _single_level_maps(20, 32)
        cls_map[0, 1, 1] = 10.0
        reg_map[:, 1, 1] = 1.0
        dets = decode([(cls_map, reg_map)], (32,), 0.01, 10, frame_hw=(640, 640))
        assert len(dets) == 1
        assert dets[0].box == (16.0, 16.0, 80.0, 80.0)

    def test_max_dets_one_returns_global_argmax(self):
        rng = np.random.default_rng(6)
        cls_map = rng.standard_normal((3, 6, 6)).astype(np.float32)
        reg_map = rng.uniform(0.1, 2.0, (4, 6, 6)).astype(np.float32)
        dets = decode([(cls_map, reg_map)], (8,), 0.0, 1, frame_hw=(48, 48))
        assert len(dets) == 1
        best = 1.0 / (1.0 + np.exp(-cls_map.max()))
        assert dets[0].score == pytest.approx(best, rel=1e-6)

    def test_boxes_valid_and_inside_frame(self):
        rng = np.random.default_rng(7)
        cls_map = rng.standard_normal((3, 8, 8)).astype(np.float32) * 3
        reg_map = rng.uniform(0.0, 6.0, (4, 8, 8)).astype(np.float32)
        dets = decode([(cls_map, reg_map)], (8,), 0.3, 100, frame_hw=(64, 64))
        assert dets
        for d in dets:
            x1, y1, x2, y2 = d.box
            assert x2 > x1 and y2 > y1
            assert 0 <= x1 and 0 <= y1 and x2 <= 64 and y2 <= 64
            assert np.isfinite(d.score)

    def test_bad_threshold_rejected(self):
        with pytest.raises(ValueError):
            decode([], (8,), 1.5, 10, (64, 64))


class TestNms:
    def test_disjoint_boxes_unchanged(self):
        dets = [Detection((0, 0, 10, 10), 0.9, 0),
                Detection((20, 20, 30, 30), 0.8, 0)]
        assert nms(dets, 0.5) == dets

    def test_identical_boxes_collapse(self):
        dets = [Detection((0, 0, 10, 10), 0.9, 1),
                Detection((0, 0, 10, 10), 0.7, 1)]
        kept = nms(dets, 0.99)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(20):
            dets = []
            for _ in range(int(rng.integers(0, 33))):
                x1, y1 = rng.uniform(0, 50, 2)
                bw, bh = rng.uniform(4, 30, 2)
                dets.append(Detection((x1, y1, x1 + bw, y1 + bh),
                                      float(rng.random()), int(rng.integers(0, 3))))
            got = nms(dets, 0.5)
            want = nms_bruteforce(dets, 0.5)
            assert got == want


class TestAccounting:
    def test_single_pointwise_conv_with_bias(self):
        layer = Conv2dLayer(np.random.default_rng(0), 8, 8, kernel=1, bias=True)
        assert layer.num_params() == 8 * 8 + 8

    def test_stem_tally_matches_hand_sum(self):
        spec = get_scale("n")
        c1, c2 = spec.channels()[:2]
        model = Detector(spec)
        want = (3 * c1 * 9) + 2 * c1 + (c1 * c2 * 9) + 2 * c2
        assert model.stem.num_params() == want

    def test_full_scale_n_budget(self):
        model = Detector(get_scale("n"))
        params = model.count_params()
        assert abs(params - 4.0e6) <= 0.15 * 4.0e6

    def test_conv_flop_formula(self):
        assert conv_flops(8, 8, 3, 1, (16, 16)) == 294_912

    def test_resolution_doubling_quadruples_conv_flops(self):
        assert conv_flops(8, 16, 3, 1, (32, 32)) == 4 * conv_flops(8, 16, 3, 1, (16, 16))

    def test_resolution_doubling_quadruples_model_flops(self):
        # everything scales with H*W except the tiny channel-attention 1D convs
        model = Detector(TOY)
        ratio = model.count_flops(256) / model.count_flops(128)
        assert ratio == pytest.approx(4.0, rel=1e-3)

    def test_flops_within_budget(self):
        model = Detector(get_scale("n"))
        flops = model.count_flops(640)
        assert abs(flops - 9.0e9) <= 0.2 * 9.0e9

    def test_summary_mentions_widths(self):
        model = Detector(TOY)
        text = model.summary(64)
        assert text.startswith("version 1")
        assert "stage_channels" in text and "total_params" in text


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, toy_model):
        path = tmp_path / "model.ckpt"
        toy_model.save_checkpoint(path)
        loaded = Detector.from_checkpoint(path)
        for (na, pa), (nb, pb) in zip(toy_model.named_parameters(), loaded.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data), na
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
        _, maps_a = toy_model(x)
        _, maps_b = loaded.eval()(x)
        assert np.array_equal(maps_a[0][0].data, maps_b[0][0].data)

    def test_shape_mismatch_detected(self, tmp_path, toy_model):
        path = tmp_path / "model.ckpt"
        toy_model.save_checkpoint(path)
        other = Detector(get_scale("n", width_override=0.25))
        with pytest.raises((ShapeError, KeyError)):
            other.load_state(__import__("ssmdet.tensorio", fromlist=["load_checkpoint"])
                             .load_checkpoint(path)[1])
