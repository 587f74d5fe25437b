import numpy as np
import pytest
import torch

from locprop.model import (
    TABLE3_CONFIGS,
    TABLE4_CONFIGS,
    CheckpointError,
    ConfigError,
    HeadConfig,
    ModelConfig,
    ProposalNetwork,
    load_checkpoint,
    pool_regions,
    save_checkpoint,
)


def make_model(head=None, **kwargs):
    head = head or TABLE3_CONFIGS["i"]
    return ProposalNetwork(ModelConfig(head=head, **kwargs))


class TestHeadConfig:
    def test_rejects_unknown_cues(self):
        with pytest.raises(ConfigError):
            HeadConfig(stage1_cue="dice")
        with pytest.raises(ConfigError):
            HeadConfig(stage2_cue="banana")

    def test_mask_iou_requires_mask_head(self):
        with pytest.raises(ConfigError):
            HeadConfig(mask_iou=True, mask_head=False)

    def test_single_stage_cannot_take_stage2_extras(self):
        with pytest.raises(ConfigError):
            HeadConfig(stage2_cue="none", stage2_extra_class=True)

    def test_every_preset_row_builds_a_model(self):
        for name, head in {**TABLE3_CONFIGS, **TABLE4_CONFIGS}.items():
            model = make_model(head)
            assert model.head_config == head, name

    def test_pure_quality_rows_have_no_classifier_parameters(self):
        for row in ("c", "i"):
            model = make_model(TABLE3_CONFIGS[row])
            assert model.classification_parameters() == []

    def test_classifier_rows_do_have_classifier_parameters(self):
        for row in ("a", "e"):
            model = make_model(TABLE3_CONFIGS[row])
            assert len(model.classification_parameters()) > 0


class TestForward:
    def test_location_count_64x64_two_strides(self):
        model = make_model()
        pyramid = model.feature_pyramid(torch.zeros(1, 3, 64, 64))
        out = model.rpn_forward(pyramid)
        assert out.reg.shape == (1, 80, 4)
        assert out.quality.shape == (1, 80)

    def test_untrained_zero_input_is_finite_and_clampable(self):
        model = make_model()
        model.eval()
        with torch.no_grad():
            out = model.rpn_forward(model.feature_pyramid(torch.zeros(1, 3, 64, 64)))
        assert torch.isfinite(out.reg).all()
        clamped = out.quality.clamp(0, 1)
        assert ((clamped >= 0) & (clamped <= 1)).all()

    def test_batching_matches_per_image_forward(self):
        model = make_model()
        model.eval()
        torch.manual_seed(0)
        a, b = torch.randn(2, 3, 64, 64).unbind(0)
        with torch.no_grad():
            batched = model.rpn_forward(model.feature_pyramid(torch.stack([a, b])))
            single_a = model.rpn_forward(model.feature_pyramid(a[None]))
            single_b = model.rpn_forward(model.feature_pyramid(b[None]))
        assert torch.allclose(batched.reg[0], single_a.reg[0], atol=1e-6)
        assert torch.allclose(batched.reg[1], single_b.reg[0], atol=1e-6)
        assert torch.allclose(batched.quality[1], single_b.quality[0], atol=1e-6)

    def test_eval_forward_deterministic(self):
        model = make_model()
        model.eval()
        x = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            first = model.rpn_forward(model.feature_pyramid(x))
            second = model.rpn_forward(model.feature_pyramid(x))
        assert torch.equal(first.reg, second.reg)
        assert torch.equal(first.quality, second.quality)


class TestRoIHead:
    def test_empty_proposals_empty_outputs(self):
        model = make_model()
        pyramid = model.feature_pyramid(torch.zeros(1, 3, 64, 64))
        out = model.roi_forward(pyramid, [torch.zeros(0, 4)])
        assert out.deltas.shape == (0, 4)
        assert out.quality.shape == (0,)

    def test_hundred_proposals_hundred_outputs(self):
        model = make_model()
        pyramid = model.feature_pyramid(torch.zeros(1, 3, 64, 64))
        boxes = torch.rand(100, 4) * 20
        boxes = torch.cat([boxes[:, :2], boxes[:, :2] + 8 + boxes[:, 2:]], dim=1)
        out = model.roi_forward(pyramid, [boxes])
        assert out.deltas.shape == (100, 4)
        assert out.quality.shape == (100,)

    def test_single_stage_model_has_no_roi_head(self):
        model = make_model(TABLE3_CONFIGS["c"])
        pyramid = model.feature_pyramid(torch.zeros(1, 3, 64, 64))
        with pytest.raises(ConfigError):
            model.roi_forward(pyramid, [torch.zeros(0, 4)])

    def test_pooling_matches_bilinear_crop_oracle(self):
        # single-level pyramid so level assignment is trivial
        torch.manual_seed(3)
        feat = torch.randn(1, 5, 16, 16)
        stride = 8
        from locprop.model import FeaturePyramid

        pyramid = FeaturePyramid([feat], (stride,))
        box = torch.tensor([[12.0, 20.0, 76.0, 60.0]])
        out = pool_regions(pyramid, [box], output_size=4, anchor_scale=3.0)

        def bilinear(fmap, y, x):
            h, w = fmap.shape[-2:]
            y = min(max(y, 0.0), h - 1.0)
            x = min(max(x, 0.0), w - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            wy, wx = y - y0, x - x0
            return (
                fmap[:, y0, x0] * (1 - wy) * (1 - wx)
                + fmap[:, y0, x1] * (1 - wy) * wx
                + fmap[:, y1, x0] * wy * (1 - wx)
                + fmap[:, y1, x1] * wy * wx
            )

        x1, y1, x2, y2 = [v / stride for v in box[0].tolist()]
        bw, bh = (x2 - x1) / 4, (y2 - y1) / 4
        for i in range(4):
            for j in range(4):
                # sampling_ratio=1 and aligned=True: one sample at the bin
                # center, shifted by half a pixel
                sy = y1 + (i + 0.5) * bh - 0.5
                sx = x1 + (j + 0.5) * bw - 0.5
                want = bilinear(feat[0], sy, sx)
                got = out[0, :, i, j]
                assert torch.allclose(got, want, atol=1e-5), (i, j)


class TestMaskHead:
    def test_output_resolution_and_iou_range(self):
        model = make_model(HeadConfig(mask_head=True, mask_iou=True))
        with torch.no_grad():
            pyramid = model.feature_pyramid(torch.zeros(1, 3, 64, 64))
            logits, iou_pred = model.mask_forward(
                pyramid, [torch.tensor([[4.0, 4.0, 40.0, 40.0]])]
            )
        assert logits.shape == (1, 28, 28)
        assert iou_pred.shape == (1,)
        clamped = iou_pred.clamp(0, 1)
        assert 0.0 <= float(clamped) <= 1.0

    def test_disabled_mask_head_raises(self):
        model = make_model()
        pyramid = model.feature_pyramid(torch.zeros(1, 3, 64, 64))
        with pytest.raises(ConfigError):
            model.mask_forward(pyramid, [torch.zeros(0, 4)])

    def test_mask_iou_loss_does_not_touch_mask_output_layers(self):
        model = make_model(HeadConfig(mask_head=True, mask_iou=True))
        pyramid = model.feature_pyramid(torch.randn(1, 3, 64, 64))
        logits, iou_pred = model.mask_forward(pyramid, [torch.tensor([[4.0, 4.0, 40.0, 40.0]])])
        iou_pred.sum().backward()
        head = model.mask_head
        for name, p in head.named_parameters():
            grad_zero = p.grad is None or torch.all(p.grad == 0)
            if name.startswith(("upsample", "predictor")):
                assert grad_zero, f"{name} received gradient from the quality loss"
            elif name.startswith(("convs", "iou_")):
                assert not grad_zero, f"{name} expected gradient"


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = make_model()
        path = tmp_path / "model.pt"
        save_checkpoint(path, model, metadata={"steps": 7})
        loaded, meta = load_checkpoint(path)
        assert meta["steps"] == 7
        assert loaded.config == model.config
        for (na, pa), (nb, pb) in zip(
            model.named_parameters(), loaded.named_parameters()
        ):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_mismatched_head_config_is_hard_error(self, tmp_path):
        model = make_model(TABLE3_CONFIGS["i"])
        path = tmp_path / "model.pt"
        save_checkpoint(path, model)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_head=TABLE3_CONFIGS["e"])

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.save({"something": 1}, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
