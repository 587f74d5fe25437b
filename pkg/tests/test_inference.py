import json

import numpy as np
import pytest
import torch

from locprop.geometry import build_anchor_grid
from locprop.inference import (
    InferenceSettings,
    Proposal,
    detect,
    export_heatmap,
    fuse_scores,
    generate_proposals,
    load_proposals_json,
    proposals_to_records,
    write_proposals_json,
)
from locprop.masks import decode_rle
from locprop.model import TABLE3_CONFIGS, TABLE4_CONFIGS, HeadConfig, ModelConfig, ProposalNetwork


class TestFuseScores:
    def test_two_cue_worked_example(self):
        assert fuse_scores(0.64, 0.25) == pytest.approx(0.4)

    def test_identity(self):
        assert fuse_scores(1.0, 1.0, 1.0) == pytest.approx(1.0)

    def test_three_cue_worked_example(self):
        assert fuse_scores(0.9, 0.8, 0.7) == pytest.approx(0.79581, abs=1e-4)
        assert fuse_scores(0.9, 0.8, 0.7) == pytest.approx(0.504 ** (1 / 3), abs=1e-12)

    def test_single_cue_passthrough(self):
        assert fuse_scores(0.37) == pytest.approx(0.37)

    def test_extra_classifier_joins_the_mean(self):
        assert fuse_scores(0.9, 0.4, extra=(0.6,)) == pytest.approx((0.9 * 0.4 * 0.6) ** (1 / 3))

    def test_negative_input_rejected(self):
        with pytest.raises(ValueError):
            fuse_scores(-0.1, 0.5)

    def test_monotone_and_bounded_by_cues(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c, b, m = rng.uniform(0.01, 1, 3)
            s = fuse_scores(c, b, m)
            assert min(c, b, m) - 1e-12 <= s <= max(c, b, m) + 1e-12
            assert fuse_scores(min(c + 0.05, 1.0), b, m) >= s

    def test_rank_invariance_under_common_power(self):
        rng = np.random.default_rng(1)
        cues = rng.uniform(0.05, 1, (30, 3))
        base = [fuse_scores(*row) for row in cues]
        powered = [fuse_scores(*(row**2.7)) for row in cues]
        assert np.array_equal(np.argsort(base), np.argsort(powered))


def tiny_model(head=None):
    torch.manual_seed(0)
    return ProposalNetwork(ModelConfig(head=head or TABLE3_CONFIGS["i"]))


class TestGenerateProposals:
    def test_count_capped_and_sorted(self):
        model = tiny_model()
        model.eval()
        with torch.no_grad():
            out = model.rpn_forward(model.feature_pyramid(torch.randn(1, 3, 64, 64)))
        grid = model.anchor_grid((64, 64))
        settings = InferenceSettings(proposal_top_n=7)
        boxes, scores, cues = generate_proposals(out, grid, (64, 64), settings, model.head_config)
        assert boxes.shape[0] <= 7
        assert np.all(np.diff(scores) <= 1e-12)
        assert set(cues) == {"centerness"}
        assert boxes[:, 0].min() >= 0 and boxes[:, 2].max() <= 64

    def test_all_zero_quality_still_deterministic(self):
        model = tiny_model()
        model.eval()
        with torch.no_grad():
            out = model.rpn_forward(model.feature_pyramid(torch.zeros(1, 3, 64, 64)))
        out.quality = torch.zeros_like(out.quality)
        grid = model.anchor_grid((64, 64))
        settings = InferenceSettings(proposal_top_n=10)
        first = generate_proposals(out, grid, (64, 64), settings, model.head_config)
        second = generate_proposals(out, grid, (64, 64), settings, model.head_config)
        assert np.array_equal(first[0], second[0])
        assert first[0].shape[0] > 0


class TestDetect:
    def test_bit_reproducible(self):
        model = tiny_model()
        rng = np.random.default_rng(5)
        image = rng.integers(0, 255, (64, 64, 3), dtype=np.uint8)
        a = detect(model, image)
        b = detect(model, image)
        assert len(a) == len(b)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.box, pb.box)
            assert pa.s == pb.s

    def test_detection_mode_caps_at_100(self):
        settings = InferenceSettings().detection_mode()
        assert settings.final_nms == 0.5
        assert settings.final_top_k == 100

    def test_proposal_mode_uses_nms_07(self):
        assert InferenceSettings().final_nms == 0.7

    def test_empty_texture_image_still_k_capped(self):
        model = tiny_model()
        image = np.full((64, 64, 3), 80, dtype=np.uint8)
        settings = InferenceSettings(final_top_k=5)
        proposals = detect(model, image, settings)
        assert len(proposals) <= 5
        assert all(p.s == pytest.approx(np.sqrt(p.c * p.b), abs=1e-9) for p in proposals)

    def test_image_below_minimum_stride_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            detect(model, np.zeros((8, 8, 3), dtype=np.uint8))

    def test_single_stage_has_no_b_score(self):
        model = tiny_model(TABLE3_CONFIGS["c"])
        image = np.random.default_rng(0).integers(0, 255, (64, 64, 3), dtype=np.uint8)
        proposals = detect(model, image)
        assert all(p.b is None and p.s == p.c for p in proposals)

    def test_classifier_ablation_extra_scores_join_fusion(self):
        model = tiny_model(TABLE4_CONFIGS["center_plus_class_iou_plus_class"])
        image = np.random.default_rng(1).integers(0, 255, (64, 64, 3), dtype=np.uint8)
        proposals = detect(model, image)
        assert proposals
        p = proposals[0]
        assert len(p.extra) == 2
        want = (p.c * p.b * p.extra[0] * p.extra[1]) ** 0.25
        assert p.s == pytest.approx(want, abs=1e-9)

    def test_first_stage_score_excluded_when_configured(self):
        model = tiny_model(TABLE3_CONFIGS["d"])
        image = np.random.default_rng(2).integers(0, 255, (64, 64, 3), dtype=np.uint8)
        proposals = detect(model, image)
        assert proposals
        p = proposals[0]
        assert p.s == pytest.approx(p.b, abs=1e-12)

    def test_mask_model_emits_masks_and_three_cue_score(self):
        model = tiny_model(HeadConfig(mask_head=True, mask_iou=True))
        image = np.random.default_rng(3).integers(0, 255, (64, 64, 3), dtype=np.uint8)
        proposals = detect(model, image)
        assert proposals
        p = proposals[0]
        assert p.mask is not None and p.mask.shape == (28, 28)
        assert p.m is not None
        assert p.s == pytest.approx((p.c * p.b * p.m) ** (1 / 3), abs=1e-9)


class TestProposalIO:
    def test_json_round_trip_preserves_scores_exactly(self, tmp_path):
        proposals = [
            Proposal(box=np.array([1.0, 2.0, 11.0, 22.0]), c=0.5, b=0.25, s=0.3535533905932738),
            Proposal(box=np.array([4.0, 4.0, 8.0, 9.0]), c=0.9, s=0.9),
        ]
        records = proposals_to_records(3, proposals)
        path = tmp_path / "proposals.json"
        write_proposals_json(path, records)
        loaded = load_proposals_json(path)
        assert set(loaded) == {3}
        assert np.array_equal(loaded[3]["boxes"][0], [1.0, 2.0, 11.0, 22.0])
        assert loaded[3]["scores"][0] == 0.3535533905932738

    def test_records_carry_rle_masks(self, tmp_path):
        mask = np.zeros((28, 28), dtype=bool)
        mask[5:20, 5:20] = True
        p = Proposal(box=np.array([10.0, 10.0, 38.0, 38.0]), c=0.5, s=0.5, mask=mask)
        records = proposals_to_records(1, [p], image_size=(64, 64), with_masks=True)
        rle = records[0]["segmentation"]
        decoded = decode_rle(rle)
        assert decoded.shape == (64, 64)
        assert decoded.sum() > 0


class TestHeatmap:
    def test_constant_map_gives_constant_image_and_exact_round_trip(self, tmp_path):
        model = tiny_model(TABLE3_CONFIGS["c"])
        model.eval()
        with torch.no_grad():
            out = model.rpn_forward(model.feature_pyramid(torch.zeros(1, 3, 64, 64)))
        out.quality = torch.full_like(out.quality, 0.5)
        results = export_heatmap(out, model.head_config, (64, 64), tmp_path / "map")
        png_path, npz_path = results["centerness"]
        from PIL import Image

        array = np.asarray(Image.open(png_path))
        assert (array == array[0, 0]).all()
        stored = np.load(npz_path)
        flat = out.quality[0].clamp(0, 1).numpy()
        offset = 0
        for i, (h, w) in enumerate(out.level_shapes):
            level = flat[offset:offset + h * w].reshape(h, w).astype(np.float32)
            assert np.array_equal(stored[f"level{i}"], level)
            offset += h * w

    def test_one_file_pair_per_cue(self, tmp_path):
        model = tiny_model(TABLE4_CONFIGS["center_plus_class"])
        model.eval()
        with torch.no_grad():
            out = model.rpn_forward(model.feature_pyramid(torch.zeros(1, 3, 64, 64)))
        results = export_heatmap(out, model.head_config, (64, 64), tmp_path / "map")
        assert set(results) == {"centerness", "class"}
        for png_path, npz_path in results.values():
            assert png_path.exists() and npz_path.exists()
