"""Networks for localization-quality object proposals.

The model is a two-stage proposer. Stage 1 predicts side-distance box
regression plus a scalar localization-quality score at every feature
location; stage 2 refines pooled regions with box deltas plus a second
quality score. Classifier branches exist only for the ablation
configurations that study them; the default configurations carry no
classification parameters at all.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_align

from .geometry import AnchorGrid, build_anchor_grid
from .targets import STAGE1_CUES, STAGE2_CUES

CHECKPOINT_FORMAT = "locprop-checkpoint-v1"

# Standard deviations used to normalize box-delta regression targets, as in
# conventional two-stage detectors (dx, dy, dw, dh).
BOX_DELTA_STD = (0.1, 0.1, 0.2, 0.2)


class ConfigError(ValueError):
    """Invalid model or head configuration."""


@dataclass(frozen=True)
class HeadConfig:
    """Declarative choice of objectness cue per stage.

    ``stage1_cue`` is one of class/centerness/iou; ``stage2_cue`` adds
    none (single-stage) and dice. The ``*_extra_class`` flags bolt a binary
    classifier on top of a quality cue. ``fuse_stage1`` controls whether
    the first-stage score joins the final geometric-mean fusion (scoring
    proposals for stage 2 always uses it).
    """

    stage1_cue: str = "centerness"
    stage1_extra_class: bool = False
    stage2_cue: str = "iou"
    stage2_extra_class: bool = False
    mask_head: bool = False
    mask_iou: bool = False
    fuse_stage1: bool = True

    def __post_init__(self):
        if self.stage1_cue not in STAGE1_CUES:
            raise ConfigError(f"stage1_cue must be one of {STAGE1_CUES}")
        if self.stage2_cue not in STAGE2_CUES:
            raise ConfigError(f"stage2_cue must be one of {STAGE2_CUES}")
        if self.stage2_cue == "none" and self.stage2_extra_class:
            raise ConfigError("stage2_extra_class requires a second stage")
        if self.mask_iou and not self.mask_head:
            raise ConfigError("mask_iou requires mask_head")
        if self.mask_head and self.stage2_cue == "none":
            raise ConfigError("mask_head requires a second stage")

    @property
    def two_stage(self) -> bool:
        return self.stage2_cue != "none"

    @property
    def stage1_has_quality(self) -> bool:
        return self.stage1_cue in ("centerness", "iou")

    @property
    def stage1_has_class(self) -> bool:
        return self.stage1_cue == "class" or self.stage1_extra_class

    @property
    def stage2_has_quality(self) -> bool:
        return self.stage2_cue in ("centerness", "iou", "dice")

    @property
    def stage2_has_class(self) -> bool:
        return self.stage2_cue == "class" or self.stage2_extra_class

    def uses_classifier(self) -> bool:
        return self.stage1_has_class or self.stage2_has_class


# Single-stage vs two-stage cue matrix (ablation rows a-j).
TABLE3_CONFIGS: dict[str, HeadConfig] = {
    "a": HeadConfig("class", stage2_cue="none"),
    "b": HeadConfig("iou", stage2_cue="none"),
    "c": HeadConfig("centerness", stage2_cue="none"),
    "d": HeadConfig("class", stage2_cue="class", fuse_stage1=False),
    "e": HeadConfig("class", stage2_cue="class"),
    "f": HeadConfig("iou", stage2_cue="centerness"),
    "g": HeadConfig("iou", stage2_cue="iou"),
    "h": HeadConfig("centerness", stage2_cue="centerness"),
    "i": HeadConfig("centerness", stage2_cue="iou"),
    "j": HeadConfig("centerness", stage2_cue="dice"),
}

# Classifier add-on ablation rows.
TABLE4_CONFIGS: dict[str, HeadConfig] = {
    "center": TABLE3_CONFIGS["c"],
    "center_plus_class": replace(TABLE3_CONFIGS["c"], stage1_extra_class=True),
    "center_iou": TABLE3_CONFIGS["i"],
    "center_iou_plus_class": replace(TABLE3_CONFIGS["i"], stage2_extra_class=True),
    "center_plus_class_iou": replace(TABLE3_CONFIGS["i"], stage1_extra_class=True),
    "center_plus_class_iou_plus_class": replace(
        TABLE3_CONFIGS["i"], stage1_extra_class=True, stage2_extra_class=True
    ),
    "center_class": HeadConfig("centerness", stage2_cue="class"),
    "class_class": TABLE3_CONFIGS["e"],
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults are desk scale, widths divisible by 8."""

    head: HeadConfig = field(default_factory=HeadConfig)
    in_channels: int = 3
    backbone_width: int = 16
    fpn_channels: int = 32
    strides: tuple[int, ...] = (8, 16)
    anchor_scale: float = 3.0
    roi_size: int = 7
    fc_dim: int = 256
    mask_roi_size: int = 14
    mask_conv_dim: int = 32

    def __post_init__(self):
        if list(self.strides) != sorted(set(self.strides)):
            raise ConfigError("strides must be strictly increasing")
        for name in ("backbone_width", "fpn_channels", "mask_conv_dim"):
            if getattr(self, name) % 8 != 0:
                raise ConfigError(f"{name} must be divisible by 8")


@dataclass
class FeaturePyramid:
    features: list[torch.Tensor]  # per level, (B, C, H, W)
    strides: tuple[int, ...]

    def __post_init__(self):
        if len(self.features) != len(self.strides):
            raise ConfigError("one stride per pyramid level required")


@dataclass
class Stage1Outputs:
    """Per-location predictions, flattened in anchor-grid order.

    ``reg`` holds side distances in units of the level stride. ``quality``
    is an unbounded score (clamped to [0, 1] only at inference);
    ``class_logits`` are raw logits. Both are None when the head lacks
    that branch.
    """

    reg: torch.Tensor  # (B, N, 4)
    quality: torch.Tensor | None  # (B, N)
    class_logits: torch.Tensor | None  # (B, N)
    level_shapes: tuple[tuple[int, int], ...]
    strides: tuple[int, ...]


@dataclass
class RoIOutputs:
    deltas: torch.Tensor  # (R, 4)
    quality: torch.Tensor | None  # (R,)
    class_logits: torch.Tensor | None  # (R,)


def _conv_gn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class ConvBackbone(nn.Module):
    """Four strided conv stages feeding a small top-down pyramid.

    Emits one feature map per configured stride (8 and/or 16 by default).
    Any module with ``forward(images) -> list[Tensor]`` plus ``strides``
    and ``out_channels`` attributes can stand in for full-scale runs.
    """

    def __init__(self, in_channels: int, width: int, fpn_channels: int,
                 strides: tuple[int, ...]):
        super().__init__()
        supported = {4: 1, 8: 2, 16: 3}
        for s in strides:
            if s not in supported:
                raise ConfigError(f"backbone supports strides {sorted(supported)}, got {s}")
        self.strides = tuple(strides)
        self.out_channels = fpn_channels
        widths = [width, width * 2, width * 4, width * 8]
        self.stem = nn.Sequential(
            _conv_gn_relu(in_channels, widths[0], stride=2),
            _conv_gn_relu(widths[0], widths[0]),
        )
        self.stages = nn.ModuleList(
            nn.Sequential(
                _conv_gn_relu(widths[i], widths[i + 1], stride=2),
                _conv_gn_relu(widths[i + 1], widths[i + 1]),
            )
            for i in range(3)
        )
        self._tap = [supported[s] for s in strides]
        self.lateral = nn.ModuleList(
            nn.Conv2d(widths[i], fpn_channels, 1) for i in self._tap
        )
        self.smooth = nn.ModuleList(
            nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1) for _ in strides
        )

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(images)
        stage_outputs = [x]
        for stage in self.stages:
            x = stage(x)
            stage_outputs.append(x)
        laterals = [
            lat(stage_outputs[i]) for lat, i in zip(self.lateral, self._tap)
        ]
        # top-down pathway, coarsest to finest
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(
                laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest"
            )
        return [smooth(lat) for smooth, lat in zip(self.smooth, laterals)]


class ProposalHead(nn.Module):
    """Shared 3x3 conv plus per-cue 1x1 predictors over every level.

    The regression bias starts at half the anchor scale so the untrained
    head decodes anchor-sized boxes rather than degenerate points.
    """

    def __init__(self, in_channels: int, head: HeadConfig, reg_bias_init: float = 1.5):
        super().__init__()
        self.head_config = head
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.reg_branch = nn.Conv2d(in_channels, 4, 1)
        self.quality_branch = (
            nn.Conv2d(in_channels, 1, 1) if head.stage1_has_quality else None
        )
        self.class_branch = (
            nn.Conv2d(in_channels, 1, 1) if head.stage1_has_class else None
        )
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.reg_branch.bias, reg_bias_init)

    def forward(self, pyramid: FeaturePyramid) -> Stage1Outputs:
        reg_maps, quality_maps, class_maps, shapes = [], [], [], []
        for feat in pyramid.features:
            x = F.relu(self.conv(feat))
            b, _, h, w = x.shape
            shapes.append((h, w))
            reg_maps.append(self.reg_branch(x).reshape(b, 4, h * w).permute(0, 2, 1))
            if self.quality_branch is not None:
                quality_maps.append(self.quality_branch(x).reshape(b, h * w))
            if self.class_branch is not None:
                class_maps.append(self.class_branch(x).reshape(b, h * w))
        return Stage1Outputs(
            reg=torch.cat(reg_maps, dim=1),
            quality=torch.cat(quality_maps, dim=1) if quality_maps else None,
            class_logits=torch.cat(class_maps, dim=1) if class_maps else None,
            level_shapes=tuple(shapes),
            strides=pyramid.strides,
        )


def assign_levels(boxes: torch.Tensor, strides: tuple[int, ...], anchor_scale: float) -> torch.Tensor:
    """Pick the pyramid level whose anchor size best matches each box."""
    area = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6) * (
        boxes[:, 3] - boxes[:, 1]
    ).clamp(min=1e-6)
    size = torch.sqrt(area)
    scales = torch.tensor(
        [anchor_scale * s for s in strides], dtype=boxes.dtype, device=boxes.device
    )
    dist = (torch.log2(size[:, None]) - torch.log2(scales[None, :])).abs()
    return dist.argmin(dim=1)


def pool_regions(
    pyramid: FeaturePyramid,
    boxes_per_image: list[torch.Tensor],
    output_size: int,
    anchor_scale: float,
) -> torch.Tensor:
    """RoIAlign region features, each box pooled from its assigned level.

    Returns (R, C, output_size, output_size) in the flattened order of the
    input lists (image-major).
    """
    device = pyramid.features[0].device
    dtype = pyramid.features[0].dtype
    rois = []
    for img_idx, boxes in enumerate(boxes_per_image):
        boxes = boxes.to(device=device, dtype=dtype).reshape(-1, 4)
        batch_col = torch.full((boxes.shape[0], 1), float(img_idx), dtype=dtype, device=device)
        rois.append(torch.cat([batch_col, boxes], dim=1))
    rois = (
        torch.cat(rois, dim=0)
        if rois
        else torch.zeros((0, 5), dtype=dtype, device=device)
    )
    n = rois.shape[0]
    channels = pyramid.features[0].shape[1]
    out = torch.zeros((n, channels, output_size, output_size), dtype=dtype, device=device)
    if n == 0:
        return out
    levels = assign_levels(rois[:, 1:], pyramid.strides, anchor_scale)
    for lvl, (feat, stride) in enumerate(zip(pyramid.features, pyramid.strides)):
        pick = torch.nonzero(levels == lvl, as_tuple=True)[0]
        if pick.numel() == 0:
            continue
        pooled = roi_align(
            feat,
            rois[pick],
            output_size=(output_size, output_size),
            spatial_scale=1.0 / stride,
            sampling_ratio=1,
            aligned=True,
        )
        out[pick] = pooled
    return out


class RegionHead(nn.Module):
    """Two shared FC layers then separate box-delta and score predictors."""

    def __init__(self, in_channels: int, head: HeadConfig, roi_size: int, fc_dim: int):
        super().__init__()
        self.head_config = head
        self.fc1 = nn.Linear(in_channels * roi_size * roi_size, fc_dim)
        self.fc2 = nn.Linear(fc_dim, fc_dim)
        self.reg_branch = nn.Linear(fc_dim, 4)
        self.quality_branch = nn.Linear(fc_dim, 1) if head.stage2_has_quality else None
        self.class_branch = nn.Linear(fc_dim, 1) if head.stage2_has_class else None
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)

    def forward(self, region_features: torch.Tensor) -> RoIOutputs:
        x = region_features.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return RoIOutputs(
            deltas=self.reg_branch(x),
            quality=self.quality_branch(x).squeeze(-1) if self.quality_branch else None,
            class_logits=self.class_branch(x).squeeze(-1) if self.class_branch else None,
        )


class MaskHead(nn.Module):
    """Class-agnostic FCN mask head with a quality branch off its 4th layer.

    The quality branch (3x3 conv, max-pool, three FC layers) predicts the
    pixel IoU of the final mask against ground truth. It taps the fourth
    conv layer's features only, so its loss cannot reach the upsampling or
    mask-logit layers.
    """

    def __init__(self, in_channels: int, conv_dim: int, roi_size: int, with_iou: bool):
        super().__init__()
        self.output_size = roi_size * 2
        convs = []
        cin = in_channels
        for _ in range(4):
            convs.append(nn.Conv2d(cin, conv_dim, 3, padding=1))
            cin = conv_dim
        self.convs = nn.ModuleList(convs)
        self.upsample = nn.ConvTranspose2d(conv_dim, conv_dim, 2, stride=2)
        self.predictor = nn.Conv2d(conv_dim, 1, 1)
        self.iou_conv = nn.Conv2d(conv_dim, conv_dim, 3, padding=1) if with_iou else None
        if with_iou:
            pooled = roi_size // 2
            self.iou_fc = nn.Sequential(
                nn.Linear(conv_dim * pooled * pooled, 128),
                nn.ReLU(inplace=True),
                nn.Linear(128, 128),
                nn.ReLU(inplace=True),
                nn.Linear(128, 1),
            )
        else:
            self.iou_fc = None
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)

    def forward(self, region_features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        x = region_features
        for conv in self.convs:
            x = F.relu(conv(x))
        mask_logits = self.predictor(F.relu(self.upsample(x))).squeeze(1)
        mask_iou = None
        if self.iou_conv is not None:
            y = F.relu(self.iou_conv(x))
            y = F.max_pool2d(y, 2)
            mask_iou = self.iou_fc(y.flatten(1)).squeeze(-1)
        return mask_logits, mask_iou


class ProposalNetwork(nn.Module):
    """Backbone + proposal stage + optional region and mask stages."""

    def __init__(self, config: ModelConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.config = config
        self.head_config = config.head
        self.backbone = backbone or ConvBackbone(
            config.in_channels, config.backbone_width, config.fpn_channels, config.strides
        )
        self.proposal_head = ProposalHead(
            self.backbone.out_channels, config.head, reg_bias_init=config.anchor_scale / 2.0
        )
        self.region_head = (
            RegionHead(self.backbone.out_channels, config.head, config.roi_size, config.fc_dim)
            if config.head.two_stage
            else None
        )
        self.mask_head = (
            MaskHead(
                self.backbone.out_channels,
                config.mask_conv_dim,
                config.mask_roi_size,
                with_iou=config.head.mask_iou,
            )
            if config.head.mask_head
            else None
        )

    def feature_pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        return FeaturePyramid(self.backbone(images), tuple(self.backbone.strides))

    def rpn_forward(self, pyramid: FeaturePyramid) -> Stage1Outputs:
        return self.proposal_head(pyramid)

    def roi_forward(
        self, pyramid: FeaturePyramid, boxes_per_image: list[torch.Tensor]
    ) -> RoIOutputs:
        if self.region_head is None:
            raise ConfigError("model was built single-stage; no region head")
        feats = pool_regions(
            pyramid, boxes_per_image, self.config.roi_size, self.config.anchor_scale
        )
        return self.region_head(feats)

    def mask_forward(
        self, pyramid: FeaturePyramid, boxes_per_image: list[torch.Tensor]
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        if self.mask_head is None:
            raise ConfigError("model was built without a mask head")
        feats = pool_regions(
            pyramid, boxes_per_image, self.config.mask_roi_size, self.config.anchor_scale
        )
        return self.mask_head(feats)

    def anchor_grid(self, image_size: tuple[int, int]) -> AnchorGrid:
        return build_anchor_grid(image_size, list(self.config.strides), self.config.anchor_scale)

    def classification_parameters(self) -> list[str]:
        """Names of all parameters belonging to classifier branches."""
        return [name for name, _ in self.named_parameters() if "class" in name]


def _config_to_dict(config: ModelConfig) -> dict:
    data = asdict(config)
    data["strides"] = list(data["strides"])
    return data


def _config_from_dict(data: dict) -> ModelConfig:
    data = dict(data)
    head = HeadConfig(**data.pop("head"))
    data["strides"] = tuple(data["strides"])
    return ModelConfig(head=head, **data)


def save_checkpoint(path, model: ProposalNetwork, metadata: dict | None = None) -> None:
    """Write a self-describing archive: config, weights and metadata."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": _config_to_dict(model.config),
        "state_dict": model.state_dict(),
        "metadata": dict(metadata or {}),
    }
    torch.save(payload, path)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(
    path, expected_head: HeadConfig | None = None
) -> tuple[ProposalNetwork, dict]:
    """Rebuild the model stored at ``path``.

    A caller that knows which head configuration it expects passes it in;
    any mismatch with the stored configuration is a hard error.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a recognized checkpoint")
    config = _config_from_dict(payload["model_config"])
    if expected_head is not None and config.head != expected_head:
        raise CheckpointError(
            f"{path}: checkpoint head configuration {config.head} does not match "
            f"the requested {expected_head}"
        )
    model = ProposalNetwork(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["metadata"]


def flat_quality_scores(outputs: Stage1Outputs, head: HeadConfig, image_idx: int) -> dict[str, np.ndarray]:
    """Inference-ready stage-1 scores for one image, keyed by cue name.

    Quality predictions are clamped to [0, 1]; classifier logits pass
    through a sigmoid.
    """
    scores: dict[str, np.ndarray] = {}
    if outputs.quality is not None:
        scores[head.stage1_cue] = (
            outputs.quality[image_idx].detach().clamp(0.0, 1.0).cpu().numpy().astype(np.float64)
        )
    if outputs.class_logits is not None:
        scores["class"] = (
            torch.sigmoid(outputs.class_logits[image_idx].detach()).cpu().numpy().astype(np.float64)
        )
    return scores
