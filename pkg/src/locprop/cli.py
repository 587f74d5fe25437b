"""Command-line interface.

Subcommands: gen-data, train, propose, detect, eval, ablate, heatmap.
Commands communicate only through files (datasets, checkpoints, proposal
JSON, report JSON), so pipelines are scriptable and restartable. The
LOCPROP_OUT environment variable overrides any --out argument's parent.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import (
    ConfigFileError,
    ExperimentConfig,
    ablation_matrix,
    load_config,
    with_head,
)
from .data import AnnotationError, generate_dataset, load_annotations
from .evaluation import EvalReport, ImageEval, evaluate
from .inference import (
    InferenceSettings,
    detect,
    export_heatmap,
    load_proposals_json,
    proposals_to_records,
    write_proposals_json,
    _prepare_image,
)
from .model import CheckpointError, ConfigError, load_checkpoint
from .train import seed_everything, train


def _resolve_out(path_str: str) -> Path:
    override = os.environ.get("LOCPROP_OUT")
    path = Path(path_str)
    if override:
        return Path(override) / path.name
    return path


def image_evals_from_files(proposals_path, annotations_path) -> list[ImageEval]:
    """Join a proposal results file with its annotation file per image."""
    gts = load_annotations(annotations_path)
    proposals = load_proposals_json(proposals_path)
    evals = []
    for image in gts.images:
        entry = proposals.get(
            image.image_id,
            {"boxes": np.zeros((0, 4)), "scores": np.zeros(0), "segmentations": []},
        )
        evals.append(
            ImageEval(
                image_id=image.image_id,
                proposal_boxes=entry["boxes"],
                proposal_scores=entry["scores"],
                gt_boxes=image.boxes,
                gt_seen=image.seen,
                proposal_masks=entry.get("segmentations"),
                gt_masks=image.masks,
            )
        )
    return evals


def _run_inference(checkpoint_path, annotations_path, out_path,
                   settings: InferenceSettings, with_masks: bool) -> None:
    model, _ = load_checkpoint(checkpoint_path)
    gts = load_annotations(annotations_path)
    records = []
    for image in gts.images:
        array = np.asarray(Image.open(gts.image_path(image)).convert("RGB"))
        proposals = detect(model, array, settings)
        records.extend(
            proposals_to_records(
                image.image_id,
                proposals,
                image_size=(image.width, image.height),
                with_masks=with_masks,
            )
        )
    write_proposals_json(out_path, records)


def cmd_gen_data(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    spec = config.scene
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = _resolve_out(args.out)
    ann_path = generate_dataset(spec, args.n_images, out)
    print(f"wrote {args.n_images} images and {ann_path}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.steps is not None:
        config = dataclasses.replace(
            config, optimizer=dataclasses.replace(config.optimizer, steps=args.steps)
        )
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    checkpoint = train(config, _resolve_out(args.out), quiet=args.quiet)
    print(f"wrote {checkpoint}")
    return 0


def cmd_propose(args) -> int:
    settings = InferenceSettings(
        final_nms=args.nms_threshold, final_top_k=args.top_n,
        proposal_top_n=max(args.top_n, InferenceSettings().proposal_top_n),
    )
    out = _resolve_out(args.out)
    _run_inference(args.checkpoint, args.annotations, out, settings, with_masks=False)
    print(f"wrote {out}")
    return 0


def cmd_detect(args) -> int:
    settings = InferenceSettings().detection_mode()
    if args.top_k is not None:
        settings = dataclasses.replace(settings, final_top_k=args.top_k)
    out = _resolve_out(args.out)
    _run_inference(args.checkpoint, args.annotations, out, settings,
                   with_masks=args.with_masks)
    print(f"wrote {out}")
    return 0


def _parse_ks(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def cmd_eval(args) -> int:
    evals = image_evals_from_files(args.proposals, args.annotations)
    report = evaluate(
        evals,
        ar_ks=_parse_ks(args.ks),
        iou_thresholds=tuple(float(v) for v in args.iou_thresholds.split(",")),
        exclude_seen=not args.no_exclude_seen,
        seen_iou=args.seen_iou,
        with_ap=args.protocol in ("ap", "both"),
        max_detections=args.max_detections,
    )
    if args.protocol == "ap":
        report.ar = {}
        report.auc = None
    out = _resolve_out(args.out)
    report.write_json(out)
    if args.csv:
        report.write_ar_csv(_resolve_out(args.csv))
    summary = {k: v for k, v in report.to_dict().items() if k != "per_image"}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    if args.steps is not None:
        base = dataclasses.replace(
            base, optimizer=dataclasses.replace(base.optimizer, steps=args.steps)
        )
    out_dir = _resolve_out(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix = ablation_matrix(args.preset)
    summary_rows = []
    for row, (head, sampler) in matrix.items():
        run_config = with_head(base, head, sampler)
        run_dir = out_dir / f"{args.preset}_{row}"
        checkpoint = train(run_config, run_dir, quiet=True)
        proposals_path = run_dir / "proposals.json"
        _run_inference(
            checkpoint, run_config.data.val_annotations, proposals_path,
            run_config.inference, with_masks=False,
        )
        evals = image_evals_from_files(proposals_path, run_config.data.val_annotations)
        report = evaluate(
            evals,
            ar_ks=run_config.evaluation.ar_ks,
            iou_thresholds=run_config.evaluation.iou_thresholds,
            seen_iou=run_config.evaluation.seen_iou,
            max_detections=run_config.evaluation.max_detections,
        )
        report_path = out_dir / f"{args.preset}_{row}.json"
        report.write_json(report_path)
        summary_rows.append((row, report))
        print(f"{args.preset} {row}: AR@10={report.ar.get(10):.4f} auc={report.auc}")
    with open(out_dir / f"{args.preset}_summary.csv", "w") as f:
        f.write("row,ar10,ar100,auc\n")
        for row, report in summary_rows:
            f.write(
                f"{row},{report.ar.get(10, '')},{report.ar.get(100, '')},{report.auc}\n"
            )
    return 0


def cmd_heatmap(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    array = np.asarray(Image.open(args.image).convert("RGB"))
    height, width = array.shape[:2]
    import torch

    with torch.no_grad():
        pyramid = model.feature_pyramid(_prepare_image(array)[None])
        outputs = model.rpn_forward(pyramid)
    results = export_heatmap(
        outputs, model.head_config, (width, height), _resolve_out(args.out)
    )
    for cue, (png, npz) in results.items():
        print(f"{cue}: {png} {npz}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locprop",
        description="Localization-quality object proposals: data, training, "
        "inference and cross-category evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--config", help="experiment config YAML (scene section used)")
    p.add_argument("--n-images", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=None, help="override optimizer.steps")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("propose", help="emit proposals (NMS 0.7) for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--nms-threshold", type=float, default=0.7)
    p.add_argument("--top-n", type=int, default=300)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("detect", help="detection mode: NMS 0.5, top-100 boxes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--with-masks", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score proposals against annotations")
    p.add_argument("--proposals", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--ks", default="10,20,30,50,100,300,1000")
    p.add_argument("--iou-thresholds", default="0.5")
    p.add_argument("--seen-iou", type=float, default=0.5)
    p.add_argument("--no-exclude-seen", action="store_true",
                   help="count seen-class matches against the budget")
    p.add_argument("--protocol", choices=("ar", "ap", "both"), default="both")
    p.add_argument("--max-detections", type=int, default=100)
    p.add_argument("--csv", default=None, help="also write the AR curve as CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train+evaluate a named preset matrix")
    p.add_argument("--preset", required=True, choices=("table3", "table4", "table5"))
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", help="export stage-1 score maps as PNG + arrays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_heatmap)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        AnnotationError,
        CheckpointError,
        ConfigError,
        ConfigFileError,
        FileNotFoundError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
