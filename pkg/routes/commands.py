import argparse
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from models.config import PipelineConfig
from models.errors import InvalidInputError, NumericalError
from models.schemas import (
    AnchorGrid, BinaryMask, Box3, CommandResult, ContainerHeader, DistanceMap, Jaw, LabelMap,
    MeanStd, PhantomSpec, SamplingStrategy, ToothGroup, Volume,
)
from services.augment_service import crop_transform, cutout, random_affine, standardize_crop, standardize_labels
from services.detector_service import (
    assign_group, average_precision_50, boxes_by_jaw, boxes_from_labels, dilate, generate_anchors,
    mean_overlap_ratio, nms, object_include_ratios, sample_rpn_targets,
)
from services.distance_service import assemble, chamfer_dt, regression_target, restore_to_box
from services.metrics_service import per_instance_report
from services.phantom_service import generate
from services.pose_service import realign_jaws, realign_labels
from services.storage_service import StorageService
from services.tsnet_service import fit, init_tsnet, verify_layers
from services.volume_service import mip_x
from tooth_pipeline import NETWORK, ORACLE, ToothSegmentationPipeline
from utils.helpers import file_digest, mean_std, sample_rng

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace, "CommandContext"], CommandResult]


@dataclass
class CommandContext:
    config: PipelineConfig
    storage: StorageService
    seed_given: bool = False


def arg(*flags: str, **kwargs: Any) -> Tuple[Tuple[str, ...], Dict[str, Any]]:
    return flags, kwargs


class CommandRouter:
    """Subcommand registry: handlers register with a decorator and are installed on an argparse parser."""

    def __init__(self):
        self.commands: Dict[str, Tuple[str, List[Tuple[Tuple[str, ...], Dict[str, Any]]], Handler]] = {}

    def command(self, name: str, help: str, *arguments: Tuple[Tuple[str, ...], Dict[str, Any]]):
        def register(handler: Handler) -> Handler:
            self.commands[name] = (help, list(arguments), handler)
            return handler
        return register

    def install(self, subparsers, parents: List[argparse.ArgumentParser]) -> None:
        for name, (help_text, arguments, handler) in self.commands.items():
            parser = subparsers.add_parser(name, help=help_text, parents=parents)
            for flags, kwargs in arguments:
                parser.add_argument(*flags, **kwargs)
            parser.set_defaults(handler=handler, command=name)


router = CommandRouter()


def _bounds_box(grid) -> Box3:
    lo, hi = grid.world_bounds()
    half = 0.5 * np.asarray(grid.spacing)
    return Box3(min_mm=tuple(lo - half), max_mm=tuple(hi + half))


def _header_box(header: ContainerHeader) -> Box3:
    if len(header.dims) != 3:
        raise InvalidInputError("a 3D grid header is required")
    spacing = np.asarray(header.spacing_mm)
    lo = np.asarray(header.origin_mm) - 0.5 * spacing
    hi = lo + np.asarray(header.dims) * spacing
    return Box3(min_mm=tuple(lo), max_mm=tuple(hi))


def _phantom_spec(args: argparse.Namespace, ctx: CommandContext) -> PhantomSpec:
    updates: Dict[str, Any] = {}
    if ctx.seed_given:
        updates["seed"] = ctx.config.seed
    if getattr(args, "tilt", None) is not None:
        updates["tilt_deg"] = args.tilt
    if getattr(args, "teeth", None) is not None:
        updates["teeth_per_jaw"] = args.teeth
    if getattr(args, "missing", None):
        updates["missing"] = frozenset(args.missing)
    if getattr(args, "metal", None):
        updates["metal"] = frozenset(args.metal)
    return PhantomSpec(**{**ctx.config.phantom.model_dump(), **updates})


def _or_summary(boxes: List[Box3]) -> Dict[str, Any]:
    by_jaw = boxes_by_jaw(boxes)
    return {
        "mean_or": mean_overlap_ratio(boxes),
        "mean_or_by_jaw": {jaw.value: mean_overlap_ratio(b) for jaw, b in by_jaw.items()},
    }


@router.command(
    "phantom", "generate a synthetic jaw phantom",
    arg("--tilt", type=float, help="scene tilt about x in degrees"),
    arg("--teeth", type=int, help="teeth per jaw"),
    arg("--missing", type=int, nargs="*", default=[], help="FDI ids to leave out"),
    arg("--metal", type=int, nargs="*", default=[], help="FDI ids with metal crowns"),
)
def cmd_phantom(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    spec = _phantom_spec(args, ctx)
    truth = generate(spec)
    storage = ctx.storage
    files = [
        storage.write_grid("volume.json", truth.volume),
        storage.write_grid("labels.json", truth.labels),
        storage.write_boxes("boxes.json", truth.boxes),
        storage.write_poses("poses.json", truth.poses),
    ]
    digests = {}
    for header in files:
        digests[header.name] = file_digest(header)
        raw = header.with_suffix(".raw")
        if raw.is_file():
            digests[raw.name] = file_digest(raw)
    data = {"tooth_count": len(truth.boxes), "tooth_ids": truth.tooth_ids, "digests": digests, **_or_summary(truth.boxes)}
    return CommandResult(success=True, data=data, message=f"phantom with {len(truth.boxes)} teeth written")


@router.command(
    "mip", "maximum intensity projection along x",
    arg("--volume", required=True),
)
def cmd_mip(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    volume = ctx.storage.read_grid(args.volume, Volume)
    image = mip_x(volume)
    ctx.storage.write_grid("mip.json", image)
    return CommandResult(success=True, data={"dims": list(image.dims)}, message="projection written")


@router.command(
    "realign", "pose-aware VOI realignment of both jaws",
    arg("--volume", required=True),
    arg("--poses", required=True),
    arg("--labels", help="also realign this label map"),
    arg("--native", action="store_true", help="keep the source spacing instead of resizing"),
)
def cmd_realign(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    volume = ctx.storage.read_grid(args.volume, Volume)
    poses = ctx.storage.read_poses(args.poses)
    missing = [jaw.value for jaw in Jaw if jaw not in poses]
    if missing:
        raise InvalidInputError(f"poses file lacks jaw(s): {missing}")
    spec = ctx.config.voi
    if args.native:
        spec = spec.model_copy(update={"out_dims": None})
    realigned = realign_jaws(volume, poses, spec)
    labels = ctx.storage.read_grid(args.labels, LabelMap) if args.labels else None
    data = {}
    for jaw, (voi, frame) in realigned.items():
        ctx.storage.write_grid(f"voi_{jaw.value}.json", voi)
        if labels is not None:
            ctx.storage.write_grid(f"voi_labels_{jaw.value}.json", realign_labels(labels, frame))
        data[jaw.value] = {"dims": list(frame.dims), "spacing_mm": list(frame.spacing), "flipped": frame.flipped}
    ctx.storage.write_transforms("transforms.json", {jaw: frame for jaw, (_, frame) in realigned.items()})
    return CommandResult(success=True, data=data, message="both jaws realigned")


@router.command(
    "detect-post", "NMS, dilation and grouping of tooth boxes",
    arg("--boxes", required=True, help="candidate boxes (scored) or gt boxes with --sample"),
    arg("--volume", help="grid header bounding the dilation / anchor extent"),
    arg("--eval", dest="eval_boxes", help="gt boxes for OR / AP50 / OIR"),
    arg("--labels", help="gt label map for OIR"),
    arg("--metal", type=int, nargs="*", default=[]),
    arg("--sample", action="store_true", help="sample RPN targets on the anchor grid"),
    arg("--strategy", choices=[s.value for s in SamplingStrategy]),
)
def cmd_detect_post(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    storage = ctx.storage
    cfg = ctx.config
    boxes = storage.read_boxes(args.boxes)
    bounds = _header_box(storage.read_header(args.volume)) if args.volume else None

    if args.sample:
        return _sample_targets(args, ctx, boxes, bounds)

    scored = [b if b.score is not None else b.model_copy(update={"score": 1.0}) for b in boxes]
    kept = nms(scored, cfg.detection.nms_iou)
    if bounds is None and kept:
        # no volume given: dilation is unclipped
        reach = cfg.detection.margin_mm + 1.0
        bounds = Box3(
            min_mm=tuple(np.min([b.lo for b in kept], axis=0) - reach),
            max_mm=tuple(np.max([b.hi for b in kept], axis=0) + reach),
        )
    metal = set(args.metal)
    post = []
    for b in kept:
        grown = dilate(b, cfg.detection.margin_mm, bounds)
        if b.tooth_id is not None:
            is_metal = b.tooth_id in metal or b.group == ToothGroup.METAL
            grown = grown.model_copy(update={"group": assign_group(b.tooth_id, is_metal, cfg.detection.grouped)})
        post.append(grown)
    storage.write_boxes("boxes_post.json", post)
    data: Dict[str, Any] = {"input": len(boxes), "kept": len(kept)}

    if args.eval_boxes:
        gt = storage.read_boxes(args.eval_boxes)
        data["or_gt"] = mean_overlap_ratio(gt)
        data["or_detected"] = mean_overlap_ratio(post)
        data["ap50"] = average_precision_50(gt, kept)
        if args.labels:
            labels = storage.read_grid(args.labels, LabelMap)
            mean, std = mean_std(object_include_ratios(labels, gt, post))
            data["oir"] = {"mean": mean, "std": std}
        storage.write_json("detection_report.json", data)
    return CommandResult(success=True, data=data, message=f"{len(post)} boxes after post-processing")


def _sample_targets(args: argparse.Namespace, ctx: CommandContext, gt: List[Box3], bounds: Optional[Box3]) -> CommandResult:
    if bounds is None:
        if not gt:
            raise InvalidInputError("anchor sampling needs gt boxes or --volume")
        bounds = Box3(min_mm=tuple(np.min([b.lo for b in gt], axis=0)), max_mm=tuple(np.max([b.hi for b in gt], axis=0)))
    anchors_cfg = ctx.config.anchors
    anchors = generate_anchors(AnchorGrid(base_sizes_mm=anchors_cfg.base_sizes_mm, stride_mm=anchors_cfg.stride_mm, extent=bounds))
    sampler = ctx.config.sampler.model_copy(update={"seed": ctx.config.seed})
    if args.strategy:
        sampler = sampler.model_copy(update={"strategy": SamplingStrategy(args.strategy)})
    targets = sample_rpn_targets(anchors, gt, sampler)
    ctx.storage.write_json("rpn_targets.json", {
        "anchors": len(anchors),
        "strategy": sampler.strategy.value,
        **targets.model_dump(mode="json"),
    })
    data = {
        "anchors": len(anchors),
        "positives": len(targets.positives),
        "forced": int(sum(targets.forced)),
        "negatives": len(targets.negatives),
    }
    return CommandResult(success=True, data=data, message=f"sampled {len(targets.positives)} positive anchors")


@router.command(
    "distmap", "regression targets per tooth (or a raw chamfer transform of one mask)",
    arg("--labels", help="label map"),
    arg("--boxes", help="gt boxes selecting the teeth"),
    arg("--mask", help="binary mask / label map to transform directly"),
)
def cmd_distmap(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    storage = ctx.storage
    settings = ctx.config.distance
    if args.mask:
        grid = storage.read_grid(args.mask)
        mask = BinaryMask(dims=grid.dims, spacing=grid.spacing, origin=grid.origin, data=np.asarray(grid.data) > 0)
        dist = chamfer_dt(mask)
        storage.write_grid("distance.json", dist)
        return CommandResult(success=True, data={"max_vox": float(dist.data.max())}, message="distance map written")
    if not (args.labels and args.boxes):
        raise InvalidInputError("distmap needs --mask, or --labels with --boxes")
    labels = storage.read_grid(args.labels, LabelMap)
    bounds = _bounds_box(labels)
    manifest = []
    for box in storage.read_boxes(args.boxes):
        if box.tooth_id is None:
            raise InvalidInputError("distmap boxes need tooth ids")
        grown = dilate(box, ctx.config.detection.margin_mm, bounds)
        mask = standardize_labels(labels, grown, box.tooth_id, settings.crop_dims)
        target = regression_target(mask, settings.d_max_vox)
        name = f"distmap_{box.tooth_id}.json"
        storage.write_grid(name, target)
        manifest.append({"box": grown.model_dump(mode="json"), "file": name})
    storage.write_json("distmaps.json", {"d_max_vox": settings.d_max_vox, "maps": manifest})
    return CommandResult(success=True, data={"maps": len(manifest)}, message=f"{len(manifest)} distance targets written")


@router.command(
    "augment", "cutout + random affine on a crop",
    arg("--volume", required=True),
    arg("--mask", help="binary mask transformed jointly"),
    arg("--box", type=float, nargs=6, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"),
        help="standardise this box of the volume first"),
    arg("--index", type=int, default=0, help="sample index within the seeded run"),
)
def cmd_augment(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    if args.index < 0:
        raise InvalidInputError(f"--index must be >= 0, got {args.index}")
    storage = ctx.storage
    volume = storage.read_grid(args.volume, Volume)
    mask = storage.read_grid(args.mask, BinaryMask) if args.mask else None
    if args.box:
        box = Box3(min_mm=tuple(args.box[:3]), max_mm=tuple(args.box[3:]))
        volume = standardize_crop(volume, box, ctx.config.distance.crop_dims)
        if mask is not None:
            raise InvalidInputError("--mask cannot be combined with --box")
    cutout_seed, affine_seed = (int(s) for s in sample_rng(ctx.config.seed, args.index).integers(0, 2**31, size=2))
    cut, region = cutout(volume, ctx.config.cutout, cutout_seed)
    warped, warped_mask = random_affine(cut, mask, ctx.config.affine, affine_seed)
    storage.write_grid("augmented.json", warped)
    if warped_mask is not None:
        storage.write_grid("augmented_mask.json", warped_mask)
    data = {"cutout": region.model_dump() if region else None, "cutout_seed": cutout_seed, "affine_seed": affine_seed}
    return CommandResult(success=True, data=data, message="augmented sample written")


@router.command(
    "assemble", "restore per-tooth distance maps and assemble instance labels",
    arg("--manifest", required=True, help="distmaps.json"),
    arg("--canvas", required=True, help="grid whose geometry receives the labels"),
)
def cmd_assemble(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    storage = ctx.storage
    settings = ctx.config.distance
    doc = storage.read_json(args.manifest)
    canvas = storage.read_grid(args.canvas)
    base = Path(args.manifest).parent
    d_max = float(doc.get("d_max_vox", settings.d_max_vox))
    instances = []
    for entry in doc.get("maps", []):
        box = Box3(**entry["box"])
        crop_map = storage.read_grid(base / entry["file"], DistanceMap)
        xform, _ = crop_transform(box, crop_map.dims)
        restored = restore_to_box(crop_map, xform, box, canvas)
        instances.append((box, restored.like(restored.data * d_max)))
    labels = assemble(instances, canvas, settings.tau_vox)
    storage.write_grid("labels_pred.json", labels)
    count = int(len(np.unique(labels.data)) - (1 if (labels.data == 0).any() else 0))
    return CommandResult(success=True, data={"instances": count}, message=f"assembled {count} instances")


@router.command(
    "eval", "per-instance and integrated segmentation metrics",
    arg("--gt", required=True),
    arg("--pred", required=True),
    arg("--boxes", help="gt boxes carrying tooth groups; also scores AP50 / OIR"),
    arg("--pred-boxes", help="detected boxes for AP50 / OIR (default: tight boxes of --pred)"),
)
def cmd_eval(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    storage = ctx.storage
    gt = storage.read_grid(args.gt, LabelMap)
    pred = storage.read_grid(args.pred, LabelMap)
    gt_boxes = storage.read_boxes(args.boxes) if args.boxes else []
    groups = {b.tooth_id: b.group for b in gt_boxes if b.tooth_id is not None and b.group}
    frame, report = per_instance_report(gt, pred, groups)
    if args.boxes:
        detected = storage.read_boxes(args.pred_boxes) if args.pred_boxes else boxes_from_labels(pred)
        detected = [b if b.score is not None else b.model_copy(update={"score": 1.0}) for b in detected]
        mean, std = mean_std(object_include_ratios(gt, gt_boxes, detected))
        report = report.with_detection(average_precision_50(gt_boxes, detected), MeanStd(mean=mean, std=std))
    elif args.pred_boxes:
        raise InvalidInputError("--pred-boxes needs --boxes")
    frame.to_csv(storage.path("per_instance.csv"), index=False)
    storage.write_json("metrics.json", report.model_dump(mode="json"))
    return CommandResult(
        success=True, data=report.model_dump(mode="json"), message=f"AJI {report.aggregate.aji:.4f}"
    )


@router.command("gradcheck", "finite-difference verification of every network layer")
def cmd_gradcheck(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    net = ctx.config.network
    reports = verify_layers(
        widths=net.toy_widths, dims=net.toy_dims, groups=net.groups,
        n_samples=net.gradcheck_samples, tolerance=net.gradcheck_tolerance, seed=ctx.config.seed,
    )
    data = {name: {"max_rel_error": r.max_rel_error, "passed": r.passed} for name, r in reports.items()}
    ctx.storage.write_json("gradcheck.json", {name: r.model_dump() for name, r in reports.items()})
    failed = [name for name, r in reports.items() if not r.passed]
    if failed:
        raise NumericalError(f"gradient check failed for: {', '.join(failed)}")
    return CommandResult(success=True, data=data, message="all layers pass the gradient check")


@router.command(
    "traintoy", "fit a small TSNet to one phantom tooth's distance target",
    arg("--tooth", type=int, default=11),
)
def cmd_traintoy(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    net = ctx.config.network
    spec = _phantom_spec(args, ctx)
    truth = generate(spec)
    box = next((b for b in truth.boxes if b.tooth_id == args.tooth), None)
    if box is None:
        raise InvalidInputError(f"tooth {args.tooth} is not present in the phantom")
    grown = dilate(box, ctx.config.detection.margin_mm, _bounds_box(truth.volume))
    crop = standardize_crop(truth.volume, grown, net.toy_dims)
    target = regression_target(standardize_labels(truth.labels, grown, args.tooth, net.toy_dims), ctx.config.distance.d_max_vox)

    inputs = crop.data[None, None].astype(np.float64)
    targets = target.data[None, None].astype(np.float64)
    params = init_tsnet(net.toy_widths, net.groups, ctx.config.seed)
    params, losses = fit(params, inputs, targets, net.toy_steps, net.toy_lr, net.alpha, net.loss)

    curve = pd.DataFrame({"step": np.arange(len(losses)), "loss": losses})
    curve.to_csv(ctx.storage.path("loss_curve.csv"), index=False)
    ctx.storage.save_checkpoint("checkpoint.json", params)
    data = {"initial_loss": losses[0], "final_loss": losses[-1], "ratio": losses[-1] / losses[0], "steps": len(losses)}
    return CommandResult(success=True, data=data, message=f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")


@router.command(
    "pipeline", "end-to-end segmentation of a phantom (or stored volume)",
    arg("--volume", help="stored volume; a phantom is generated when omitted"),
    arg("--labels", help="gt label map for the stored volume"),
    arg("--poses", help="poses for the stored volume"),
    arg("--tilt", type=float),
    arg("--teeth", type=int),
    arg("--missing", type=int, nargs="*", default=[]),
    arg("--metal", type=int, nargs="*", default=[]),
    arg("--segmenter", choices=[ORACLE, NETWORK], default=ORACLE),
    arg("--checkpoint", help="network checkpoint for --segmenter network"),
)
def cmd_pipeline(args: argparse.Namespace, ctx: CommandContext) -> CommandResult:
    storage = ctx.storage
    network = storage.load_checkpoint(args.checkpoint) if args.checkpoint else None
    pipeline = ToothSegmentationPipeline(ctx.config, args.segmenter, network)
    if args.volume:
        if not args.poses:
            raise InvalidInputError("--volume needs --poses")
        volume = storage.read_grid(args.volume, Volume)
        poses = storage.read_poses(args.poses)
        labels = storage.read_grid(args.labels, LabelMap) if args.labels else None
        metal = set(args.metal)
    else:
        truth = generate(_phantom_spec(args, ctx))
        volume, poses, labels, metal = truth.volume, truth.poses, truth.labels, set(truth.spec.metal)
    result = pipeline.run(volume, poses, gt_labels=labels, metal=metal)

    storage.write_grid("labels_pred.json", result.labels)
    for jaw, voi_labels in result.voi_labels.items():
        storage.write_grid(f"voi_labels_pred_{jaw.value}.json", voi_labels)
    storage.write_transforms("transforms.json", result.frames)
    storage.write_boxes("boxes_pred.json", [b for boxes in result.boxes.values() for b in boxes])
    data: Dict[str, Any] = {"teeth": {jaw.value: len(b) for jaw, b in result.boxes.items()}}
    if result.report is not None:
        data["aji"] = result.report.aggregate.aji
        data["voi"] = {}
        for jaw, report in result.voi_reports.items():
            f1_scores = [row["f1"] for row in report.per_instance]
            data["voi"][jaw.value] = {
                "aji": report.aggregate.aji, "min_f1": min(f1_scores, default=None), "ap50": report.aggregate.ap50,
            }
        storage.write_json("metrics.json", {
            "source": result.report.model_dump(mode="json"),
            "voi": {jaw.value: r.model_dump(mode="json") for jaw, r in result.voi_reports.items()},
        })
    return CommandResult(success=True, data=data, message="pipeline finished")
