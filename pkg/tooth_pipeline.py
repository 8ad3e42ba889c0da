import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from models.config import PipelineConfig
from models.errors import InvalidInputError
from models.schemas import (
    Box3, DistanceMap, Jaw, LabelMap, MeanStd, MetricsReport, PipelineResult,
    PoseEstimate, VoiFrame, Volume,
)
from services.augment_service import crop_transform, standardize_crop, standardize_labels
from services.detector_service import (
    average_precision_50, boxes_from_labels, dilate, jaw_of, nms,
    object_include_ratios,
)
from services.distance_service import assemble, regression_target, restore_to_box
from services.metrics_service import per_instance_report
from services.pose_service import realign_box, realign_labels, resample_to_frame, restore_labels, voi_frame
from services.tsnet_service import TsnetParams, predict
from utils.helpers import mean_std

logger = logging.getLogger(__name__)

ORACLE, NETWORK = "oracle", "network"


class ToothSegmentationPipeline:
    """Pose realignment -> tooth boxes -> per-tooth distance maps -> instance labels.

    The "oracle" segmenter regresses nothing: it emits the distance targets of
    the ground-truth labels, so every residual error comes from resampling.
    """

    def __init__(self, config: Optional[PipelineConfig] = None, segmenter: str = ORACLE,
                 network: Optional[TsnetParams] = None):
        if segmenter not in (ORACLE, NETWORK):
            raise InvalidInputError(f"unknown segmenter: {segmenter}")
        if segmenter == NETWORK and network is None:
            raise InvalidInputError("the network segmenter needs trained parameters")
        self.config = config or PipelineConfig()
        self.segmenter = segmenter
        self.network = network

    def run(
        self,
        volume: Volume,
        poses: Dict[Jaw, PoseEstimate],
        gt_labels: Optional[LabelMap] = None,
        boxes: Optional[Sequence[Box3]] = None,
        metal: Iterable[int] = (),
    ) -> PipelineResult:
        """Main method: segment every tooth of both jaws; evaluates when gt_labels is given"""
        missing = [jaw.value for jaw in Jaw if jaw not in poses]
        if missing:
            raise InvalidInputError(f"missing pose for jaw(s): {missing}")
        if gt_labels is None and (boxes is None or self.segmenter == ORACLE):
            raise InvalidInputError("ground-truth labels are required for oracle segmentation and gt boxes")
        if gt_labels is not None and gt_labels.dims != volume.dims:
            raise InvalidInputError("gt labels must share the volume grid")
        metal = set(metal)

        frames: Dict[Jaw, VoiFrame] = {}
        jaw_boxes: Dict[Jaw, List[Box3]] = {}
        voi_labels: Dict[Jaw, LabelMap] = {}
        voi_reports: Dict[Jaw, MetricsReport] = {}
        for jaw in (Jaw.UPPER, Jaw.LOWER):
            voi, frame = self._realign(volume, poses[jaw])
            voi_truth = self._jaw_truth(gt_labels, frame) if gt_labels is not None else None
            detected = self._detect(jaw, frame, voi, voi_truth, boxes, metal)
            dilated = self._dilate(detected, voi)
            instances = self._segment(voi, voi_truth, dilated)
            predicted = assemble(instances, voi, self.config.distance.tau_vox)
            frames[jaw], jaw_boxes[jaw], voi_labels[jaw] = frame, dilated, predicted
            logger.info("%s jaw: %d teeth segmented", jaw.value, len(dilated))
            if voi_truth is not None:
                voi_reports[jaw] = self._evaluate_voi(voi_truth, predicted, detected, dilated, metal)

        labels = self._merge(volume, frames, voi_labels)
        report = None
        if gt_labels is not None:
            _, report = per_instance_report(gt_labels, labels, self._groups(gt_labels, metal))
        return PipelineResult(
            frames=frames, boxes=jaw_boxes, voi_labels=voi_labels, labels=labels,
            voi_reports=voi_reports, report=report,
        )

    def _realign(self, volume: Volume, pose: PoseEstimate) -> Tuple[Volume, VoiFrame]:
        frame = voi_frame(volume, pose, self.config.voi)
        return resample_to_frame(volume, frame), frame

    def _jaw_truth(self, gt_labels: LabelMap, frame: VoiFrame) -> LabelMap:
        """Ground truth in the VOI frame, restricted to the jaw's own teeth."""
        realigned = realign_labels(gt_labels, frame)
        data = realigned.data.copy()
        for tooth_id in np.unique(data):
            if tooth_id and jaw_of(int(tooth_id)) != frame.jaw:
                data[data == tooth_id] = 0
        return realigned.like(data)

    def _detect(
        self,
        jaw: Jaw,
        frame: VoiFrame,
        voi: Volume,
        voi_truth: Optional[LabelMap],
        boxes: Optional[Sequence[Box3]],
        metal: set,
    ) -> List[Box3]:
        """Tooth boxes in the VOI frame: supplied source-frame boxes or gt-derived ones, after NMS."""
        grouped = self.config.detection.grouped
        if boxes is not None:
            candidates = [
                realign_box(b if b.score is not None else b.model_copy(update={"score": 1.0}), frame)
                for b in boxes
                if b.tooth_id is None or jaw_of(b.tooth_id) == jaw
            ]
        else:
            candidates = [
                b.model_copy(update={"score": 1.0})
                for b in boxes_from_labels(voi_truth, metal, grouped)
            ]
        return nms(candidates, self.config.detection.nms_iou)

    def _dilate(self, detected: List[Box3], voi: Volume) -> List[Box3]:
        lo, hi = voi.world_bounds()
        half = 0.5 * np.asarray(voi.spacing)
        bounds = Box3(min_mm=tuple(lo - half), max_mm=tuple(hi + half))
        return [dilate(b, self.config.detection.margin_mm, bounds) for b in detected]

    def _segment(
        self,
        voi: Volume,
        voi_truth: Optional[LabelMap],
        boxes: List[Box3],
    ) -> List[Tuple[Box3, DistanceMap]]:
        """Per-tooth distance maps restored onto the VOI, in voxel units."""
        settings = self.config.distance
        instances = []
        for box in boxes:
            crop_map = self._crop_distance(voi, voi_truth, box)
            xform, _ = crop_transform(box, settings.crop_dims)
            restored = restore_to_box(crop_map, xform, box, voi)
            instances.append((box, restored.like(restored.data * settings.d_max_vox)))
        return instances

    def _crop_distance(self, voi: Volume, voi_truth: Optional[LabelMap], box: Box3) -> DistanceMap:
        settings = self.config.distance
        if self.segmenter == ORACLE:
            mask = standardize_labels(voi_truth, box, box.tooth_id, settings.crop_dims)
            return regression_target(mask, settings.d_max_vox)
        crop = standardize_crop(voi, box, settings.crop_dims)
        out = predict(self.network, crop.data[None].astype(np.float64))[0]
        return crop.like(np.clip(out, 0.0, 1.0), DistanceMap)

    def _merge(self, volume: Volume, frames: Dict[Jaw, VoiFrame], voi_labels: Dict[Jaw, LabelMap]) -> LabelMap:
        """Map both VOIs back onto the source grid; the upper jaw wins contested voxels."""
        merged = np.zeros(volume.dims, dtype=np.uint16)
        for jaw in (Jaw.LOWER, Jaw.UPPER):
            restored = restore_labels(voi_labels[jaw], frames[jaw], volume)
            merged = np.where(restored.data > 0, restored.data, merged)
        return LabelMap(dims=volume.dims, spacing=volume.spacing, origin=volume.origin, data=merged)

    @staticmethod
    def _groups(labels: LabelMap, metal: set) -> Dict[int, object]:
        return {b.tooth_id: b.group for b in boxes_from_labels(labels, metal)}

    def _evaluate_voi(
        self,
        truth: LabelMap,
        predicted: LabelMap,
        detected: List[Box3],
        dilated: List[Box3],
        metal: set,
    ) -> MetricsReport:
        _, report = per_instance_report(truth, predicted, self._groups(truth, metal))
        gt_boxes = boxes_from_labels(truth, metal)
        mean, std = mean_std(object_include_ratios(truth, gt_boxes, dilated))
        return report.with_detection(average_precision_50(gt_boxes, detected), MeanStd(mean=mean, std=std))
