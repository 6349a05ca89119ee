"""
Inference: registration, atlas-based segmentation and interpretability maps

- register:              predicted field + reconstructed (warped) moving image
- atlas_segment:         nearest-neighbour warp of one atlas's labels
- multi_atlas_segment:   rank atlases by reconstruction NLCC, keep the best,
                         majority vote, disagreement uncertainty
- segment_mtl:           argmax of warped one-hot labels (MTL) or of the
                         residual segmentation head (FEAT)
- backproject_prediction: target-space prediction pulled back through the
                         approximately inverted field
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from simreg.models.configs import TrainingMode
from simreg.models.datasets import AtlasSet
from simreg.models.volumes import DisplacementField, LabelMap, Volume, check_same_dims
from simreg.services import metrics
from simreg.services.network import NetworkParameters, forward_network, residual_seg_head
from simreg.services.preprocessing import one_hot
from simreg.services.resampler import (
    InversionResult, invert_field, warp_linear, warp_nearest, warp_probmap,
)

logger = logging.getLogger(__name__)


def register(params: NetworkParameters, moving: Volume, fixed: Volume) -> Tuple[DisplacementField, Volume]:
    """Field registering moving to fixed and the reconstruction warp_linear(moving, field)"""
    check_same_dims(moving.dims, fixed.dims)
    field, _ = forward_network(params, moving, fixed, pad=True)
    return field, warp_linear(moving, field)


def atlas_segment(params: NetworkParameters, atlas: Tuple[Volume, LabelMap], target: Volume,
                  field: Optional[DisplacementField] = None) -> LabelMap:
    """
    Warp the atlas labels onto the target.

    field overrides the network prediction (e.g. a known ground truth).
    """
    image, labels = atlas
    check_same_dims(image.dims, labels.dims, target.dims)
    if field is None:
        field, _ = register(params, image, target)
    return warp_nearest(labels, field)


@dataclass
class MultiAtlasResult:
    labels: LabelMap
    uncertainty: Volume
    selected: List[int]
    scores: List[float]  # NLCC of every atlas reconstruction, in atlas order


def _score_atlas(params: NetworkParameters, image: Volume, labels: LabelMap, target: Volume,
                 window: int) -> Tuple[float, LabelMap]:
    field, recon = register(params, image, target)
    return metrics.nlcc(recon, target, window), warp_nearest(labels, field)


def multi_atlas_segment(params: NetworkParameters, atlases: AtlasSet, target: Volume,
                        top_k: Optional[int] = None, window: int = 5,
                        workers: int = 1) -> MultiAtlasResult:
    """
    Register every atlas to the target and fuse the best ones.

    Args:
        params: network parameters
        atlases: labelled atlases
        target: image to segment
        top_k: number of atlases to keep; ceil(selection_fraction * N) if None
        window: NLCC window used for ranking
        workers: registrations run in parallel threads when > 1

    Returns:
        MultiAtlasResult with consensus labels, uncertainty map, the selected
        atlas indices (best first) and every atlas's NLCC
    """
    check_same_dims(atlases.entries[0][0].dims, target.dims)
    n = len(atlases)
    keep = top_k if top_k is not None else int(math.ceil(atlases.selection_fraction * n))
    if not 1 <= keep <= n:
        raise ValueError(f"cannot keep {keep} of {n} atlases")

    jobs = [(image, labels) for image, labels in atlases.entries]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda e: _score_atlas(params, e[0], e[1], target, window), jobs))
    else:
        results = [_score_atlas(params, image, labels, target, window) for image, labels in jobs]

    scores = [score for score, _ in results]
    # stable descending sort: equal scores keep atlas order
    order = sorted(range(n), key=lambda k: -scores[k])
    selected = order[:keep]
    votes = [results[k][1] for k in selected]

    consensus = metrics.majority_vote(votes)
    uncertainty = metrics.uncertainty_map(votes, consensus)
    logger.info(f"Multi-atlas: selected {selected} of {n} atlases, "
                f"NLCC {[round(scores[k], 4) for k in selected]}")
    return MultiAtlasResult(consensus, uncertainty, selected, scores)


def segment_mtl(params: NetworkParameters, moving: Tuple[Volume, LabelMap], target: Volume,
                mode: TrainingMode = TrainingMode.MTL) -> LabelMap:
    """
    Segment the target through a labelled moving image.

    MTL: argmax of the warped one-hot labels.
    FEAT: argmax of the residual head applied to the network features and
    the warped one-hot labels.
    """
    image, labels = moving
    check_same_dims(image.dims, labels.dims, target.dims)
    if mode == TrainingMode.FEAT and not params.has_seg_head:
        raise ValueError("segmentation head parameters absent")

    field, feat = forward_network(params, image, target, pad=True)
    warped = warp_probmap(one_hot(labels), field)
    if mode == TrainingMode.FEAT:
        return residual_seg_head(params, feat, warped).argmax()
    return warped.argmax()


def backproject_prediction(field: DisplacementField, prediction: LabelMap,
                           max_iters: int = 50, tol: float = 1e-3) -> Tuple[LabelMap, InversionResult]:
    """
    Map a target-space prediction into moving-image space.

    Returns the back-projected labels and the inversion report.
    """
    check_same_dims(field.dims, prediction.dims)
    inverse = invert_field(field, max_iters=max_iters, tol=tol)
    return warp_nearest(prediction, inverse.field), inverse


def foreground_agreement(a: LabelMap, b: LabelMap) -> float:
    """Fraction of foreground voxels of b carrying the same label in a"""
    check_same_dims(a.dims, b.dims)
    foreground = b.labels > 0
    if not foreground.any():
        return 1.0
    return float(np.mean(a.labels[foreground] == b.labels[foreground]))

