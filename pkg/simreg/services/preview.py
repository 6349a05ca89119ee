"""
PNG previews of registration and segmentation results (mid-axial slices)

- registration panel: moving | fixed | reconstruction | |fixed - recon| x 6 | |F|
- segmentation overlay: true positives green, false positives blue,
  false negatives yellow over the greyscale image
- scalar map: uncertainty or any [0, 1] map in greyscale
"""
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from simreg.models.volumes import DisplacementField, LabelMap, Volume, check_same_dims

DIFF_GAIN = 6.0
PANEL_GAP = 4
MIN_TILE = 128

TP_COLOR = (0, 255, 0)
FP_COLOR = (0, 0, 255)
FN_COLOR = (255, 255, 0)


def mid_slice(data: np.ndarray, axis: int = 2) -> np.ndarray:
    return np.take(data, data.shape[axis] // 2, axis=axis)


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return (np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _tile(values: np.ndarray) -> Image.Image:
    """Greyscale tile, nearest-neighbour upscaled to at least MIN_TILE pixels"""
    img = Image.fromarray(_to_uint8(values)).convert("RGB")
    factor = max(1, int(np.ceil(MIN_TILE / max(values.shape))))
    return img.resize((img.width * factor, img.height * factor), Image.Resampling.NEAREST)


def _hstack(tiles: List[Image.Image]) -> Image.Image:
    width = sum(t.width for t in tiles) + PANEL_GAP * (len(tiles) - 1)
    height = max(t.height for t in tiles)
    panel = Image.new("RGB", (width, height), (255, 255, 255))
    x = 0
    for t in tiles:
        panel.paste(t, (x, 0))
        x += t.width + PANEL_GAP
    return panel


def render_registration_panel(moving: Volume, fixed: Volume, recon: Volume,
                              field: Optional[DisplacementField] = None) -> Image.Image:
    """Mid-slice panel; the field-magnitude tile is scaled by its own maximum"""
    check_same_dims(moving.dims, fixed.dims, recon.dims)
    tiles = [
        _tile(mid_slice(moving.data)),
        _tile(mid_slice(fixed.data)),
        _tile(mid_slice(recon.data)),
        _tile(DIFF_GAIN * np.abs(mid_slice(fixed.data) - mid_slice(recon.data))),
    ]
    if field is not None:
        check_same_dims(field.dims, moving.dims)
        magnitude = mid_slice(field.magnitude())
        peak = float(magnitude.max())
        tiles.append(_tile(magnitude / peak if peak > 0 else magnitude))
    return _hstack(tiles)


def render_segmentation_overlay(image: Volume, pred: LabelMap, truth: LabelMap, class_id: int) -> Image.Image:
    """Colour-coded agreement of pred and truth for one class over the image slice"""
    check_same_dims(image.dims, pred.dims, truth.dims)
    base = np.repeat(_to_uint8(mid_slice(image.data))[..., None], 3, axis=2)
    p = mid_slice(pred.labels) == class_id
    t = mid_slice(truth.labels) == class_id
    base[p & t] = TP_COLOR
    base[p & ~t] = FP_COLOR
    base[~p & t] = FN_COLOR
    img = Image.fromarray(base)
    factor = max(1, int(np.ceil(MIN_TILE / max(base.shape[:2]))))
    return img.resize((img.width * factor, img.height * factor), Image.Resampling.NEAREST)


def render_scalar_map(volume: Volume) -> Image.Image:
    return _tile(mid_slice(volume.data))


def render_label_map(labels: LabelMap) -> Image.Image:
    """Labels spread evenly over the grey range"""
    scale = max(labels.num_classes - 1, 1)
    return _tile(mid_slice(labels.labels) / scale)


def save_png(img: Image.Image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, "PNG")
    return path
