"""Bounding-box and crop geometry.

Boxes live in image pixel coordinates (x1, y1, x2, y2). A crop window is
the 2x-padded square of interest around a box: same center, twice the
extents. Crops are warped to a fixed network size without preserving
aspect ratio, and regression targets are box corners expressed in the
crop's [0,1]^2 coordinate frame.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

MIN_BOX_EXTENT = 2.0  # px; degenerate boxes are clamped up to this


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class CropWindow:
    """Center + extents of a crop region; may extend past image borders."""
    cx: float
    cy: float
    w: float
    h: float

    @property
    def x1(self) -> float:
        return self.cx - 0.5 * self.w

    @property
    def y1(self) -> float:
        return self.cy - 0.5 * self.h

    def as_box(self) -> BoundingBox:
        return BoundingBox(self.x1, self.y1, self.x1 + self.w, self.y1 + self.h)


@dataclass(frozen=True)
class CropFrameBox:
    """Box corners in crop coordinates, where the crop spans [0,1]x[0,1].

    Values outside [0,1] are legal: the object may sit partially outside
    the crop.
    """
    x1: float
    y1: float
    x2: float
    y2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "CropFrameBox":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def crop_window_for(box: BoundingBox) -> CropWindow:
    """The 2x-padded window: same center, doubled width and height."""
    w, h = box.width, box.height
    if w < MIN_BOX_EXTENT or h < MIN_BOX_EXTENT:
        warnings.warn(f"degenerate box ({w:.3g}x{h:.3g}) clamped to "
                      f"{MIN_BOX_EXTENT} px", stacklevel=2)
        w = max(w, MIN_BOX_EXTENT)
        h = max(h, MIN_BOX_EXTENT)
    cx, cy = box.center
    return CropWindow(cx, cy, 2.0 * w, 2.0 * h)


def extract_crop(image: np.ndarray, window: CropWindow, out_size: int,
                 dtype=np.float64) -> np.ndarray:
    """Bilinear warp of ``window`` to [3, out_size, out_size] in [-1, 1].

    The warp ignores the source aspect ratio. Samples outside the image
    contribute 0 after normalization (mid-gray). Sample positions use the
    half-pixel-center convention, so a window covering exactly the whole
    image at out_size == image size is the identity.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] image, got {image.shape}")
    h, w = image.shape[:2]
    norm = image.astype(dtype) / 127.5 - 1.0
    # 1-px zero border absorbs every out-of-range neighbor after clipping.
    padded = np.zeros((h + 2, w + 2, 3), dtype=dtype)
    padded[1:h + 1, 1:w + 1] = norm

    xs = window.x1 + (np.arange(out_size, dtype=np.float64) + 0.5) * (window.w / out_size) - 0.5
    ys = window.y1 + (np.arange(out_size, dtype=np.float64) + 0.5) * (window.h / out_size) - 0.5
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0).astype(dtype)
    fy = (ys - y0).astype(dtype)
    xi = np.clip(x0.astype(np.int64), -1, w) + 1
    yi = np.clip(y0.astype(np.int64), -1, h) + 1
    xi1 = np.clip(x0.astype(np.int64) + 1, -1, w) + 1
    yi1 = np.clip(y0.astype(np.int64) + 1, -1, h) + 1

    ga = padded[yi[:, None], xi[None, :]]
    gb = padded[yi[:, None], xi1[None, :]]
    gc = padded[yi1[:, None], xi[None, :]]
    gd = padded[yi1[:, None], xi1[None, :]]
    fxr = fx[None, :, None]
    fyr = fy[:, None, None]
    out = ((1 - fyr) * ((1 - fxr) * ga + fxr * gb)
           + fyr * ((1 - fxr) * gc + fxr * gd))
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def encode_target(window: CropWindow, truth: BoundingBox) -> CropFrameBox:
    """Map truth corners into the window's [0,1]^2 frame."""
    return CropFrameBox(
        (truth.x1 - window.x1) / window.w,
        (truth.y1 - window.y1) / window.h,
        (truth.x2 - window.x1) / window.w,
        (truth.y2 - window.y1) / window.h,
    )


def decode_prediction(window: CropWindow, pred) -> BoundingBox:
    """Inverse of encode_target, back to image pixels.

    Inverted corners are repaired by swapping (keeps the tracker alive
    under early-training noise); coincident corners are nudged apart.
    """
    p = pred.as_array() if isinstance(pred, CropFrameBox) else np.asarray(pred, dtype=np.float64)
    x1 = window.x1 + p[0] * window.w
    y1 = window.y1 + p[1] * window.h
    x2 = window.x1 + p[2] * window.w
    y2 = window.y1 + p[3] * window.h
    if x2 < x1:
        x1, x2 = x2, x1
    if y2 < y1:
        y1, y2 = y2, y1
    if x2 - x1 < 1e-6:
        x1 -= 0.5 * MIN_BOX_EXTENT
        x2 += 0.5 * MIN_BOX_EXTENT
    if y2 - y1 < 1e-6:
        y1 -= 0.5 * MIN_BOX_EXTENT
        y2 += 0.5 * MIN_BOX_EXTENT
    return BoundingBox(x1, y1, x2, y2)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def mirror_box(box: BoundingBox, image_width: float) -> BoundingBox:
    return BoundingBox(image_width - box.x2, box.y1, image_width - box.x1, box.y2)


def mirror_track(frames, boxes):
    """Horizontally flip every frame and reflect every box of a track.

    Applied to a whole track or not at all; per-frame flipping would
    destroy motion continuity.
    """
    frames = list(frames)
    boxes = list(boxes)
    if len(frames) != len(boxes):
        raise ValueError(f"{len(frames)} frames vs {len(boxes)} boxes")
    flipped = [np.ascontiguousarray(f[:, ::-1]) for f in frames]
    width = float(frames[0].shape[1]) if frames else 0.0
    return flipped, [mirror_box(b, width) for b in boxes]
