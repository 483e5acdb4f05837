"""Synthetic tracking sequences.

A scene is an object patch, occluder patches and a background, all cut
from one source image so the composited frames stay on that image's
manifold. Entities move with Gaussian-perturbed speed / direction /
aspect / scale, reflecting off the frame borders. The procedural image
source builds colorful smoothed-noise fields so no dataset is needed;
an image-directory mode accepts user-supplied images instead.

Export format, one directory per sequence:
    frame_000000.ppm ... (binary PPM, P6)
    annotations.txt      lines "frame_index x1 y1 x2 y2 occluded{0|1}"
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import BoundingBox
from .ppm import read_ppm, write_ppm

MIN_EXTENT = 8.0          # px, lower clamp for entity width/height
MAX_EXTENT_FRAC = 0.5     # upper clamp, fraction of frame size
SAMPLE_RETRIES = 64


@dataclass(frozen=True)
class MotionParams:
    """Noise magnitudes for the per-step motion update."""
    speed_init_max: float = 4.0     # initial speed ~ U[0, this]
    sigma_speed: float = 0.5
    sigma_dir: float = 0.2          # radians
    sigma_aspect: float = 0.02
    sigma_scale: float = 0.02


@dataclass
class EntityScript:
    """Initial motion of one entity plus the shared noise magnitudes."""
    speed: float
    direction: float
    aspect: float
    noise: MotionParams

    def __post_init__(self):
        if self.speed < 0 or self.aspect <= 0:
            raise ValueError("speed must be >= 0 and aspect > 0")


@dataclass(frozen=True)
class MotionScript:
    """Per-entity initial motion; index 0 is the tracked object."""
    entities: tuple
    noise: MotionParams


@dataclass(frozen=True)
class PatchSource:
    """Where object/occluder patches come from.

    ``procedural`` synthesizes a smoothed-noise image per scene;
    ``image-directory`` cycles PPM files from ``image_dir``. Sampled
    object patches must cover at least ``min_area_fraction`` of their
    source image.
    """
    mode: str = "procedural"
    min_area_fraction: float = 0.01
    image_dir: Path | None = None
    frame_size: int = 96

    def __post_init__(self):
        if self.mode not in ("procedural", "image-directory"):
            raise ValueError(f"unknown patch source mode {self.mode!r}")
        if self.mode == "image-directory" and self.image_dir is None:
            raise ValueError("image-directory mode needs image_dir")


@dataclass
class Scene:
    background: np.ndarray          # [H, W, 3] uint8
    object_patch: np.ndarray        # [h, w, 3] uint8
    occluder_patches: list          # list of [h, w, 3] uint8


@dataclass
class SyntheticSequence:
    frames: list                    # [H, W, 3] uint8 per frame
    truth: list                     # BoundingBox per frame
    occluded: list                  # bool per frame
    seed: int = 0

    def __post_init__(self):
        if not (len(self.frames) == len(self.truth) == len(self.occluded)):
            raise ValueError("frames/truth/occluded length mismatch")

    def __len__(self):
        return len(self.frames)


def procedural_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Colorful multi-octave smoothed noise, uint8 RGB.

    Coarse blobs give patches a distinctive dominant color; the fine
    octave adds texture so edges stay visible after warping.
    """
    img = np.zeros((height, width, 3), dtype=np.float64)
    for cell, weight in ((16, 0.7), (4, 0.3)):
        gh = height // cell + 2
        gw = width // cell + 2
        grid = rng.uniform(0.0, 255.0, size=(gh, gw, 3))
        ys = np.arange(height) / cell
        xs = np.arange(width) / cell
        y0 = ys.astype(int)
        x0 = xs.astype(int)
        fy = (ys - y0)[:, None, None]
        fx = (xs - x0)[None, :, None]
        a = grid[y0][:, x0]
        b = grid[y0][:, x0 + 1]
        c = grid[y0 + 1][:, x0]
        d = grid[y0 + 1][:, x0 + 1]
        img += weight * ((1 - fy) * ((1 - fx) * a + fx * b)
                         + fy * ((1 - fx) * c + fx * d))
    return np.clip(img, 0, 255).astype(np.uint8)


def _list_images(image_dir: Path) -> list:
    files = sorted(Path(image_dir).glob("*.ppm"))
    if not files:
        raise FileNotFoundError(f"no .ppm images in {image_dir}")
    return files


def _source_image(source: PatchSource, rng: np.random.Generator) -> np.ndarray:
    if source.mode == "procedural":
        return procedural_image(rng, source.frame_size, source.frame_size)
    files = _list_images(source.image_dir)
    return read_ppm(files[int(rng.integers(len(files)))])


def _cut_patch(img: np.ndarray, rng: np.random.Generator,
               min_area_fraction: float) -> np.ndarray | None:
    h, w = img.shape[:2]
    min_area = min_area_fraction * h * w
    side_min = math.sqrt(min_area_fraction)
    for _ in range(SAMPLE_RETRIES):
        pw = int(rng.integers(max(2, int(side_min * w)), w + 1))
        ph = int(rng.integers(max(2, int(side_min * h)), h + 1))
        if pw * ph < min_area:
            continue
        x = int(rng.integers(0, w - pw + 1))
        y = int(rng.integers(0, h - ph + 1))
        return img[y:y + ph, x:x + pw].copy()
    return None


def sample_scene(source: PatchSource, rng: np.random.Generator,
                 num_occluders: int = 1) -> Scene:
    """Object, occluders and background all from the same source image."""
    img = _source_image(source, rng)
    obj = _cut_patch(img, rng, source.min_area_fraction)
    if obj is None:
        raise RuntimeError(f"could not sample an object patch of area "
                           f">= {source.min_area_fraction} after {SAMPLE_RETRIES} tries")
    occs = []
    for _ in range(num_occluders):
        p = _cut_patch(img, rng, source.min_area_fraction)
        if p is not None:
            occs.append(p)
    return Scene(background=img, object_patch=obj, occluder_patches=occs)


def default_script(scene: Scene, rng: np.random.Generator,
                   noise: MotionParams | None = None) -> MotionScript:
    noise = noise or MotionParams()
    entities = []
    for _ in range(1 + len(scene.occluder_patches)):
        entities.append(EntityScript(
            speed=float(rng.uniform(0.0, noise.speed_init_max)),
            direction=float(rng.uniform(0.0, 2.0 * math.pi)),
            aspect=1.0,
            noise=noise,
        ))
    return MotionScript(entities=tuple(entities), noise=noise)


@dataclass
class _EntityState:
    cx: float
    cy: float
    w: float
    h: float
    speed: float
    direction: float

    def box(self) -> BoundingBox:
        return BoundingBox(self.cx - self.w / 2, self.cy - self.h / 2,
                           self.cx + self.w / 2, self.cy + self.h / 2)


def _resize_patch(patch: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor resize; cheap and deterministic."""
    ph, pw = patch.shape[:2]
    ys = np.minimum((np.arange(h) * ph / h).astype(int), ph - 1)
    xs = np.minimum((np.arange(w) * pw / w).astype(int), pw - 1)
    return patch[ys[:, None], xs[None, :]]


def _paste(frame: np.ndarray, patch: np.ndarray, box: BoundingBox) -> None:
    fh, fw = frame.shape[:2]
    x1 = int(round(box.x1))
    y1 = int(round(box.y1))
    w = int(round(box.x2)) - x1
    h = int(round(box.y2)) - y1
    if w < 1 or h < 1:
        return
    fx1, fy1 = max(0, x1), max(0, y1)
    fx2, fy2 = min(fw, x1 + w), min(fh, y1 + h)
    if fx2 <= fx1 or fy2 <= fy1:
        return
    scaled = _resize_patch(patch, h, w)
    frame[fy1:fy2, fx1:fx2] = scaled[fy1 - y1:fy2 - y1, fx1 - x1:fx2 - x1]


def _step_entity(st: _EntityState, script: EntityScript, noise: MotionParams,
                 rng: np.random.Generator, fw: int, fh: int) -> None:
    st.speed = max(0.0, st.speed + rng.normal(0.0, noise.sigma_speed))
    st.direction += rng.normal(0.0, noise.sigma_dir)
    ratio = math.exp(rng.normal(0.0, noise.sigma_aspect))
    scl = math.exp(rng.normal(0.0, noise.sigma_scale))
    st.w *= scl * ratio
    st.h *= scl / ratio
    st.w = min(max(st.w, MIN_EXTENT), MAX_EXTENT_FRAC * fw)
    st.h = min(max(st.h, MIN_EXTENT), MAX_EXTENT_FRAC * fh)
    st.cx += st.speed * math.cos(st.direction)
    st.cy += st.speed * math.sin(st.direction)
    # Reflect the center off the borders: with the center in-frame at
    # least a quarter of the box stays visible even in a corner.
    if st.cx < 0:
        st.cx = -st.cx
        st.direction = math.pi - st.direction
    elif st.cx > fw:
        st.cx = 2 * fw - st.cx
        st.direction = math.pi - st.direction
    if st.cy < 0:
        st.cy = -st.cy
        st.direction = -st.direction
    elif st.cy > fh:
        st.cy = 2 * fh - st.cy
        st.direction = -st.direction


def coverage(obj: BoundingBox, occluders) -> float:
    """Fraction of obj's area covered by the union of occluder boxes.

    Exact rectangle-union area via an x-sweep with interval merging.
    """
    clipped = []
    for occ in occluders:
        x1 = max(obj.x1, occ.x1)
        y1 = max(obj.y1, occ.y1)
        x2 = min(obj.x2, occ.x2)
        y2 = min(obj.y2, occ.y2)
        if x1 < x2 and y1 < y2:
            clipped.append((x1, y1, x2, y2))
    if not clipped:
        return 0.0
    xs = sorted({r[0] for r in clipped} | {r[2] for r in clipped})
    covered = 0.0
    for xa, xb in zip(xs, xs[1:]):
        spans = sorted((r[1], r[3]) for r in clipped if r[0] <= xa and r[2] >= xb)
        total = 0.0
        cur_lo, cur_hi = None, None
        for lo, hi in spans:
            if cur_hi is None or lo > cur_hi:
                if cur_hi is not None:
                    total += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        if cur_hi is not None:
            total += cur_hi - cur_lo
        covered += total * (xb - xa)
    return min(1.0, covered / obj.area)


def simulate(scene: Scene, script: MotionScript, length: int,
             rng: np.random.Generator, occlusion_threshold: float = 0.5,
             seed: int = 0) -> SyntheticSequence:
    """Roll the scene forward ``length`` frames.

    Composite order per frame: background, object, occluders. The truth
    box follows the object; the occluded flag fires when occluder
    coverage of the truth box exceeds the threshold.
    """
    if length < 2:
        raise ValueError("sequence length must be >= 2")
    if len(script.entities) != 1 + len(scene.occluder_patches):
        raise ValueError("script must cover the object and every occluder")
    fh, fw = scene.background.shape[:2]
    states = []
    for ent, patch in zip(script.entities,
                          [scene.object_patch] + scene.occluder_patches):
        ph, pw = patch.shape[:2]
        w = min(max(float(pw) * math.sqrt(ent.aspect), MIN_EXTENT), MAX_EXTENT_FRAC * fw)
        h = min(max(float(ph) / math.sqrt(ent.aspect), MIN_EXTENT), MAX_EXTENT_FRAC * fh)
        states.append(_EntityState(
            cx=float(rng.uniform(w / 2, fw - w / 2)),
            cy=float(rng.uniform(h / 2, fh - h / 2)),
            w=w, h=h, speed=ent.speed, direction=ent.direction))

    frames, truth, occluded = [], [], []
    for t in range(length):
        if t > 0:
            for st, ent in zip(states, script.entities):
                _step_entity(st, ent, script.noise, rng, fw, fh)
        frame = scene.background.copy()
        obj_box = states[0].box()
        _paste(frame, scene.object_patch, obj_box)
        occ_boxes = []
        for st, patch in zip(states[1:], scene.occluder_patches):
            b = st.box()
            _paste(frame, patch, b)
            occ_boxes.append(b)
        frames.append(frame)
        truth.append(obj_box)
        occluded.append(coverage(obj_box, occ_boxes) > occlusion_threshold)
    return SyntheticSequence(frames=frames, truth=truth, occluded=occluded, seed=seed)


@dataclass(frozen=True)
class SequenceConfig:
    """Everything that, together with a seed, pins down one sequence."""
    source: PatchSource = field(default_factory=PatchSource)
    motion: MotionParams = field(default_factory=MotionParams)
    occluders_min: int = 1
    occluders_max: int = 2
    occlusion_threshold: float = 0.5


def generate_sequence(config: SequenceConfig, length: int, seed: int) -> SyntheticSequence:
    """Deterministic sequence: (config, seed) fixes every byte."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_occ = int(rng.integers(config.occluders_min, config.occluders_max + 1))
    scene = sample_scene(config.source, rng, num_occluders=n_occ)
    script = default_script(scene, rng, config.motion)
    return simulate(scene, script, length, rng,
                    occlusion_threshold=config.occlusion_threshold, seed=seed)


def static_config(config: SequenceConfig | None = None) -> SequenceConfig:
    """Variant with all motion frozen (constant frames, constant truth)."""
    config = config or SequenceConfig()
    still = MotionParams(speed_init_max=0.0, sigma_speed=0.0, sigma_dir=0.0,
                         sigma_aspect=0.0, sigma_scale=0.0)
    return replace(config, motion=still, occluders_min=0, occluders_max=0)


# ---------------------------------------------------------------------------
# dataset export / import


def save_sequence(directory: Path, seq: SyntheticSequence) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (frame, box, occ) in enumerate(zip(seq.frames, seq.truth, seq.occluded)):
        write_ppm(directory / f"frame_{i:06d}.ppm", frame)
        lines.append(f"{i} {box.x1!r} {box.y1!r} {box.x2!r} {box.y2!r} {int(occ)}")
    (directory / "annotations.txt").write_text("\n".join(lines) + "\n")


def load_sequence(directory: Path) -> SyntheticSequence:
    directory = Path(directory)
    ann = directory / "annotations.txt"
    if not ann.is_file():
        raise FileNotFoundError(f"{ann} not found")
    frames, truth, occluded = [], [], []
    for line in ann.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"bad annotation line: {line!r}")
        idx = int(parts[0])
        frames.append(read_ppm(directory / f"frame_{idx:06d}.ppm"))
        truth.append(BoundingBox(*(float(v) for v in parts[1:5])))
        occluded.append(parts[5] == "1")
    if not frames:
        raise ValueError(f"empty annotations in {directory}")
    return SyntheticSequence(frames=frames, truth=truth, occluded=occluded)
