"""
Samples and everything that produces them: the parametric synthetic-face
generator (domains A, B and C), bounding-box cropping, training-time
augmentation, and the points-file reader.

Geometry uses continuous pixel coordinates: pixel (row, col) covers
[col, col + 1) x [row, row + 1), so its center is (col + 0.5, row + 0.5).
Transforms are 3x3 homogeneous matrices mapping source to destination.
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from . import config
from .exceptions import (
    ConfigurationError,
    CountMismatchError,
    DegenerateBoxError,
    MalformedHeaderError,
    NonNumericTokenError,
)
from .landmark_codec import BBox, LandmarkSet, clamp_landmarks
from .schemas import AugmentConfig, DomainStyle, SynthConfig
from .tensor_engine import SeededRng

logger = logging.getLogger(__name__)

LARGE_POSE_DEG = 20.0


@dataclass(eq=False)
class Sample:
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    landmarks: LandmarkSet
    bbox: BBox
    domain_tag: str = "A"
    is_labeled: bool = True
    attributes: tuple[str, ...] = ()

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass(frozen=True)
class FaceTemplate:
    names: tuple[str, ...]
    points: np.ndarray  # [N, 2] in the unit square
    flip_map: np.ndarray
    left_eye: int
    right_eye: int
    parts: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return len(self.names)


# --- fixtures ---

def validate_flip_map(flip_map: Sequence[int]) -> np.ndarray:
    perm = np.asarray(flip_map, dtype=np.int64)
    n = len(perm)
    if sorted(perm.tolist()) != list(range(n)):
        raise ConfigurationError("flip map is not a permutation")
    if not np.array_equal(perm[perm], np.arange(n)):
        raise ConfigurationError("flip map is not an involution")
    return perm


def _fixture_path(name: str, root: Optional[Path]) -> Path:
    path = Path(root or config.fixtures_dir()) / name
    if not path.exists():
        raise ConfigurationError(f"fixture {path} not found")
    return path


def load_template(name: str = "synth_template.json", root: Optional[Path] = None) -> FaceTemplate:
    doc = json.loads(_fixture_path(name, root).read_text())
    points = np.asarray(doc["points"], dtype=np.float64)
    if len({tuple(p) for p in points.tolist()}) != len(points):
        raise ConfigurationError(f"template {name} has duplicate points")
    if len(doc["names"]) != len(points):
        raise ConfigurationError(f"template {name}: {len(doc['names'])} names for {len(points)} points")
    return FaceTemplate(
        names=tuple(doc["names"]),
        points=points,
        flip_map=validate_flip_map(doc["flip_map"]),
        left_eye=int(doc["left_eye"]),
        right_eye=int(doc["right_eye"]),
        parts=doc.get("parts", {}),
    )


def load_flip_map(name: str, root: Optional[Path] = None) -> np.ndarray:
    doc = json.loads(_fixture_path(name, root).read_text())
    return validate_flip_map(doc["flip_map"])


def default_flip_map(num_landmarks: int) -> np.ndarray:
    """Packaged mirror permutation for the synthetic template or the 68-point scheme."""
    if num_landmarks == 68:
        return load_flip_map("flip_68.json")
    template = load_template()
    if template.N != num_landmarks:
        raise ConfigurationError(f"no packaged flip map for {num_landmarks} landmarks")
    return template.flip_map


# --- points files ---

def _parse_header(line: str, key: str, path: str, line_no: int) -> str:
    head, sep, value = line.partition(":")
    if not sep or head.strip() != key or not value.strip():
        raise MalformedHeaderError(path, line_no, f"expected '{key}: <value>', got {line.strip()!r}")
    return value.strip()


def load_pts(path) -> LandmarkSet:
    """Read a points file: `version: 1`, `n_points: K`, `{`, K lines of `x y`, `}`."""
    path = str(path)
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3:
        raise MalformedHeaderError(path, len(lines) + 1, "file ends inside the header")
    _parse_header(lines[0], "version", path, 1)
    raw_count = _parse_header(lines[1], "n_points", path, 2)
    try:
        count = int(raw_count)
    except ValueError:
        raise MalformedHeaderError(path, 2, f"n_points is not an integer: {raw_count!r}") from None
    if lines[2].strip() != "{":
        raise MalformedHeaderError(path, 3, f"expected '{{', got {lines[2].strip()!r}")

    points = []
    for line_no, line in enumerate(lines[3:], start=4):
        text = line.strip()
        if text == "}":
            if len(points) != count:
                raise CountMismatchError(path, line_no, f"n_points is {count} but {len(points)} points were listed")
            return LandmarkSet(np.asarray(points, dtype=np.float64))
        tokens = text.split()
        if len(tokens) != 2:
            raise NonNumericTokenError(path, line_no, f"expected two coordinates, got {text!r}")
        try:
            points.append((float(tokens[0]), float(tokens[1])))
        except ValueError:
            raise NonNumericTokenError(path, line_no, f"non-numeric coordinate in {text!r}") from None
    raise CountMismatchError(path, len(lines), "missing closing '}'")


# --- geometry ---

def translation_matrix(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])


def rotation_matrix(degrees: float, cx: float, cy: float) -> np.ndarray:
    """Rotation about (cx, cy); positive angles turn clockwise on screen (y points down)."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return translation_matrix(cx, cy) @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ translation_matrix(-cx, -cy)


def flip_matrix(width: float) -> np.ndarray:
    return np.array([[-1.0, 0.0, width], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def transform_points(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    homogeneous = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    return (homogeneous @ matrix.T)[:, :2]


def _as_box(lo: np.ndarray, hi: np.ndarray) -> BBox:
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def warp_image(image: np.ndarray, matrix: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Resample [C, H, W] so that source point p lands on matrix @ p; outside pixels read 0."""
    a, b, tx, c, d, ty = np.linalg.inv(matrix)[:2].ravel()
    # output (row, col) index -> input (row, col) index, with pixel centers at +0.5
    index_matrix = np.array([[d, c], [b, a]])
    index_offset = np.array([0.5 * c + 0.5 * d + ty - 0.5, 0.5 * a + 0.5 * b + tx - 0.5])
    channels = [
        ndimage.affine_transform(ch, index_matrix, offset=index_offset, output_shape=(out_height, out_width),
                                 order=1, mode="constant", cval=0.0)
        for ch in image
    ]
    return np.stack(channels).astype(image.dtype)


def warp_sample(sample: Sample, matrix: np.ndarray, out_height: Optional[int] = None,
                out_width: Optional[int] = None) -> Sample:
    h = out_height or sample.height
    w = out_width or sample.width
    x1, y1, x2, y2 = sample.bbox
    corners = transform_points(np.array([[x1, y1], [x2, y1], [x1, y2], [x2, y2]]), matrix)
    return replace(
        sample,
        image=warp_image(sample.image, matrix, h, w),
        landmarks=LandmarkSet(transform_points(sample.landmarks.points, matrix)),
        bbox=_as_box(corners.min(axis=0), corners.max(axis=0)),
    )


# --- cropping ---

def effective_box(bbox: BBox, enlarge_pct: float, top_reduce_pct: float) -> BBox:
    """Grow each dimension by enlarge_pct in total (half per side), then lower the top edge by top_reduce_pct of the height."""
    x1, y1, x2, y2 = map(float, bbox)
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        raise DegenerateBoxError(f"bounding box {bbox} has non-positive width or height")
    gx, gy = w * enlarge_pct / 200.0, h * enlarge_pct / 200.0
    x1, x2, y1, y2 = x1 - gx, x2 + gx, y1 - gy, y2 + gy
    y1 += (y2 - y1) * top_reduce_pct / 100.0
    return (x1, y1, x2, y2)


def crop_transform(bbox: BBox, enlarge_pct: float, top_reduce_pct: float, out_size: int) -> np.ndarray:
    x1, y1, x2, y2 = effective_box(bbox, enlarge_pct, top_reduce_pct)
    sx, sy = out_size / (x2 - x1), out_size / (y2 - y1)
    return np.array([[sx, 0.0, -x1 * sx], [0.0, sy, -y1 * sy], [0.0, 0.0, 1.0]])


def crop_face(sample: Sample, enlarge_pct: float = 10.0, top_reduce_pct: float = 0.0, out_size: int = 64) -> Sample:
    """Crop the adjusted box and resize it to out_size; areas beyond the image read as zeros."""
    matrix = crop_transform(sample.bbox, enlarge_pct, top_reduce_pct, out_size)
    return warp_sample(sample, matrix, out_size, out_size)


# --- augmentation ---

def augment(sample: Sample, cfg: AugmentConfig, rng: SeededRng, flip_map: np.ndarray) -> Sample:
    """
    Random translation, occlusion, horizontal flip, rotation and blur, each with
    its own probability. The geometric steps are folded into a single warp; the
    occluder and blur are applied to the warped crop. Landmarks end clamped
    inside the frame.
    """
    h, w = sample.height, sample.width
    matrix = np.eye(3)
    flipped = False

    if rng.random() < cfg.translate_prob:
        dx, dy = rng.uniform(-cfg.translate_px, cfg.translate_px, size=2)
        matrix = translation_matrix(dx, dy) @ matrix
    occlude = rng.random() < cfg.occlusion_prob
    occluder = rng.uniform(0.0, 1.0, size=4)
    if rng.random() < cfg.flip_prob:
        matrix = flip_matrix(w) @ matrix
        flipped = True
    if rng.random() < cfg.rotate_prob:
        angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
        matrix = rotation_matrix(angle, w / 2.0, h / 2.0) @ matrix
    blur = rng.random() < cfg.blur_prob
    sigma = rng.uniform(0.0, cfg.blur_max_radius)

    out = sample
    if not np.array_equal(matrix, np.eye(3)):
        out = warp_sample(sample, matrix)
    points = out.landmarks.points
    if flipped:
        if len(flip_map) != len(points):
            raise ConfigurationError(f"flip map has {len(flip_map)} entries for {len(points)} landmarks")
        points = points[flip_map]
    image = out.image
    if occlude and cfg.occlusion_max_px >= 1:
        image = image.copy()
        ow = int(1 + occluder[0] * (min(cfg.occlusion_max_px, w) - 1))
        oh = int(1 + occluder[1] * (min(cfg.occlusion_max_px, h) - 1))
        ox = int(occluder[2] * (w - ow))
        oy = int(occluder[3] * (h - oh))
        image[:, oy:oy + oh, ox:ox + ow] = 0.0
    if blur and sigma > 0:
        image = np.stack([ndimage.gaussian_filter(ch, sigma=sigma, mode="constant") for ch in image]).astype(image.dtype)
    return replace(out, image=image, landmarks=LandmarkSet(clamp_landmarks(points, w, h)))


# --- synthetic faces ---

_STYLE_DEFAULTS = {
    # pose range (deg), jitter (template units), background, skin
    DomainStyle.A: (10.0, 0.005, 0.15, 0.75),
    DomainStyle.B: (30.0, 0.01, 0.65, 0.35),
    DomainStyle.C: (20.0, 0.0075, 0.40, 0.60),
}
FEATURE_INTENSITY = 0.05
PIXEL_NOISE = 0.02


def _shade(v: float) -> int:
    return int(round(255 * v))


def _ellipse(cx: float, cy: float, rx: float, ry: float, angle: float = 0.0, n: int = 24) -> np.ndarray:
    t = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    c, s = math.cos(angle), math.sin(angle)
    ex, ey = rx * np.cos(t), ry * np.sin(t)
    return np.stack([cx + c * ex - s * ey, cy + s * ex + c * ey], axis=1)


def _background(style: DomainStyle, size: int, base: float, rng: SeededRng) -> np.ndarray:
    if style == DomainStyle.A:
        return np.full((size, size), base)
    if style == DomainStyle.B:
        texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=(size, size)), sigma=2.0)
        texture /= max(float(np.abs(texture).max()), 1e-6)
        return base + 0.2 * texture
    angle = rng.uniform(0.0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    ramp = (math.cos(angle) * (xx - 0.5) + math.sin(angle) * (yy - 0.5)) / math.sqrt(0.5)
    return base + 0.25 * ramp


def _render(points: np.ndarray, to_canvas, template: FaceTemplate, style: DomainStyle, cfg: SynthConfig,
            rng: SeededRng) -> tuple[np.ndarray, bool]:
    size = cfg.canvas_size
    _, _, base, skin = _STYLE_DEFAULTS[style]
    canvas = Image.fromarray(np.uint8(np.clip(_background(style, size, base, rng), 0, 1) * 255))
    draw = ImageDraw.Draw(canvas)

    line_width = max(1, int(round(cfg.face_size / 24)))

    head = to_canvas(_ellipse(0.5, 0.56, 0.38, 0.42))
    draw.polygon([tuple(p) for p in head], fill=_shade(skin))
    parts = template.parts
    jaw = points[parts["jaw"]]
    draw.line([tuple(p) for p in jaw], fill=_shade(FEATURE_INTENSITY), width=line_width)
    for a, b in parts["brows"]:
        draw.line([tuple(points[a]), tuple(points[b])], fill=_shade(FEATURE_INTENSITY), width=line_width)
    for a, b in parts["eyes"]:
        mid = (points[a] + points[b]) / 2
        span = points[b] - points[a]
        half = float(np.linalg.norm(span)) / 2
        eye = _ellipse(mid[0], mid[1], half, 0.4 * half, math.atan2(span[1], span[0]))
        draw.polygon([tuple(p) for p in eye], fill=_shade(FEATURE_INTENSITY))
    nose = points[parts["nose"]]
    r = cfg.face_size * 0.025
    draw.ellipse([nose[0] - r, nose[1] - r, nose[0] + r, nose[1] + r], fill=_shade(FEATURE_INTENSITY))
    draw.polygon([tuple(p) for p in points[parts["mouth"]]], fill=_shade(FEATURE_INTENSITY))

    occluded = False
    if style == DomainStyle.B and rng.random() < 0.5:
        occluded = True
        for _ in range(int(rng.integers(1, 3))):
            cx, cy = rng.uniform(size * 0.25, size * 0.75, size=2)
            hw, hh = rng.uniform(cfg.face_size * 0.08, cfg.face_size * 0.2, size=2)
            draw.rectangle([cx - hw, cy - hh, cx + hw, cy + hh], fill=_shade(rng.uniform(0.0, 1.0)))

    image = np.asarray(canvas, dtype=np.float32) / 255.0
    image = image + rng.normal(0.0, PIXEL_NOISE, size=image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0)[None], occluded


def landmark_bbox(points: np.ndarray, margin_pct: float) -> BBox:
    lo, hi = points.min(axis=0), points.max(axis=0)
    pad = (hi - lo) * margin_pct / 200.0
    return _as_box(lo - pad, hi + pad)


def synth_generate(cfg: SynthConfig, count: int, rng: SeededRng,
                   template: Optional[FaceTemplate] = None) -> list[Sample]:
    """
    Template -> random similarity transform -> per-landmark jitter -> render.
    Each sample draws from its own child stream, so sample k does not depend on count.
    """
    template = template or load_template(cfg.template_file)
    if template.N != cfg.num_landmarks:
        raise ConfigurationError(f"template has {template.N} landmarks, config asks for {cfg.num_landmarks}")
    style = cfg.style
    default_pose, default_jitter, _, _ = _STYLE_DEFAULTS[style]
    pose = default_pose if cfg.pose_range_deg is None else cfg.pose_range_deg
    jitter = default_jitter if cfg.jitter_sigma is None else cfg.jitter_sigma
    center = cfg.canvas_size / 2.0

    samples = []
    for k in range(count):
        r = rng.spawn(k)
        angle = r.uniform(-pose, pose) if pose > 0 else 0.0
        scale = r.uniform(*cfg.scale_range) * cfg.face_size
        shift = r.uniform(-cfg.translate_px, cfg.translate_px, size=2) if cfg.translate_px > 0 else np.zeros(2)
        similarity = (
            translation_matrix(center + shift[0], center + shift[1])
            @ rotation_matrix(angle, 0.0, 0.0)
            @ np.diag([scale, scale, 1.0])
            @ translation_matrix(-0.5, -0.5)
        )
        unit = template.points
        if jitter > 0:
            unit = unit + r.normal(0.0, jitter, size=unit.shape)
        points = transform_points(unit, similarity)
        image, occluded = _render(points, lambda p: transform_points(p, similarity), template, style, cfg, r)
        attributes = tuple(a for a, on in (("occluded", occluded), ("large_pose", abs(angle) > LARGE_POSE_DEG)) if on)
        samples.append(Sample(
            image=image,
            landmarks=LandmarkSet(points),
            bbox=landmark_bbox(points, cfg.bbox_margin_pct),
            domain_tag=style.value,
            attributes=attributes,
        ))
    logger.debug(f"Generated {count} style-{style.value} samples.")
    return samples


def generate_domain(cfg: SynthConfig, style: DomainStyle, count: int, seed: int, split: int = 0, crop_size: int = 64,
                    enlarge_pct: float = 10.0, top_reduce_pct: float = 0.0, is_labeled: bool = True) -> list[Sample]:
    """Synthetic samples of one style, cropped to the network input size; `split` keeps train and test streams apart."""
    rng = SeededRng(seed, 0x73796E, list(DomainStyle).index(style), split)
    raw = synth_generate(cfg.model_copy(update={"style": style}), count, rng)
    return [replace(crop_face(s, enlarge_pct, top_reduce_pct, crop_size), is_labeled=is_labeled) for s in raw]


def as_batch(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)
