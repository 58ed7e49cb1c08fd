"""
Network-free landmark mathematics: label encoding for score / offset / neighbor
maps, the PIP losses, the PIP and PIP+NRM decoders, and the heatmap and
coordinate baselines (Gaussian labels, quarter-offset decoding, L2 / L1 losses).

Grid convention everywhere: a point p falls in grid floor(p / S) and is
decoded as (grid + offset) * S, anchored at the grid's top-left corner.
Offset maps hold the N x-channels followed by the N y-channels; neighbor maps
hold channel i*C + m for the x of neighbor slot m of landmark i, then the same
layout again for y.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .exceptions import ConfigurationError, DecodeError, DegenerateBoxError, ShapeError
from .schemas import HeadConfig
from .tensor_engine import Tensor, absolute, mean, mul, scale, square, sub, tensor_sum

logger = logging.getLogger(__name__)

CLAMP_MARGIN = 1e-3

BBox = tuple[float, float, float, float]


@dataclass(eq=False)
class LandmarkSet:
    """N ordered (x, y) points in crop pixel coordinates."""
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeError(f"landmarks must be [N, 2], got {pts.shape}")
        if pts.shape[0] < 2:
            raise ShapeError(f"at least 2 landmarks are required, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise ShapeError("landmark coordinates must be finite")
        self.points = pts

    @property
    def N(self) -> int:
        return self.points.shape[0]

    def copy(self) -> "LandmarkSet":
        return LandmarkSet(self.points.copy())


@dataclass(eq=False)
class MeanShape:
    points: np.ndarray  # [N, 2] in the bbox-normalized unit square
    n_samples: int
    n_rejected: int = 0


@dataclass(eq=False)
class NeighborTable:
    indices: np.ndarray  # [N, C] int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 2:
            raise ShapeError(f"neighbor table must be [N, C], got {idx.shape}")
        n = idx.shape[0]
        for i, row in enumerate(idx):
            if np.any((row < 0) | (row >= n)) or i in row or len(set(row.tolist())) != len(row):
                raise ConfigurationError(f"neighbor table row {i} is invalid: {row.tolist()}")
        self.indices = idx

    @property
    def num_neighbors(self) -> int:
        return self.indices.shape[1]

    def tolist(self) -> list[list[int]]:
        return self.indices.tolist()


@dataclass(eq=False)
class TargetMaps:
    score: np.ndarray           # [N, H_M, W_M]
    offset: np.ndarray          # [2N, H_M, W_M]
    neighbor: np.ndarray        # [2CN, H_M, W_M]
    positive_index: np.ndarray  # [N, 2] (row, col)


@dataclass(eq=False)
class TargetBatch:
    score: np.ndarray
    offset: np.ndarray
    neighbor: np.ndarray
    offset_mask: np.ndarray
    neighbor_mask: np.ndarray

    @classmethod
    def stack(cls, maps: Sequence[TargetMaps], num_neighbors: int) -> "TargetBatch":
        score = np.stack([m.score for m in maps])
        return cls(
            score=score,
            offset=np.stack([m.offset for m in maps]),
            neighbor=np.stack([m.neighbor for m in maps]),
            offset_mask=np.concatenate([score, score], axis=1),
            neighbor_mask=np.concatenate([np.repeat(score, num_neighbors, axis=1)] * 2, axis=1),
        )


class LossTerms(NamedTuple):
    total: Tensor
    score: Tensor
    offset: Tensor
    neighbor: Tensor


# --- geometry helpers ---

def clamp_landmarks(points: np.ndarray, width: float, height: float, margin: float = CLAMP_MARGIN) -> np.ndarray:
    out = np.array(points, dtype=np.float64)
    out[:, 0] = np.clip(out[:, 0], 0.0, width - margin)
    out[:, 1] = np.clip(out[:, 1], 0.0, height - margin)
    return out


def normalize_to_bbox(points: np.ndarray, bbox: BBox) -> np.ndarray:
    x1, y1, x2, y2 = bbox
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        raise DegenerateBoxError(f"bounding box {bbox} has non-positive width or height")
    return (np.asarray(points, dtype=np.float64) - [x1, y1]) / [w, h]


def landmarks_to_coords(lm: LandmarkSet, width: float, height: float) -> np.ndarray:
    """Interleaved [x0, y0, x1, y1, ...] normalized by the image size."""
    return (lm.points / [width, height]).reshape(-1)


def coords_to_landmarks(coords: np.ndarray, width: float, height: float) -> LandmarkSet:
    return LandmarkSet(np.asarray(coords, dtype=np.float64).reshape(-1, 2) * [width, height])


# --- mean shape and neighbors ---

def mean_shape(train_samples: Iterable[tuple[LandmarkSet, BBox]]) -> MeanShape:
    total = None
    used = rejected = 0
    for lm, bbox in train_samples:
        try:
            normalized = normalize_to_bbox(lm.points, bbox)
        except DegenerateBoxError as e:
            rejected += 1
            logger.warning(f"mean_shape: rejected sample {used + rejected - 1}: {e}")
            continue
        total = normalized if total is None else total + normalized
        used += 1
    if used == 0:
        raise ConfigurationError(f"mean_shape needs at least one valid training sample ({rejected} rejected)")
    if rejected:
        logger.info(f"mean_shape: {rejected} sample(s) with degenerate boxes rejected, {used} used.")
    return MeanShape(points=total / used, n_samples=used, n_rejected=rejected)


def build_neighbor_table(mean: MeanShape, C: int) -> NeighborTable:
    """Row i: the C mean-shape points closest to point i (itself excluded), ties to the lower index."""
    pts = mean.points
    n = pts.shape[0]
    if C >= n:
        raise ConfigurationError(f"C={C} neighbors requested but only {n} landmarks exist")
    if C < 1:
        raise ConfigurationError(f"C must be at least 1, got {C}")
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    return NeighborTable(order[:, :C])


# --- PIP encoding ---

def positive_grid(points: np.ndarray, stride: int, map_height: int, map_width: int) -> np.ndarray:
    """(row, col) of the grid containing each point."""
    rows = np.clip(np.floor(points[:, 1] / stride).astype(np.int64), 0, map_height - 1)
    cols = np.clip(np.floor(points[:, 0] / stride).astype(np.int64), 0, map_width - 1)
    return np.stack([rows, cols], axis=1)


def encode_score(lm: LandmarkSet, stride: int, input_height: int, input_width: int) -> np.ndarray:
    """One-hot score maps [N, H/stride, W/stride]."""
    if input_height % stride or input_width % stride:
        raise ConfigurationError(f"stride {stride} does not divide input {input_height}x{input_width}")
    hm, wm = input_height // stride, input_width // stride
    pts = clamp_landmarks(lm.points, input_width, input_height)
    grid = positive_grid(pts, stride, hm, wm)
    score = np.zeros((lm.N, hm, wm))
    score[np.arange(lm.N), grid[:, 0], grid[:, 1]] = 1.0
    return score


def encode_targets(lm: LandmarkSet, cfg: HeadConfig, table: Optional[NeighborTable] = None) -> TargetMaps:
    N, C, S = cfg.num_landmarks, cfg.num_neighbors, cfg.stride
    if lm.N != N:
        raise ShapeError(f"expected {N} landmarks, got {lm.N}")
    if C and (table is None or table.indices.shape != (N, C)):
        raise ConfigurationError(f"a neighbor table of shape ({N}, {C}) is required for C={C}")
    hm, wm = cfg.map_height, cfg.map_width

    pts = clamp_landmarks(lm.points, cfg.input_width, cfg.input_height)
    gx, gy = pts[:, 0] / S, pts[:, 1] / S
    grid = positive_grid(pts, S, hm, wm)
    rows, cols = grid[:, 0], grid[:, 1]
    idx = np.arange(N)

    score = np.zeros((N, hm, wm))
    score[idx, rows, cols] = 1.0
    offset = np.zeros((2 * N, hm, wm))
    offset[idx, rows, cols] = gx - cols
    offset[N + idx, rows, cols] = gy - rows

    neighbor = np.zeros((2 * C * N, hm, wm))
    if C:
        for i in range(N):
            for m, j in enumerate(table.indices[i]):
                neighbor[i * C + m, rows[i], cols[i]] = gx[j] - cols[i]
                neighbor[N * C + i * C + m, rows[i], cols[i]] = gy[j] - rows[i]
    return TargetMaps(score=score, offset=offset, neighbor=neighbor, positive_index=grid)


# --- PIP decoding ---

def _argmax_grid(score: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(score)):
        raise DecodeError("score maps contain NaN or infinite values")
    n, _, w = score.shape
    flat_idx = score.reshape(n, -1).argmax(axis=1)  # first maximum: lowest row-major index
    return flat_idx // w, flat_idx % w


def decode_pip(score: np.ndarray, offset: np.ndarray, cfg: HeadConfig) -> LandmarkSet:
    N = score.shape[0]
    if offset.shape[0] != 2 * N or offset.shape[1:] != score.shape[1:]:
        raise ShapeError(f"offset maps {offset.shape} do not match score maps {score.shape}")
    rows, cols = _argmax_grid(score)
    idx = np.arange(N)
    ox = offset[idx, rows, cols]
    oy = offset[N + idx, rows, cols]
    if not (np.all(np.isfinite(ox)) and np.all(np.isfinite(oy))):
        raise DecodeError("offset maps contain NaN or infinite values at the selected grids")
    S = cfg.stride
    return LandmarkSet(np.stack([(cols + ox) * S, (rows + oy) * S], axis=1))


def decode_pip_nrm(
    score: np.ndarray,
    offset: np.ndarray,
    neighbor: np.ndarray,
    table: NeighborTable,
    cfg: HeadConfig,
) -> LandmarkSet:
    """Each landmark averages its own prediction with the votes cast for it by the landmarks that list it as a neighbor."""
    N, C, S = score.shape[0], table.num_neighbors, cfg.stride
    if neighbor.shape[0] != 2 * C * N:
        raise ShapeError(f"neighbor maps have {neighbor.shape[0]} channels, expected {2 * C * N}")
    own = decode_pip(score, offset, cfg).points
    rows, cols = _argmax_grid(score)

    votes = own.copy()
    counts = np.ones(N)
    for j in range(N):
        for m, i in enumerate(table.indices[j]):
            nx = neighbor[j * C + m, rows[j], cols[j]]
            ny = neighbor[N * C + j * C + m, rows[j], cols[j]]
            votes[i] += ((cols[j] + nx) * S, (rows[j] + ny) * S)
            counts[i] += 1
    if not np.all(np.isfinite(votes)):
        raise DecodeError("neighbor maps contain NaN or infinite values at the selected grids")
    return LandmarkSet(votes / counts[:, None])


# --- PIP losses ---

def _sample_weights(batch: int, sample_mask: Optional[np.ndarray], dtype) -> tuple[np.ndarray, float]:
    w = np.ones(batch) if sample_mask is None else np.asarray(sample_mask, dtype=np.float64)
    if w.shape != (batch,):
        raise ShapeError(f"sample mask must have shape ({batch},), got {w.shape}")
    return w.astype(dtype), float(w.sum())


def _zero(dtype) -> Tensor:
    return Tensor(0.0, dtype=dtype)


def score_loss(pred_score: Tensor, target_score: np.ndarray, sample_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error over every score entry of the selected samples."""
    if pred_score.shape != target_score.shape:
        raise ShapeError(f"score prediction {pred_score.shape} vs target {target_score.shape}")
    dtype = pred_score.dtype
    w, n = _sample_weights(pred_score.shape[0], sample_mask, dtype)
    if n == 0:
        return _zero(dtype)
    per_entry = square(sub(pred_score, Tensor(target_score, dtype=dtype)))
    weighted = mul(per_entry, Tensor(w[:, None, None, None], dtype=dtype))
    denom = n * float(np.prod(pred_score.shape[1:]))
    return scale(tensor_sum(weighted), 1.0 / denom)


def _masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray, w: np.ndarray, denom: float) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    dtype = pred.dtype
    weight = Tensor(mask * w[:, None, None, None], dtype=dtype)
    return scale(tensor_sum(mul(absolute(sub(pred, Tensor(target, dtype=dtype))), weight)), 1.0 / denom)


def pip_loss(
    pred_score: Tensor,
    pred_offset: Tensor,
    pred_neighbor: Optional[Tensor],
    targets: Union[TargetMaps, TargetBatch],
    cfg: HeadConfig,
    sample_mask: Optional[np.ndarray] = None,
) -> LossTerms:
    """
    L = L_S + alpha * L_O + beta * L_N.

    L_S is the score MSE; L_O and L_N are L1 sums over the positive grid only,
    normalized by 2N and 2CN per sample. `sample_mask` restricts the loss to a
    subset of the batch (0/1 per sample) and renormalizes by its size.
    """
    if isinstance(targets, TargetMaps):
        targets = TargetBatch.stack([targets], cfg.num_neighbors)
    dtype = pred_score.dtype
    N, C = cfg.num_landmarks, cfg.num_neighbors
    w, n = _sample_weights(pred_score.shape[0], sample_mask, dtype)
    if n == 0:
        zero = _zero(dtype)
        return LossTerms(zero, zero, zero, zero)

    l_s = score_loss(pred_score, targets.score, sample_mask)
    l_o = _masked_l1(pred_offset, targets.offset, targets.offset_mask, w, n * 2 * N)
    if C and pred_neighbor is not None:
        l_n = _masked_l1(pred_neighbor, targets.neighbor, targets.neighbor_mask, w, n * 2 * C * N)
    else:
        l_n = _zero(dtype)
    total = l_s + scale(l_o, cfg.alpha) + scale(l_n, cfg.beta)
    return LossTerms(total, l_s, l_o, l_n)


# --- heatmap baseline ---

def gaussian_radius_for_stride(stride: int) -> float:
    """Grid-unit radius keeping radius * stride at 4 input pixels (strides 1, 2, 4 -> radii 4, 2, 1)."""
    return 4.0 / stride


def encode_gaussian(
    lm: LandmarkSet, stride: int, radius: float, input_height: int = 64, input_width: int = 64
) -> np.ndarray:
    """Gaussian heatmaps [N, H/stride, W/stride] peaking at exactly 1, truncated beyond 3 * radius."""
    if radius <= 0:
        raise ConfigurationError(f"Gaussian radius must be positive, got {radius}")
    if input_height % stride or input_width % stride:
        raise ConfigurationError(f"stride {stride} does not divide input {input_height}x{input_width}")
    hm, wm = input_height // stride, input_width // stride
    pts = clamp_landmarks(lm.points, input_width, input_height)
    grid = positive_grid(pts, stride, hm, wm)
    yy, xx = np.mgrid[0:hm, 0:wm]
    d2 = (yy[None] - grid[:, 0, None, None]) ** 2 + (xx[None] - grid[:, 1, None, None]) ** 2
    heat = np.exp(-d2 / (2.0 * radius ** 2))
    heat[d2 > (3.0 * radius) ** 2] = 0.0
    return heat


_NEIGHBOR_STEPS = ((-1, 0), (0, -1), (0, 1), (1, 0))  # row-major order


def decode_quarter(heatmaps: np.ndarray, stride: int) -> LandmarkSet:
    """Argmax grid shifted a quarter grid toward its strongest 4-neighbor; no shift when that neighbor is tied."""
    n, h, w = heatmaps.shape
    rows, cols = _argmax_grid(heatmaps)
    points = np.zeros((n, 2))
    for k in range(n):
        r, c = int(rows[k]), int(cols[k])
        candidates = [(r + dr, c + dc) for dr, dc in _NEIGHBOR_STEPS if 0 <= r + dr < h and 0 <= c + dc < w]
        dx = dy = 0.0
        if candidates:
            values = np.array([heatmaps[k, rr, cc] for rr, cc in candidates])
            best = values.max()
            winners = np.flatnonzero(values == best)
            if len(winners) == 1:
                rr, cc = candidates[winners[0]]
                dx, dy = 0.25 * (cc - c), 0.25 * (rr - r)
        points[k] = ((c + dx) * stride, (r + dy) * stride)
    return LandmarkSet(points)


def map_loss(pred_heatmaps: Tensor, target_heatmaps: np.ndarray) -> Tensor:
    if pred_heatmaps.shape != target_heatmaps.shape:
        raise ShapeError(f"heatmap prediction {pred_heatmaps.shape} vs target {target_heatmaps.shape}")
    return mean(square(sub(pred_heatmaps, Tensor(target_heatmaps, dtype=pred_heatmaps.dtype))))


def coord_loss(pred_coords: Tensor, target_coords: np.ndarray) -> Tensor:
    if pred_coords.shape != np.shape(target_coords):
        raise ShapeError(f"coordinate prediction {pred_coords.shape} vs target {np.shape(target_coords)}")
    return mean(absolute(sub(pred_coords, Tensor(target_coords, dtype=pred_coords.dtype))))
