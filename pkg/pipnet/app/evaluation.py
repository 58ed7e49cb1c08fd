"""
Metrics (NME, Point-Var, per-landmark error, grid classification accuracy),
full-dataset evaluation, and the implicit-prior experiment.
"""
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import storage
from .data import Sample, as_batch
from .exceptions import ConfigurationError, ShapeError
from .landmark_codec import LandmarkSet, positive_grid
from .networks import (
    AUX_SCORE_COARSE,
    AUX_SCORE_MID,
    HEATMAP,
    SCORE,
    NetworkGraph,
    infer,
    predict,
)
from .schemas import (
    AugmentConfig,
    EvalReport,
    EvalSettings,
    HeadKind,
    NormKind,
    PriorHeadResult,
    PriorMode,
    PriorReport,
    RunConfig,
)
from .tensor_engine import SeededRng

logger = logging.getLogger(__name__)

POINT_VAR_DISPLAY = 1e4


def normalization_distance(
    gt: LandmarkSet,
    mode: NormKind,
    image_size: tuple[int, int] = (64, 64),
    bbox: Optional[tuple[float, float, float, float]] = None,
    eyes: tuple[int, int] = (6, 9),
) -> float:
    """Inter-ocular distance, sqrt(width * height) of the crop, or the bbox diagonal."""
    if mode == NormKind.INTER_OCULAR:
        left, right = eyes
        if left == right or not (0 <= left < gt.N and 0 <= right < gt.N):
            raise ConfigurationError(f"invalid eye indices {eyes} for {gt.N} landmarks")
        d = float(np.linalg.norm(gt.points[left] - gt.points[right]))
    elif mode == NormKind.IMAGE_SIZE:
        d = math.sqrt(image_size[0] * image_size[1])
    elif mode == NormKind.DIAGONAL:
        if bbox is None:
            raise ConfigurationError("DIAGONAL normalization needs a bounding box")
        x1, y1, x2, y2 = bbox
        d = math.hypot(x2 - x1, y2 - y1)
    else:
        raise ConfigurationError(f"unknown normalization {mode}")
    if not d > 0:
        raise ConfigurationError(f"{mode.value} normalization distance is zero")
    return d


def _check_pair(pred: LandmarkSet, gt: LandmarkSet) -> None:
    if pred.N != gt.N:
        raise ShapeError(f"prediction has {pred.N} landmarks, ground truth {gt.N}")


def landmark_errors(pred: LandmarkSet, gt: LandmarkSet, norm: float) -> np.ndarray:
    """Per-landmark Euclidean error divided by `norm`, in percent."""
    _check_pair(pred, gt)
    return np.linalg.norm(pred.points - gt.points, axis=1) / norm * 100.0


def nme(pred: LandmarkSet, gt: LandmarkSet, mode: NormKind = NormKind.INTER_OCULAR, **norm_kwargs) -> float:
    """Mean normalized error in percent; `norm_kwargs` go to `normalization_distance`."""
    return float(landmark_errors(pred, gt, normalization_distance(gt, mode, **norm_kwargs)).mean())


def point_var(pred: LandmarkSet, gt: LandmarkSet, mode: NormKind = NormKind.INTER_OCULAR, **norm_kwargs) -> float:
    """Unbiased variance of the normalized difference vectors, per axis, averaged over x and y."""
    _check_pair(pred, gt)
    if gt.N < 2:
        raise ShapeError("Point-Var needs at least two landmarks")
    diff = (pred.points - gt.points) / normalization_distance(gt, mode, **norm_kwargs)
    return float(np.var(diff, axis=0, ddof=1).mean())


def _norm_kwargs(sample: Sample, settings: EvalSettings) -> dict:
    return {
        "image_size": (sample.width, sample.height),
        "bbox": sample.bbox,
        "eyes": (settings.left_eye, settings.right_eye),
    }


def per_landmark_errors(preds: Sequence[LandmarkSet], samples: Sequence[Sample], settings: EvalSettings) -> np.ndarray:
    """[len(samples), N] normalized errors in percent."""
    if len(preds) != len(samples):
        raise ShapeError(f"{len(preds)} predictions for {len(samples)} samples")
    return np.stack([
        landmark_errors(p, s.landmarks, normalization_distance(s.landmarks, settings.norm, **_norm_kwargs(s, settings)))
        for p, s in zip(preds, samples)
    ])


def _score_tap(net: NetworkGraph, stride: int) -> str:
    for tap in (SCORE, AUX_SCORE_MID, AUX_SCORE_COARSE, HEATMAP):
        if tap in net.branches and net.tap_strides.get(tap) == stride:
            return tap
    available = {t: net.tap_strides[t] for t in (SCORE, AUX_SCORE_MID, AUX_SCORE_COARSE, HEATMAP) if t in net.branches}
    raise ConfigurationError(f"no score tap at stride {stride}; available: {available}")


def grid_accuracy(net: NetworkGraph, samples: Sequence[Sample], stride: int) -> float:
    """
    Fraction of (sample, landmark) pairs whose argmax grid is the ground-truth
    grid at `stride`. Only strides of an existing score tap are supported: the
    main score map, an auxiliary score tap or a MAP heatmap. Any other stride
    raises ConfigurationError listing the available ones.
    """
    if not samples:
        raise ConfigurationError("grid accuracy needs at least one sample")
    tap = _score_tap(net, stride)
    scores = infer(net, as_batch(samples))[tap]
    _, _, hm, wm = scores.shape
    hits = total = 0
    for s, score in zip(samples, scores):
        pts = np.clip(s.landmarks.points, 0.0, [s.width - 1e-3, s.height - 1e-3])
        truth = positive_grid(pts, stride, hm, wm)
        flat = score.reshape(score.shape[0], -1).argmax(axis=1)
        hits += int(np.sum((flat // wm == truth[:, 0]) & (flat % wm == truth[:, 1])))
        total += len(truth)
    return hits / total


def evaluate(net: NetworkGraph, samples: Sequence[Sample], settings: Optional[EvalSettings] = None,
             preds: Optional[Sequence[LandmarkSet]] = None) -> tuple[EvalReport, list[LandmarkSet]]:
    """Predict every sample and summarize NME, Point-Var, per-landmark and per-subset errors."""
    settings = settings or EvalSettings()
    if not samples:
        raise ConfigurationError("cannot evaluate an empty dataset")
    preds = list(preds) if preds is not None else predict(net, as_batch(samples))
    errors = per_landmark_errors(preds, samples, settings)
    per_sample = errors.mean(axis=1)
    variances = [point_var(p, s.landmarks, settings.norm, **_norm_kwargs(s, settings)) for p, s in zip(preds, samples)]

    subsets: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        subsets.setdefault(f"domain:{s.domain_tag}", []).append(i)
        for attr in s.attributes:
            subsets.setdefault(attr, []).append(i)

    accuracy = None
    if net.head_kind in (HeadKind.PIP, HeadKind.PIP_NRM):
        accuracy = grid_accuracy(net, samples, net.stride)

    pv = float(np.mean(variances))
    report = EvalReport(
        nme=float(per_sample.mean()),
        point_var=pv,
        point_var_e4=pv * POINT_VAR_DISPLAY,
        grid_accuracy=accuracy,
        per_landmark=errors.mean(axis=0).tolist(),
        sample_count=len(samples),
        norm=settings.norm,
        subsets={name: float(per_sample[idx].mean()) for name, idx in sorted(subsets.items())},
    )
    logger.info(f"Evaluated {len(samples)} samples: NME {report.nme:.3f}%, Point-Var {report.point_var_e4:.3f}e-4")
    return report, preds


def dataset_nme(net: NetworkGraph, samples: Sequence[Sample], settings: Optional[EvalSettings] = None) -> float:
    settings = settings or EvalSettings()
    preds = predict(net, as_batch(samples))
    return float(per_landmark_errors(preds, samples, settings).mean())


# --- implicit prior ---

def _blank_like(samples: Sequence[Sample], value: float = 0.0) -> list[Sample]:
    return [replace(s, image=np.full_like(s.image, value)) for s in samples]


def nonface_images(count: int, size: int, seed: int) -> np.ndarray:
    """Noise and stripe textures containing no face."""
    rng = SeededRng(seed, 0x6E6F6E)
    yy, xx = np.mgrid[0:size, 0:size] / size
    images = []
    for k in range(count):
        if k % 2 == 0:
            img = rng.uniform(0.0, 1.0, size=(size, size))
        else:
            freq = rng.uniform(2.0, 8.0)
            angle = rng.uniform(0.0, math.pi)
            img = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (math.cos(angle) * xx + math.sin(angle) * yy))
        images.append(img[None])
    return np.stack(images).astype(np.float32)


def implicit_prior_experiment(
    mode: PriorMode,
    cfg: RunConfig,
    train_samples: Sequence[Sample],
    out_dir=None,
    nets: Optional[dict[HeadKind, NetworkGraph]] = None,
) -> PriorReport:
    """
    BLACK_TRAIN: train each head on all-black images carrying the real labels,
    then predict on black images. NONFACE_TEST: run normally trained models on
    noise and stripe textures. Either way report how far the predictions sit
    from the training mean shape.
    """
    from .training import build_network, train_supervised

    size = cfg.backbone.input_size
    mean_points = np.mean([s.landmarks.points for s in train_samples], axis=0)
    mean_lm = LandmarkSet(mean_points)
    count = cfg.prior.num_test_images
    if mode == PriorMode.BLACK_TRAIN:
        fit_samples = _blank_like(train_samples)
        test_images = np.zeros((count, 1, size, size), dtype=np.float32)
        augment_cfg = AugmentConfig.disabled()
    else:
        fit_samples = list(train_samples)
        test_images = nonface_images(count, size, cfg.seed)
        augment_cfg = cfg.augment

    results = []
    for kind in cfg.prior.head_kinds:
        net = (nets or {}).get(kind)
        if net is None or mode == PriorMode.BLACK_TRAIN:
            net = build_network(cfg, kind, fit_samples)
            net, _ = train_supervised(net, kind, fit_samples, cfg.schedule, augment_cfg)
        preds = predict(net, test_images)
        distance = float(np.mean([nme(p, mean_lm, NormKind.IMAGE_SIZE, image_size=(size, size)) for p in preds]))
        identical = all(np.array_equal(p.points, preds[0].points) for p in preds)
        overlays = []
        if out_dir is not None:
            for i, (image, p) in enumerate(zip(test_images, preds)):
                path = storage.save_overlay(image, Path(out_dir) / f"prior_{mode.value.lower()}_{kind.value.lower()}_{i}.png",
                                            pred=p)
                overlays.append(str(path))
        logger.info(f"Implicit prior {mode.value} / {kind.value}: {distance:.3f}% from the mean shape")
        results.append(PriorHeadResult(
            head_kind=kind,
            nme_to_mean_shape=distance,
            identical_predictions=identical,
            predictions=[[tuple(map(float, pt)) for pt in p.points] for p in preds],
            overlays=overlays,
        ))
    return PriorReport(mode=mode, heads=results)
