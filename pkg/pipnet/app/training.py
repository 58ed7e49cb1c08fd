"""
Supervised training: loss coefficients per stride, the step learning-rate
schedule, network construction from a run configuration, and the Adam
mini-batch loop shared with curriculum self-training.
"""
import logging
import time
from typing import Callable, Optional, Sequence

import numpy as np

from . import config
from . import landmark_codec as codec
from .data import Sample, as_batch, augment, default_flip_map
from .evaluation import dataset_nme
from .exceptions import ConfigurationError, NonFiniteError, TrainingDivergedError
from .networks import COORDS, HEATMAP, NEIGHBOR, OFFSET, SCORE, NetworkGraph, build_model
from .schemas import (
    AugmentConfig,
    EpochRecord,
    EvalSettings,
    HeadConfig,
    HeadKind,
    HeadSettings,
    RunConfig,
    TaskId,
    TrainReport,
    TrainSchedule,
)
from .tensor_engine import Adam, SeededRng, Tape, Tensor, backward

logger = logging.getLogger(__name__)

# reference input size of the stride ladder below
LADDER_INPUT_SIZE = 256
COEFFICIENT_LADDER = {16: 0.02, 32: 0.1, 64: 0.125, 128: 0.25}

SHUFFLE_STREAM = 0x736875
AUGMENT_STREAM = 0x617567

LossFn = Callable[[NetworkGraph, dict, Sequence[Sample]], codec.LossTerms]


def coefficient_table(stride: int, input_size: int = 64) -> tuple[float, float]:
    """(alpha, beta) for a stride, after rescaling it to a 256-pixel input."""
    scaled = stride * LADDER_INPUT_SIZE / input_size
    if scaled not in COEFFICIENT_LADDER:
        supported = sorted(int(s * input_size / LADDER_INPUT_SIZE) for s in COEFFICIENT_LADDER)
        raise ConfigurationError(f"no loss coefficients for stride {stride} at input {input_size}; supported: {supported}")
    value = COEFFICIENT_LADDER[int(scaled)]
    return value, value


def lr_schedule(epoch: int, sched: TrainSchedule) -> float:
    passed = sum(1 for d in sched.decay_epochs if epoch >= d)
    return sched.lr / sched.decay_factor ** passed


# --- construction ---

def make_head_config(head: HeadSettings, stride: int, num_landmarks: int, input_size: int) -> HeadConfig:
    if head.alpha is None or head.beta is None:
        alpha, beta = coefficient_table(stride, input_size)
        alpha = head.alpha if head.alpha is not None else alpha
        beta = head.beta if head.beta is not None else beta
    else:
        alpha, beta = head.alpha, head.beta
    num_neighbors = head.num_neighbors if head.kind == HeadKind.PIP_NRM else 0
    return HeadConfig(num_landmarks=num_landmarks, num_neighbors=num_neighbors, stride=stride,
                      input_height=input_size, input_width=input_size, alpha=alpha, beta=beta)


def build_network(cfg: RunConfig, kind: HeadKind, train_samples: Sequence[Sample],
                  with_aux: Optional[bool] = None) -> NetworkGraph:
    """Backbone + head from a run configuration; the neighbor table comes from the training mean shape."""
    if not train_samples:
        raise ConfigurationError("a network needs at least one training sample")
    head = cfg.head.model_copy(update={"kind": kind})
    N = train_samples[0].landmarks.N
    size = cfg.backbone.input_size
    stride = cfg.backbone.stride
    try:
        head_cfg = make_head_config(head, stride, N, size)
    except ConfigurationError:
        if kind not in (HeadKind.MAP, HeadKind.COORD):
            raise
        # MAP and COORD never read the PIP coefficients
        head_cfg = HeadConfig(num_landmarks=N, stride=stride, input_height=size, input_width=size)
    table = None
    if kind == HeadKind.PIP_NRM:
        mean = codec.mean_shape((s.landmarks, s.bbox) for s in train_samples)
        table = codec.build_neighbor_table(mean, head_cfg.num_neighbors)
    aux = head.with_aux if with_aux is None else with_aux
    return build_model(cfg.backbone, kind, head_cfg, cfg.seed, table=table,
                       map_stride=head.map_stride if kind == HeadKind.MAP else None, with_aux=aux)


# --- losses ---

def _zero_like(t: Tensor) -> Tensor:
    return Tensor(0.0, dtype=t.dtype)


def encode_batch(net: NetworkGraph, samples: Sequence[Sample]) -> codec.TargetBatch:
    cfg = net.head_cfg
    maps = [codec.encode_targets(s.landmarks, cfg, net.neighbor_table) for s in samples]
    return codec.TargetBatch.stack(maps, cfg.num_neighbors)


def supervised_loss(net: NetworkGraph, taps: dict, samples: Sequence[Sample],
                    sample_mask: Optional[np.ndarray] = None) -> codec.LossTerms:
    """The head's own loss: PIP(+NRM) terms, heatmap L2 or coordinate L1."""
    kind = net.head_kind
    cfg = net.head_cfg
    if kind in (HeadKind.PIP, HeadKind.PIP_NRM):
        return codec.pip_loss(taps[SCORE], taps[OFFSET], taps.get(NEIGHBOR), encode_batch(net, samples), cfg,
                              sample_mask)
    if sample_mask is not None:
        raise ConfigurationError(f"{kind.value} heads do not support per-sample masks")
    if kind == HeadKind.MAP:
        radius = codec.gaussian_radius_for_stride(net.map_stride)
        target = np.stack([
            codec.encode_gaussian(s.landmarks, net.map_stride, radius, cfg.input_height, cfg.input_width)
            for s in samples
        ])
        loss = codec.map_loss(taps[HEATMAP], target)
    elif kind == HeadKind.COORD:
        target = np.stack([
            codec.landmarks_to_coords(
                codec.LandmarkSet(codec.clamp_landmarks(s.landmarks.points, cfg.input_width, cfg.input_height)),
                cfg.input_width, cfg.input_height)
            for s in samples
        ])
        loss = codec.coord_loss(taps[COORDS], target)
    else:
        raise ConfigurationError("network has no head attached")
    zero = _zero_like(loss)
    return codec.LossTerms(loss, loss, zero, zero)


# --- loop ---

def _elapsed(start: float) -> float:
    return time.perf_counter() - start if config.record_timing() else 0.0


def fit(
    net: NetworkGraph,
    samples: Sequence[Sample],
    sched: TrainSchedule,
    augment_cfg: AugmentConfig,
    loss_fn: LossFn,
    flip_map: Optional[np.ndarray] = None,
    val_set: Optional[Sequence[Sample]] = None,
    eval_settings: Optional[EvalSettings] = None,
    round_index: int = 0,
    task: TaskId = TaskId.T3,
) -> TrainReport:
    """
    Adam over shuffled mini-batches for `sched.epochs` epochs. Shuffling and
    augmentation draw from streams keyed by (seed, round, epoch), so a run is
    reproducible regardless of what ran before it.
    """
    if not samples:
        raise ConfigurationError("training needs a nonempty dataset")
    if flip_map is None and augment_cfg.flip_prob > 0:
        flip_map = default_flip_map(samples[0].landmarks.N)
    if flip_map is None:
        flip_map = np.arange(samples[0].landmarks.N)

    params = net.named_parameters()
    optimizer = Adam(params, lr=sched.lr)
    report = TrainReport(head_kind=net.head_kind)
    n = len(samples)

    for epoch in range(sched.epochs):
        start = time.perf_counter()
        optimizer.state.lr = lr_schedule(epoch, sched)
        order = SeededRng(sched.seed, SHUFFLE_STREAM, round_index, epoch).permutation(n)
        aug_rng = SeededRng(sched.seed, AUGMENT_STREAM, round_index, epoch)
        sums = np.zeros(4)

        for b, lo in enumerate(range(0, n, sched.batch_size)):
            idx = order[lo:lo + sched.batch_size]
            batch = [augment(samples[i], augment_cfg, aug_rng.spawn(int(i)), flip_map) for i in idx]
            with Tape() as tape:
                taps = net.forward(Tensor(as_batch(batch), dtype=net.dtype))
                terms = loss_fn(net, taps, batch)
            value = terms.total.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, b)
            optimizer.zero_grad()
            backward(terms.total, tape, inputs=list(params.values()))
            try:
                optimizer.step()
            except NonFiniteError as e:
                raise TrainingDivergedError(epoch, b, str(e)) from e
            sums += len(idx) * np.array([value, terms.score.item(), terms.offset.item(), terms.neighbor.item()])
            logger.debug(f"round {round_index} epoch {epoch} batch {b}: L={value:.6f}")

        means = sums / n
        val_nme = dataset_nme(net, val_set, eval_settings) if val_set else None
        record = EpochRecord(
            epoch=epoch, loss=means[0], loss_score=means[1], loss_offset=means[2], loss_neighbor=means[3],
            val_nme=val_nme, seconds=_elapsed(start), round=round_index, task=task,
        )
        report.records.append(record)
        logger.info(
            f"round {round_index} [{task.value}] epoch {epoch + 1}/{sched.epochs}: "
            f"L={record.loss:.5f} L_S={record.loss_score:.5f} L_O={record.loss_offset:.5f} "
            f"L_N={record.loss_neighbor:.5f}" + (f" val NME={val_nme:.3f}%" if val_nme is not None else "")
        )
    return report


def train_supervised(
    net: NetworkGraph,
    head_kind: HeadKind,
    dataset: Sequence[Sample],
    sched: TrainSchedule,
    augment_cfg: AugmentConfig,
    val_set: Optional[Sequence[Sample]] = None,
    eval_settings: Optional[EvalSettings] = None,
    flip_map: Optional[np.ndarray] = None,
    round_index: int = 0,
) -> tuple[NetworkGraph, TrainReport]:
    if net.head_kind != head_kind:
        raise ConfigurationError(f"network carries a {net.head_kind} head, not {head_kind.value}")
    if not dataset:
        raise ConfigurationError("training needs a nonempty dataset")
    unlabeled = sum(1 for s in dataset if not s.is_labeled)
    if unlabeled:
        raise ConfigurationError(f"supervised training got {unlabeled} unlabeled samples")
    report = fit(net, dataset, sched, augment_cfg, supervised_loss, flip_map=flip_map, val_set=val_set,
                 eval_settings=eval_settings, round_index=round_index)
    return net, report
