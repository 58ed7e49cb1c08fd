"""
Self-training with curriculum.

After supervised training on the labeled set, every round relabels the
unlabeled pool with the current model and trains on the union. Labeled
samples always get the full PIP loss; pseudo-labeled samples get the round's
task: score-only classification on the coarse (T1) or middle (T2) auxiliary
tap, or the full loss (T3). A task list of only T3 is plain self-training.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import landmark_codec as codec
from .data import Sample, as_batch
from .exceptions import ConfigurationError, DecodeError
from .networks import AUX_SCORE_COARSE, AUX_SCORE_MID, NEIGHBOR, OFFSET, SCORE, NetworkGraph, decode_outputs, infer
from .schemas import (
    AugmentConfig,
    CurriculumSchedule,
    EvalSettings,
    HeadKind,
    StcRoundSummary,
    TaskId,
    TrainReport,
    TrainSchedule,
)
from .tensor_engine import Tensor, add, scale
from .training import encode_batch, fit, supervised_loss, train_supervised

logger = logging.getLogger(__name__)

TASK_TAPS = {TaskId.T1: AUX_SCORE_COARSE, TaskId.T2: AUX_SCORE_MID}


@dataclass(eq=False)
class PseudoSet:
    samples: list[Sample] = field(default_factory=list)
    round_index: int = 0
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)


def generate_pseudo_labels(net: NetworkGraph, unlabeled: Sequence[Sample], round_index: int = 0) -> PseudoSet:
    """Decode every unlabeled image with the full head; samples that fail to decode are skipped."""
    pseudo = PseudoSet(round_index=round_index)
    if not unlabeled:
        return pseudo
    outputs = infer(net, as_batch(unlabeled))
    for i, sample in enumerate(unlabeled):
        try:
            lm = decode_outputs(net, outputs, i)
        except DecodeError as e:
            pseudo.skipped += 1
            logger.warning(f"Pseudo-labeling skipped sample {i}: {e}")
            continue
        pseudo.samples.append(replace(sample, landmarks=lm, is_labeled=False))
    if pseudo.skipped:
        logger.info(f"Round {round_index}: {pseudo.skipped} of {len(unlabeled)} pseudo-labels skipped.")
    return pseudo


def _weighted(terms: Sequence[tuple[Tensor, float]]) -> Tensor:
    out = None
    for t, w in terms:
        part = scale(t, w)
        out = part if out is None else add(out, part)
    return out


def task_loss(task: TaskId, net: NetworkGraph, taps: dict, samples: Sequence[Sample]) -> codec.LossTerms:
    """
    Labeled samples contribute the full loss; pseudo-labeled samples the task's
    loss. The two parts are averaged with weights proportional to their counts.
    """
    labeled = np.array([s.is_labeled for s in samples], dtype=np.float64)
    pseudo = 1.0 - labeled
    n_l, n_p = float(labeled.sum()), float(pseudo.sum())
    n = n_l + n_p
    cfg = net.head_cfg

    targets = encode_batch(net, samples)
    lab = codec.pip_loss(taps[SCORE], taps[OFFSET], taps.get(NEIGHBOR), targets, cfg, labeled)
    if task == TaskId.T3:
        pse = codec.pip_loss(taps[SCORE], taps[OFFSET], taps.get(NEIGHBOR), targets, cfg, pseudo)
    else:
        tap = TASK_TAPS[task]
        if tap not in taps:
            raise ConfigurationError(f"task {task.value} needs the {tap} tap; attach the auxiliary heads first")
        stride = net.tap_strides[tap]
        target = np.stack([codec.encode_score(s.landmarks, stride, cfg.input_height, cfg.input_width) for s in samples])
        l_s = codec.score_loss(taps[tap], target, pseudo)
        zero = Tensor(0.0, dtype=l_s.dtype)
        pse = codec.LossTerms(l_s, l_s, zero, zero)

    w_l, w_p = n_l / n, n_p / n
    return codec.LossTerms(*(
        _weighted([(a, w_l), (b, w_p)]) for a, b in zip(lab, pse)
    ))


def _round_schedule(sched: TrainSchedule, curriculum: CurriculumSchedule) -> TrainSchedule:
    epochs = curriculum.epochs_per_round or sched.epochs
    return sched.model_copy(update={"epochs": epochs, "decay_epochs": [d for d in sched.decay_epochs if d < epochs]})


def run_stc(
    net: NetworkGraph,
    labeled: Sequence[Sample],
    unlabeled: Sequence[Sample],
    curriculum: CurriculumSchedule,
    sched: TrainSchedule,
    augment_cfg: AugmentConfig,
    flip_map: Optional[np.ndarray] = None,
    val_set: Optional[Sequence[Sample]] = None,
    eval_settings: Optional[EvalSettings] = None,
    initial_training: bool = True,
    on_pseudo_labels: Optional[Callable[[PseudoSet], None]] = None,
) -> tuple[NetworkGraph, list[TrainReport], list[StcRoundSummary]]:
    """
    Round 0 trains on the labeled data alone; round k >= 1 runs task k of the
    curriculum on labeled + freshly pseudo-labeled data. The auxiliary taps
    play no part in the final model's predictions. `on_pseudo_labels`, when
    given, receives each round's PseudoSet before that round trains.
    """
    if net.head_kind not in (HeadKind.PIP, HeadKind.PIP_NRM):
        raise ConfigurationError("curriculum self-training needs a PIP or PIP_NRM head")
    if not net.with_aux and any(t != TaskId.T3 for t in curriculum.tasks):
        raise ConfigurationError("tasks T1/T2 need the auxiliary heads; call attach_aux_heads first")

    reports: list[TrainReport] = []
    summaries: list[StcRoundSummary] = []
    if initial_training:
        _, report = train_supervised(net, net.head_kind, labeled, sched, augment_cfg, val_set=val_set,
                                     eval_settings=eval_settings, flip_map=flip_map, round_index=0)
        reports.append(report)

    round_sched = _round_schedule(sched, curriculum)
    for k, task in enumerate(curriculum.tasks, start=1):
        pseudo = generate_pseudo_labels(net, unlabeled, round_index=k)
        if on_pseudo_labels is not None:
            on_pseudo_labels(pseudo)
        union = list(labeled) + pseudo.samples
        if pseudo.samples:
            def loss_fn(n, taps, batch, task=task):
                return task_loss(task, n, taps, batch)
        else:
            loss_fn = supervised_loss
        logger.info(f"STC round {k}/{len(curriculum.tasks)} [{task.value}]: "
                    f"{len(labeled)} labeled + {len(pseudo)} pseudo-labeled samples")
        report = fit(net, union, round_sched, augment_cfg, loss_fn, flip_map=flip_map, val_set=val_set,
                     eval_settings=eval_settings, round_index=k, task=task)
        reports.append(report)
        summaries.append(StcRoundSummary(
            round=k, task=task, pseudo_labels=len(pseudo), skipped=pseudo.skipped,
            final_loss=report.records[-1].loss,
        ))
    return net, reports, summaries
