from dataclasses import replace

import numpy as np
import pytest

from app import landmark_codec as codec
from app.data import generate_domain
from app.evaluation import dataset_nme, per_landmark_errors
from app.exceptions import ConfigurationError
from app.networks import AUX_SCORE_COARSE, AUX_SCORE_MID, NEIGHBOR, OFFSET, SCORE
from app.schemas import AugmentConfig, CurriculumSchedule, DomainStyle, EvalSettings, HeadKind, SynthConfig, TaskId
from app.stc import generate_pseudo_labels, run_stc, task_loss
from app.tensor_engine import Tensor
from app.training import build_network, encode_batch, fit, supervised_loss, train_supervised


@pytest.fixture
def unlabeled():
    return generate_domain(SynthConfig(), DomainStyle.B, 6, seed=11, split=1, is_labeled=False)


@pytest.fixture
def aux_net(tiny_run_config, face_samples):
    return build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples, with_aux=True)


def _taps(net, samples):
    return net.forward(Tensor(np.stack([s.image for s in samples])))


def _params(net):
    return {name: p.data.copy() for name, p in net.named_parameters().items()}


# --- pseudo-labels ---

def test_empty_pool_gives_empty_pseudo_set(aux_net):
    pseudo = generate_pseudo_labels(aux_net, [], round_index=2)
    assert len(pseudo) == 0
    assert pseudo.round_index == 2


def test_pseudo_labels_are_deterministic_and_unlabeled(aux_net, unlabeled):
    a = generate_pseudo_labels(aux_net, unlabeled)
    b = generate_pseudo_labels(aux_net, unlabeled)
    assert len(a) == len(unlabeled) and a.skipped == 0
    for x, y in zip(a.samples, b.samples):
        np.testing.assert_array_equal(x.landmarks.points, y.landmarks.points)
        assert not x.is_labeled


def test_pseudo_labels_of_training_images_match_training_error(aux_net, face_samples):
    labeled_pool = [replace(s, is_labeled=False) for s in face_samples]
    pseudo = generate_pseudo_labels(aux_net, labeled_pool)
    settings = EvalSettings()
    errors = per_landmark_errors([p.landmarks for p in pseudo.samples], face_samples, settings)
    assert errors.mean() == pytest.approx(dataset_nme(aux_net, face_samples, settings))


# --- task losses ---

def test_coarse_task_with_perfect_scores_is_zero(aux_net, unlabeled):
    batch = generate_pseudo_labels(aux_net, unlabeled[:3]).samples
    taps = _taps(aux_net, batch)
    cfg = aux_net.head_cfg
    stride = aux_net.tap_strides[AUX_SCORE_COARSE]
    target = np.stack([codec.encode_score(s.landmarks, stride, cfg.input_height, cfg.input_width) for s in batch])
    taps[AUX_SCORE_COARSE] = Tensor(target)
    terms = task_loss(TaskId.T1, aux_net, taps, batch)
    assert [t.item() for t in terms] == [0.0, 0.0, 0.0, 0.0]


def test_mid_task_reads_the_mid_tap(aux_net, unlabeled):
    batch = generate_pseudo_labels(aux_net, unlabeled[:2]).samples
    taps = _taps(aux_net, batch)
    taps[AUX_SCORE_MID] = Tensor(np.zeros(taps[AUX_SCORE_MID].shape))
    terms = task_loss(TaskId.T2, aux_net, taps, batch)
    # every landmark is a single one-hot cell on the 4x4 map
    assert terms.score.item() == pytest.approx(1 / 16)
    assert terms.total.item() == terms.score.item()


def test_full_task_equals_pip_loss(aux_net, face_samples, unlabeled):
    batch = face_samples[:3] + generate_pseudo_labels(aux_net, unlabeled[:2]).samples
    taps = _taps(aux_net, batch)
    terms = task_loss(TaskId.T3, aux_net, taps, batch)
    expected = codec.pip_loss(taps[SCORE], taps[OFFSET], taps[NEIGHBOR], encode_batch(aux_net, batch), aux_net.head_cfg)
    for got, want in zip(terms, expected):
        assert got.item() == pytest.approx(want.item(), rel=1e-5)


def test_labeled_samples_keep_the_full_loss_under_score_tasks(aux_net, face_samples, unlabeled):
    pseudo = generate_pseudo_labels(aux_net, unlabeled[:2]).samples
    batch = face_samples[:2] + pseudo
    taps = _taps(aux_net, batch)
    mixed = task_loss(TaskId.T1, aux_net, taps, batch)
    labeled_only = supervised_loss(aux_net, taps, batch, sample_mask=np.array([1.0, 1.0, 0.0, 0.0]))
    assert mixed.offset.item() == pytest.approx(0.5 * labeled_only.offset.item(), rel=1e-5)


def test_score_tasks_need_aux_heads(tiny_run_config, face_samples, unlabeled):
    net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples, with_aux=False)
    batch = generate_pseudo_labels(net, unlabeled[:2]).samples
    with pytest.raises(ConfigurationError):
        task_loss(TaskId.T1, net, _taps(net, batch), batch)


# --- curriculum ---

def test_run_stc_validates_network(tiny_run_config, face_samples, unlabeled):
    sched = tiny_run_config.schedule
    coord = build_network(tiny_run_config, HeadKind.COORD, face_samples)
    with pytest.raises(ConfigurationError):
        run_stc(coord, face_samples, unlabeled, CurriculumSchedule.self_training(1), sched, AugmentConfig.disabled())
    plain = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples, with_aux=False)
    with pytest.raises(ConfigurationError):
        run_stc(plain, face_samples, unlabeled, CurriculumSchedule(), sched, AugmentConfig.disabled())


def test_single_full_round_without_pool_is_continued_supervised_training(tiny_run_config, face_samples):
    sched = tiny_run_config.schedule
    aug = tiny_run_config.augment
    curriculum = CurriculumSchedule(tasks=[TaskId.T3])

    stc_net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples)
    stc_net, reports, summaries = run_stc(stc_net, face_samples, [], curriculum, sched, aug)

    ref_net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples)
    train_supervised(ref_net, HeadKind.PIP_NRM, face_samples, sched, aug)
    ref_report = fit(ref_net, face_samples, sched, aug, supervised_loss, round_index=1)

    assert reports[-1] == ref_report
    assert summaries[0].pseudo_labels == 0
    ref = _params(ref_net)
    for name, value in _params(stc_net).items():
        np.testing.assert_array_equal(value, ref[name])


def test_curriculum_rounds_follow_task_list(tiny_run_config, face_samples, unlabeled):
    net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples, with_aux=True)
    _, reports, summaries = run_stc(net, face_samples, unlabeled, tiny_run_config.curriculum,
                                    tiny_run_config.schedule, tiny_run_config.augment)
    assert [s.task for s in summaries] == [TaskId.T1, TaskId.T2, TaskId.T3]
    assert [s.round for s in summaries] == [1, 2, 3]
    assert all(s.pseudo_labels == len(unlabeled) for s in summaries)
    assert len(reports) == 4
    assert [r.records[0].task for r in reports[1:]] == [TaskId.T1, TaskId.T2, TaskId.T3]
    assert all(len(r.records) == 1 for r in reports[1:])
    assert all(np.isfinite(s.final_loss) for s in summaries)


def test_run_stc_is_deterministic(tiny_run_config, face_samples, unlabeled):
    results = []
    for _ in range(2):
        net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples, with_aux=True)
        _, reports, summaries = run_stc(net, face_samples, unlabeled, tiny_run_config.curriculum,
                                        tiny_run_config.schedule, tiny_run_config.augment)
        results.append((reports, summaries, _params(net)))
    (r1, s1, p1), (r2, s2, p2) = results
    assert r1 == r2 and s1 == s2
    for name in p1:
        np.testing.assert_array_equal(p1[name], p2[name])


def test_every_round_hands_its_pseudo_labels_to_the_callback(tiny_run_config, face_samples, unlabeled):
    net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples, with_aux=True)
    seen = []
    _, _, summaries = run_stc(net, face_samples, unlabeled, tiny_run_config.curriculum,
                              tiny_run_config.schedule, tiny_run_config.augment, on_pseudo_labels=seen.append)
    assert [p.round_index for p in seen] == [1, 2, 3]
    assert [len(p) for p in seen] == [s.pseudo_labels for s in summaries]
    assert all(not s.is_labeled for p in seen for s in p.samples)
