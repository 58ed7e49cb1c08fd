import numpy as np
import pytest

from app import landmark_codec as codec
from app import training
from app.data import generate_domain
from app.exceptions import ConfigurationError, TrainingDivergedError
from app.networks import SCORE
from app.schemas import AugmentConfig, DomainStyle, HeadKind, SynthConfig, TrainSchedule
from app.tensor_engine import Tensor
from app.training import (
    build_network,
    coefficient_table,
    fit,
    lr_schedule,
    make_head_config,
    supervised_loss,
    train_supervised,
)


@pytest.fixture
def short_schedule():
    return TrainSchedule(epochs=2, decay_epochs=[1], batch_size=4, lr=1e-3, seed=3)


def _params(net):
    return {name: p.data.copy() for name, p in net.named_parameters().items()}


# --- coefficients and schedule ---

@pytest.mark.parametrize("stride,input_size,expected", [
    (32, 256, 0.1), (128, 256, 0.25), (16, 256, 0.02), (64, 256, 0.125), (8, 64, 0.1), (4, 64, 0.02),
])
def test_coefficient_table(stride, input_size, expected):
    assert coefficient_table(stride, input_size) == (expected, expected)


def test_coefficient_table_unknown_stride():
    with pytest.raises(ConfigurationError):
        coefficient_table(2, 64)


def test_lr_schedule_steps():
    sched = TrainSchedule.full_length()
    assert lr_schedule(0, sched) == pytest.approx(1e-4)
    assert lr_schedule(29, sched) == pytest.approx(1e-4)
    assert lr_schedule(30, sched) == pytest.approx(1e-5)
    assert lr_schedule(59, sched) == pytest.approx(1e-6)


def test_head_config_overrides(tiny_run_config):
    head = tiny_run_config.head.model_copy(update={"alpha": 0.5})
    cfg = make_head_config(head, 8, 16, 64)
    assert (cfg.alpha, cfg.beta) == (0.5, 0.1)
    assert cfg.num_neighbors == 2
    plain = make_head_config(head.model_copy(update={"kind": HeadKind.PIP}), 8, 16, 64)
    assert plain.num_neighbors == 0


# --- construction ---

def test_build_network_derives_neighbor_table(tiny_run_config, face_samples):
    net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples)
    assert net.neighbor_table.indices.shape == (16, 2)
    mean = codec.mean_shape((s.landmarks, s.bbox) for s in face_samples)
    assert net.neighbor_table.tolist() == codec.build_neighbor_table(mean, 2).tolist()


def test_build_network_baselines_tolerate_unlisted_strides(tiny_run_config, face_samples):
    cfg = tiny_run_config.model_copy(update={
        "backbone": tiny_run_config.backbone.model_copy(update={"widths": [4]}),
    })
    net = build_network(cfg, HeadKind.MAP, face_samples)
    assert net.stride == 2
    with pytest.raises(ConfigurationError):
        build_network(cfg, HeadKind.PIP, face_samples)


# --- losses ---

def test_swapping_coefficients_only_changes_total(tiny_run_config, face_samples):
    net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples)
    batch = face_samples[:4]
    taps = net.forward(Tensor(np.stack([s.image for s in batch])))
    net.head_cfg = net.head_cfg.model_copy(update={"alpha": 0.1, "beta": 0.3})
    a = supervised_loss(net, taps, batch)
    net.head_cfg = net.head_cfg.model_copy(update={"alpha": 0.3, "beta": 0.1})
    b = supervised_loss(net, taps, batch)
    for x, y in zip(a[1:], b[1:]):
        assert x.item() == y.item()
    assert a.total.item() != pytest.approx(b.total.item())


def test_baseline_losses_have_no_offset_terms(tiny_run_config, face_samples):
    for kind in (HeadKind.MAP, HeadKind.COORD):
        net = build_network(tiny_run_config, kind, face_samples)
        taps = net.forward(Tensor(np.stack([s.image for s in face_samples[:2]])))
        terms = supervised_loss(net, taps, face_samples[:2])
        assert terms.total.item() == terms.score.item() > 0
        assert terms.offset.item() == terms.neighbor.item() == 0.0
        with pytest.raises(ConfigurationError):
            supervised_loss(net, taps, face_samples[:2], sample_mask=np.ones(2))


# --- training loop ---

def test_zero_learning_rate_leaves_parameters_unchanged(tiny_run_config, face_samples):
    net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples)
    before = _params(net)
    sched = TrainSchedule(epochs=2, decay_epochs=[], batch_size=4, lr=0.0)
    _, report = train_supervised(net, HeadKind.PIP_NRM, face_samples, sched, AugmentConfig())
    assert len(report.records) == 2
    for name, value in _params(net).items():
        np.testing.assert_array_equal(value, before[name])


def test_same_seed_gives_identical_runs(tiny_run_config, face_samples, short_schedule):
    runs = []
    for _ in range(2):
        net = build_network(tiny_run_config, HeadKind.PIP_NRM, face_samples)
        _, report = train_supervised(net, HeadKind.PIP_NRM, face_samples, short_schedule, AugmentConfig())
        runs.append((report, _params(net)))
    (r1, p1), (r2, p2) = runs
    assert r1 == r2
    for name in p1:
        np.testing.assert_array_equal(p1[name], p2[name])


def test_training_updates_parameters_and_records_epochs(tiny_run_config, face_samples, short_schedule):
    net = build_network(tiny_run_config, HeadKind.PIP, face_samples)
    before = _params(net)
    _, report = train_supervised(net, HeadKind.PIP, face_samples, short_schedule, AugmentConfig.disabled())
    assert [r.epoch for r in report.records] == [0, 1]
    assert all(r.seconds == 0.0 and r.loss_neighbor == 0.0 for r in report.records)
    assert any(not np.array_equal(before[n], v) for n, v in _params(net).items())


def test_validation_runs_once_per_epoch(mocker, tiny_run_config, face_samples, short_schedule):
    spy = mocker.spy(training, "dataset_nme")
    net = build_network(tiny_run_config, HeadKind.PIP, face_samples)
    _, report = train_supervised(net, HeadKind.PIP, face_samples[:8], short_schedule, AugmentConfig.disabled(),
                                 val_set=face_samples[8:])
    assert spy.call_count == 2
    assert all(r.val_nme is not None and r.val_nme > 0 for r in report.records)


def test_nan_loss_aborts_with_position(mocker, tiny_run_config, face_samples, short_schedule):
    nan = Tensor(np.nan)
    mocker.patch.object(training, "supervised_loss", return_value=codec.LossTerms(nan, nan, nan, nan))
    net = build_network(tiny_run_config, HeadKind.PIP, face_samples)
    with pytest.raises(TrainingDivergedError) as exc:
        train_supervised(net, HeadKind.PIP, face_samples, short_schedule, AugmentConfig.disabled())
    assert (exc.value.epoch, exc.value.batch) == (0, 0)


def test_train_supervised_validates_inputs(tiny_run_config, face_samples, short_schedule):
    net = build_network(tiny_run_config, HeadKind.PIP, face_samples)
    with pytest.raises(ConfigurationError):
        train_supervised(net, HeadKind.MAP, face_samples, short_schedule, AugmentConfig())
    with pytest.raises(ConfigurationError):
        train_supervised(net, HeadKind.PIP, [], short_schedule, AugmentConfig())
    unlabeled = generate_domain(SynthConfig(), DomainStyle.B, 2, seed=0, is_labeled=False)
    with pytest.raises(ConfigurationError):
        train_supervised(net, HeadKind.PIP, unlabeled, short_schedule, AugmentConfig())


def test_fit_accepts_custom_loss(tiny_run_config, face_samples, short_schedule):
    calls = []

    def score_only(net, taps, batch):
        calls.append(len(batch))
        terms = supervised_loss(net, taps, batch)
        return codec.LossTerms(terms.score, terms.score, terms.offset, terms.neighbor)

    net = build_network(tiny_run_config, HeadKind.PIP, face_samples)
    report = fit(net, face_samples, short_schedule, AugmentConfig.disabled(), score_only)
    assert sum(calls) == 2 * len(face_samples)
    assert all(r.loss == r.loss_score for r in report.records)
    assert SCORE in net.branches


@pytest.mark.slow
def test_pip_nrm_training_halves_the_loss(tiny_run_config):
    samples = generate_domain(SynthConfig(), DomainStyle.A, 200, seed=1)
    net = build_network(tiny_run_config, HeadKind.PIP_NRM, samples)
    sched = TrainSchedule(epochs=20, decay_epochs=[15], batch_size=16, lr=1e-3, seed=0)
    _, report = train_supervised(net, HeadKind.PIP_NRM, samples, sched, AugmentConfig.disabled())
    losses = report.losses()
    assert losses[-1] < 0.5 * losses[0]
