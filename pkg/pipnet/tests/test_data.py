import os

import numpy as np
import pytest

from app.data import (
    Sample,
    as_batch,
    augment,
    crop_face,
    default_flip_map,
    effective_box,
    generate_domain,
    load_flip_map,
    load_pts,
    load_template,
    rotation_matrix,
    synth_generate,
    transform_points,
    validate_flip_map,
    warp_sample,
)
from app.exceptions import (
    ConfigurationError,
    CountMismatchError,
    DegenerateBoxError,
    MalformedHeaderError,
    NonNumericTokenError,
)
from app.landmark_codec import LandmarkSet, mean_shape, normalize_to_bbox
from app.schemas import AugmentConfig, DomainStyle, SynthConfig
from app.tensor_engine import SeededRng

from conftest import DATA_DIR


def _square_sample(size: int = 64) -> Sample:
    image = np.zeros((1, size, size), dtype=np.float32)
    image[0, 10:20, 30:34] = 1.0
    points = np.array([[20.0, 20.0], [44.0, 20.0], [32.0, 40.0]])
    return Sample(image=image, landmarks=LandmarkSet(points), bbox=(16.0, 16.0, 48.0, 48.0))


def _write(tmp_path, text: str) -> str:
    path = tmp_path / "face.pts"
    path.write_text(text)
    return str(path)


# --- cropping ---

def test_effective_box_rules():
    assert effective_box((0, 0, 100, 100), 10, 0) == pytest.approx((-5, -5, 105, 105))
    assert effective_box((0, 0, 100, 100), 0, 20) == pytest.approx((0, 20, 100, 100))
    with pytest.raises(DegenerateBoxError):
        effective_box((5, 5, 5, 10), 10, 0)


def test_crop_maps_box_corners_to_image_corners():
    sample = Sample(
        image=np.zeros((1, 96, 96), dtype=np.float32),
        landmarks=LandmarkSet(np.array([[10.0, 20.0], [50.0, 60.0]])),
        bbox=(10.0, 20.0, 50.0, 60.0),
    )
    cropped = crop_face(sample, enlarge_pct=0, out_size=64)
    np.testing.assert_allclose(cropped.landmarks.points, [[0, 0], [64, 64]], atol=1e-9)
    assert cropped.image.shape == (1, 64, 64)
    assert cropped.bbox == pytest.approx((0, 0, 64, 64))


def test_crop_of_the_full_frame_is_identity():
    sample = _square_sample()
    sample.bbox = (0.0, 0.0, 64.0, 64.0)
    cropped = crop_face(sample, enlarge_pct=0, out_size=64)
    np.testing.assert_allclose(cropped.image, sample.image, atol=1e-6)


# --- augmentation ---

def test_augment_with_zero_probabilities_is_identity():
    sample = _square_sample()
    out = augment(sample, AugmentConfig.disabled(), SeededRng(0), np.array([1, 0, 2]))
    np.testing.assert_array_equal(out.image, sample.image)
    np.testing.assert_array_equal(out.landmarks.points, sample.landmarks.points)


def test_flip_twice_restores_sample():
    sample = _square_sample()
    flip_map = np.array([1, 0, 2])
    cfg = AugmentConfig.disabled().model_copy(update={"flip_prob": 1.0})
    once = augment(sample, cfg, SeededRng(1), flip_map)
    # mirrored and relabeled: the left point becomes the new point 0 again
    np.testing.assert_allclose(once.landmarks.points, [[20, 20], [44, 20], [32, 40]])
    assert once.image[0, 10, 30] == pytest.approx(1.0)
    assert once.image[0, 10, 34] == 0.0
    twice = augment(once, cfg, SeededRng(2), flip_map)
    np.testing.assert_allclose(twice.landmarks.points, sample.landmarks.points)
    np.testing.assert_allclose(twice.image, sample.image, atol=1e-6)


def test_flip_map_length_must_match():
    cfg = AugmentConfig.disabled().model_copy(update={"flip_prob": 1.0})
    with pytest.raises(ConfigurationError):
        augment(_square_sample(), cfg, SeededRng(0), np.array([1, 0]))


def test_warp_rotates_landmarks_exactly():
    sample = Sample(
        image=np.zeros((1, 64, 64), dtype=np.float32),
        landmarks=LandmarkSet(np.array([[42.0, 32.0], [32.0, 22.0]])),
        bbox=(30.0, 20.0, 44.0, 34.0),
    )
    rotated = warp_sample(sample, rotation_matrix(30.0, 32.0, 32.0))
    c, s = np.cos(np.radians(30)), np.sin(np.radians(30))
    np.testing.assert_allclose(rotated.landmarks.points, [[32 + 10 * c, 32 + 10 * s], [32 + 10 * s, 32 - 10 * c]])


def test_augment_rotation_preserves_distance_to_center(face_samples):
    cfg = AugmentConfig.disabled().model_copy(update={"rotate_prob": 1.0})
    sample = face_samples[0]
    out = augment(sample, cfg, SeededRng(3), default_flip_map(16))
    before = np.linalg.norm(sample.landmarks.points - 32.0, axis=1)
    after = np.linalg.norm(out.landmarks.points - 32.0, axis=1)
    inside = np.all((out.landmarks.points > 0.01) & (out.landmarks.points < 63.99), axis=1)
    np.testing.assert_allclose(after[inside], before[inside], atol=1e-9)


def test_augment_translation_shifts_all_points_equally(face_samples):
    cfg = AugmentConfig.disabled().model_copy(update={"translate_prob": 1.0, "translate_px": 4.0})
    sample = face_samples[1]
    out = augment(sample, cfg, SeededRng(5), default_flip_map(16))
    shift = out.landmarks.points - sample.landmarks.points
    np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), atol=1e-9)
    assert np.all(np.abs(shift[0]) <= 4.0)


def test_augment_occlusion_blanks_a_region_only():
    sample = _square_sample()
    sample.image[:] = 0.5
    cfg = AugmentConfig.disabled().model_copy(update={"occlusion_prob": 1.0})
    out = augment(sample, cfg, SeededRng(4), np.array([1, 0, 2]))
    assert np.any(out.image == 0.0)
    assert np.any(out.image == 0.5)
    np.testing.assert_array_equal(out.landmarks.points, sample.landmarks.points)
    assert np.all(sample.image == 0.5)


def test_augment_is_deterministic(face_samples):
    cfg = AugmentConfig()
    flip_map = default_flip_map(16)
    a = augment(face_samples[2], cfg, SeededRng(9, 1), flip_map)
    b = augment(face_samples[2], cfg, SeededRng(9, 1), flip_map)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.landmarks.points, b.landmarks.points)


def test_augmented_landmarks_stay_in_frame(face_samples):
    cfg = AugmentConfig(translate_px=30.0, translate_prob=1.0)
    flip_map = default_flip_map(16)
    for k, sample in enumerate(face_samples):
        pts = augment(sample, cfg, SeededRng(k), flip_map).landmarks.points
        assert np.all(pts >= 0.0) and np.all(pts < 64.0)


# --- synthetic faces ---

def test_synth_without_pose_or_jitter_follows_template():
    cfg = SynthConfig(pose_range_deg=0, jitter_sigma=0, scale_range=(1.0, 1.0), translate_px=0)
    template = load_template()
    sample = synth_generate(cfg, 1, SeededRng(0))[0]
    expected = (template.points - 0.5) * cfg.face_size + cfg.canvas_size / 2
    np.testing.assert_allclose(sample.landmarks.points, expected, atol=1e-9)
    assert sample.image.shape == (1, 96, 96)
    assert sample.image.dtype == np.float32


def test_synth_is_deterministic():
    a = generate_domain(SynthConfig(), DomainStyle.B, 4, seed=21)
    b = generate_domain(SynthConfig(), DomainStyle.B, 4, seed=21)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.landmarks.points, y.landmarks.points)
        assert x.attributes == y.attributes


def test_synth_sample_does_not_depend_on_count():
    few = synth_generate(SynthConfig(), 2, SeededRng(4))
    many = synth_generate(SynthConfig(), 5, SeededRng(4))
    np.testing.assert_array_equal(few[1].image, many[1].image)


def test_domains_differ_in_pixel_statistics():
    a = as_batch(generate_domain(SynthConfig(), DomainStyle.A, 20, seed=1)).mean()
    b = as_batch(generate_domain(SynthConfig(), DomainStyle.B, 20, seed=1)).mean()
    assert abs(a - b) > 0.05


def test_domain_attributes_and_tags(face_samples):
    assert all(s.domain_tag == "A" and "occluded" not in s.attributes for s in face_samples)
    b = generate_domain(SynthConfig(), DomainStyle.B, 12, seed=2, is_labeled=False)
    assert all(not s.is_labeled for s in b)
    assert all(set(s.attributes) <= {"occluded", "large_pose"} for s in b)
    assert all(s.image.shape == (1, 64, 64) for s in b)


def test_generated_bbox_encloses_landmarks(face_samples):
    for s in face_samples:
        x1, y1, x2, y2 = s.bbox
        pts = s.landmarks.points
        assert x1 < pts[:, 0].min() and pts[:, 0].max() < x2
        assert y1 < pts[:, 1].min() and pts[:, 1].max() < y2


def test_mean_shape_converges_to_template():
    cfg = SynthConfig(pose_range_deg=0)
    samples = synth_generate(cfg, 500, SeededRng(8))
    result = mean_shape((s.landmarks, s.bbox) for s in samples)
    template = load_template().points
    lo, hi = template.min(axis=0), template.max(axis=0)
    pad = (hi - lo) * cfg.bbox_margin_pct / 200.0
    expected = normalize_to_bbox(template, (*(lo - pad), *(hi + pad)))
    np.testing.assert_allclose(result.points, expected, atol=0.01)


def test_template_size_must_match_config():
    with pytest.raises(ConfigurationError):
        synth_generate(SynthConfig(num_landmarks=68), 1, SeededRng(0))


# --- fixtures and points files ---

def test_packaged_flip_maps_are_involutions():
    for perm in (load_flip_map("flip_68.json"), load_template().flip_map, default_flip_map(68)):
        np.testing.assert_array_equal(perm[perm], np.arange(len(perm)))
    assert len(load_flip_map("flip_68.json")) == 68
    with pytest.raises(ConfigurationError):
        validate_flip_map([1, 2, 0])
    with pytest.raises(ConfigurationError):
        default_flip_map(5)


def test_load_pts_reads_points(tmp_path):
    path = _write(tmp_path, "version: 1\nn_points: 2\n{\n1.0 2.0\n3.0 4.0\n}\n")
    np.testing.assert_array_equal(load_pts(path).points, [[1, 2], [3, 4]])


def test_load_pts_sample_file():
    lm = load_pts(os.path.join(DATA_DIR, "sample_68.pts"))
    assert lm.N == 68


def test_load_pts_count_mismatch(tmp_path):
    with pytest.raises(CountMismatchError):
        load_pts(_write(tmp_path, "version: 1\nn_points: 3\n{\n1.0 2.0\n3.0 4.0\n}\n"))
    with pytest.raises(CountMismatchError):
        load_pts(_write(tmp_path, "version: 1\nn_points: 2\n{\n1.0 2.0\n3.0 4.0\n"))


def test_load_pts_bad_tokens_report_line(tmp_path):
    with pytest.raises(NonNumericTokenError) as exc:
        load_pts(_write(tmp_path, "version: 1\nn_points: 2\n{\n1.0 2.0\n3.0 abc\n}\n"))
    assert exc.value.line_no == 5


def test_load_pts_malformed_header(tmp_path):
    with pytest.raises(MalformedHeaderError):
        load_pts(_write(tmp_path, "n_points: 2\nversion: 1\n{\n1 2\n3 4\n}\n"))
    with pytest.raises(MalformedHeaderError):
        load_pts(_write(tmp_path, "version: 1\nn_points: two\n{\n}\n"))
