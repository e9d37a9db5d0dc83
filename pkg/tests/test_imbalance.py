import numpy as np
import pytest

from cxrkit.dataset import SPLIT_PRESETS, LabelScheme, Source, Split, class_counts, class_rng, fuse, split
from cxrkit.errors import EmptyClassError, TargetBelowCurrentError
from cxrkit.imaging import GrayImage, read_image
from cxrkit.imbalance import (OVERSAMPLE_PRESETS, AugmentSpec, ClassWeightTable, apply_affine, class_weights,
                              oversample, resolve_targets, transform_sample)
from cxrkit.synthetic import corpus_standin


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifests = corpus_standin(root, size=4)
    return root, fuse([manifests[Source.COVID19], manifests[Source.RSNA], manifests[Source.NLMMC]])


def test_class_weights_binary_train_split():
    table = class_weights([906, 88])
    assert table.weights[0] == pytest.approx(994 / (2 * 906))
    assert table.weights[1] == pytest.approx(994 / (2 * 88))
    assert table.weights[0] == pytest.approx(0.5486, abs=1e-4)
    assert table.weights[1] == pytest.approx(5.6477, abs=1e-4)


def test_class_weights_balanced_and_constants():
    assert class_weights([50, 50]).weights == (1.0, 1.0)
    scaled = class_weights([10, 30], constants=[2.0, 1.0])
    assert scaled.weights == pytest.approx((2.0 * 40 / 20, 40 / 60))
    assert ClassWeightTable.uniform(3).as_array().tolist() == [1.0, 1.0, 1.0]


def test_class_weights_errors():
    with pytest.raises(EmptyClassError):
        class_weights([10, 0])
    with pytest.raises(ValueError):
        class_weights([10, 5], constants=[1.0])


def test_resolve_targets():
    current = np.array([437, 88, 422, 47])
    assert resolve_targets(current, "max").tolist() == [437] * 4
    assert resolve_targets(np.array([906, 88]), {0: 960, 1: 960}).tolist() == [960, 960]
    assert resolve_targets(np.array([3, 1]), 5).tolist() == [5, 5]
    with pytest.raises(TargetBelowCurrentError):
        resolve_targets(np.array([10, 2]), 5)
    with pytest.raises(ValueError):
        resolve_targets(np.array([10, 2]), "min")


def test_apply_affine_identity_and_shift():
    pixels = np.arange(25, dtype=float).reshape(5, 5)
    img = GrayImage(pixels)
    np.testing.assert_allclose(apply_affine(img, 0.0, 1.0, 0.0, 0.0).pixels, pixels, atol=1e-9)
    shifted = apply_affine(img, 0.0, 1.0, 1.0, 0.0, fill=7.0).pixels
    np.testing.assert_allclose(shifted[:, 1:], pixels[:, :-1], atol=1e-9)
    np.testing.assert_allclose(shifted[:, 0], 7.0)


def test_full_turn_rotation_is_identity():
    img = GrayImage(np.random.default_rng(1).uniform(0, 255, size=(11, 9)))
    np.testing.assert_allclose(apply_affine(img, 360.0, 1.0, 0.0, 0.0).pixels, img.pixels, atol=1e-6)
    np.testing.assert_allclose(apply_affine(img, -360.0, 1.0, 0.0, 0.0).pixels, img.pixels, atol=1e-6)


def test_transform_sample_is_seeded():
    img = GrayImage(np.random.default_rng(0).uniform(0, 255, size=(16, 16)))
    spec = AugmentSpec()
    a = transform_sample(img, spec, class_rng(5, 1))
    b = transform_sample(img, spec, class_rng(5, 1))
    assert np.array_equal(a.pixels, b.pixels)
    assert a.shape == img.shape


def test_augment_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        AugmentSpec(scale=(1.2, 0.8))
    with pytest.raises(ValueError):
        AugmentSpec(rotation_deg=-1)
    path = tmp_path / "aug.json"
    path.write_text('{"rotation_deg": 5, "shift_px": 2}')
    assert AugmentSpec.from_file(path).rotation_deg == 5.0


@pytest.mark.parametrize("preset,total", [("table2-rb", 1920), ("table2-rm3", 1407), ("table2-rm4", 1748)])
def test_oversample_presets_reach_training_totals(corpus, tmp_path, preset, total):
    root, fused = corpus
    scheme, counts = SPLIT_PRESETS[preset]
    assigned = split(fused, scheme, counts, seed=0)
    _, target = OVERSAMPLE_PRESETS[preset]
    out = oversample(assigned, scheme, AugmentSpec(shift_px=1.0), target, root, tmp_path / "over", workers=4)

    after = class_counts(out, scheme, Split.Train)
    assert int(after.sum()) == total
    assert after.tolist() == [total // scheme.num_classes] * scheme.num_classes
    assert class_counts(out, scheme, Split.Val).tolist() == class_counts(assigned, scheme, Split.Val).tolist()
    assert class_counts(out, scheme, Split.Test).tolist() == class_counts(assigned, scheme, Split.Test).tolist()
    synthetic = [r for r in out if r.source == Source.SYNTHETIC]
    assert len(synthetic) == total - int(class_counts(assigned, scheme, Split.Train).sum())
    assert read_image(root / synthetic[0].path).shape == (4, 4)


def test_oversample_is_deterministic(corpus, tmp_path):
    root, fused = corpus
    scheme, counts = SPLIT_PRESETS["table2-cm4"]
    assigned = split(fused, scheme, counts, seed=0)
    spec = AugmentSpec(seed=3)
    first = oversample(assigned, scheme, spec, "max", root, tmp_path / "a", workers=1)
    second = oversample(assigned, scheme, spec, "max", root, tmp_path / "b", workers=4)
    first_new = [r for r in first if r.source == Source.SYNTHETIC][:20]
    second_new = [r for r in second if r.source == Source.SYNTHETIC][:20]
    for a, b in zip(first_new, second_new):
        assert a.finding == b.finding
        assert np.array_equal(read_image(root / a.path).pixels, read_image(root / b.path).pixels)


def test_oversample_balanced_train_split_is_unchanged(corpus, tmp_path):
    root, fused = corpus
    assigned = split(fused, LabelScheme.Binary, {0: (100, 3, 1003), 1: (100, 4, 4)}, seed=0)
    out = oversample(assigned, LabelScheme.Binary, AugmentSpec(), "max", root, tmp_path / "same")
    assert out.records == assigned.records
    assert class_counts(out, LabelScheme.Binary, Split.Train).tolist() == [100, 100]
    assert not (tmp_path / "same").exists()


def test_oversample_needs_train_records(corpus, tmp_path):
    root, fused = corpus
    with pytest.raises(EmptyClassError):
        oversample(fused, LabelScheme.Binary, AugmentSpec(), {0: 2000, 1: 2000}, root, tmp_path / "x")
