import struct

import numpy as np
import pytest

from engine.datasets import gen_synthetic_dataset
from engine.errors import FormatError, InputDomainError, TrainingFailure
from engine.model import (
    ArchConfig,
    Dataset,
    TrainConfig,
    accuracy,
    cross_entropy_grads,
    forward_features,
    forward_logits,
    forward_probs,
    freeze,
    init_model,
    load_model,
    parameter_count,
    predict,
    save_model,
    split_holdout,
    train_classifier,
)


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(0.0, 1.0, (5, 1, 8, 8))


class TestForward:
    def test_shapes(self, tiny_model, images):
        assert forward_features(tiny_model, images).shape == (5, 6)
        assert forward_logits(tiny_model, images).shape == (5, 3)
        assert np.allclose(forward_probs(tiny_model, images).sum(axis=1), 1.0)

    def test_wrong_input_shape(self, tiny_model):
        with pytest.raises(InputDomainError):
            forward_logits(tiny_model, np.zeros((2, 1, 7, 8)))

    def test_predict_matches_logits(self, tiny_model, images):
        assert np.array_equal(predict(tiny_model, images, batch_size=2),
                              np.argmax(forward_logits(tiny_model, images), axis=1))

    def test_linear_model_without_extractor(self):
        model = init_model((1, 4, 4), ArchConfig(classes=2, conv_channels=(), feature_dim=0), 0)
        assert model.layers == ()
        assert model.d == 16

    def test_parameter_count(self, tiny_model):
        # conv 2x1x3x3 + 2, dense 6x32 + 6, head 3x6 + 3
        assert parameter_count(tiny_model) == 20 + 198 + 21

    def test_features_independent_of_batching(self, tiny_model, images):
        whole = forward_features(tiny_model, images)
        parts = np.concatenate([forward_features(tiny_model, images[:2]),
                                forward_features(tiny_model, images[2:])])
        assert np.allclose(whole, parts, atol=1e-12)
        assert np.allclose(whole[3], forward_features(tiny_model, images[3:4])[0], atol=1e-12)

    def test_head_is_affine(self, tiny_model):
        rng = np.random.default_rng(5)
        f1, f2 = rng.normal(0.0, 1.0, (2, 4, 6))
        zero = tiny_model.head(np.zeros((4, 6)))
        lhs = tiny_model.head(2.0 * f1 - 0.5 * f2) - zero
        rhs = 2.0 * (tiny_model.head(f1) - zero) - 0.5 * (tiny_model.head(f2) - zero)
        assert np.allclose(lhs, rhs, atol=1e-10)
        assert np.allclose(zero, np.broadcast_to(tiny_model.head_b, (4, 3)))


class TestBackprop:
    def test_matches_finite_differences(self, tiny_model, images):
        y = np.array([0, 1, 2, 1, 0])
        _, grads = cross_entropy_grads(tiny_model, images, y)
        params = [(l.weight, l.bias) for l in tiny_model.layers] + [
            (tiny_model.head_W, tiny_model.head_b)
        ]
        rng = np.random.default_rng(1)
        h = 1e-6
        for (w, b), (dw, db) in zip(params, grads):
            for arr, grad in ((w, dw), (b, db)):
                for _ in range(3):
                    idx = tuple(rng.integers(0, s) for s in arr.shape)
                    old = arr[idx]
                    arr[idx] = old + h
                    lp, _ = cross_entropy_grads(tiny_model, images, y)
                    arr[idx] = old - h
                    lm, _ = cross_entropy_grads(tiny_model, images, y)
                    arr[idx] = old
                    assert (lp - lm) / (2 * h) == pytest.approx(grad[idx], rel=1e-4, abs=1e-7)


class TestFreeze:
    def test_weights_read_only_and_float32_exact(self, tiny_model):
        m = freeze(tiny_model)
        for arr in (m.head_W, m.layers[0].weight):
            assert not arr.flags.writeable
            assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64))


class TestUNGW:
    def test_round_trip(self, tmp_path, frozen_model, images):
        path = tmp_path / "m.ungw"
        save_model(frozen_model, path)
        loaded = load_model(path)
        assert loaded.input_shape == frozen_model.input_shape
        assert np.array_equal(forward_logits(loaded, images), forward_logits(frozen_model, images))
        save_model(loaded, tmp_path / "again.ungw")
        assert path.read_bytes() == (tmp_path / "again.ungw").read_bytes()

    def test_bad_magic(self, tmp_path, frozen_model):
        path = tmp_path / "m.ungw"
        save_model(frozen_model, path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError) as e:
            load_model(path)
        assert e.value.offset == 0

    def test_truncated(self, tmp_path, frozen_model):
        path = tmp_path / "m.ungw"
        save_model(frozen_model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(FormatError) as e:
            load_model(path)
        assert e.value.offset is not None and e.value.offset < len(data)

    def test_trailing_bytes(self, tmp_path, frozen_model):
        path = tmp_path / "m.ungw"
        save_model(frozen_model, path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            load_model(path)

    def test_header_layout(self, tmp_path, frozen_model):
        path = tmp_path / "m.ungw"
        save_model(frozen_model, path)
        data = path.read_bytes()
        assert data[:4] == b"UNGW"
        assert struct.unpack("<H", data[4:6]) == (1,)
        assert struct.unpack("<4I", data[6:22]) == (1, 8, 8, 3)
        assert struct.unpack("<I", data[22:26]) == (3,)


class TestTraining:
    def test_split_holdout_is_disjoint_partition(self, shapes8):
        train, held = split_holdout(shapes8, 0.25, seed=0)
        assert len(train) + len(held) == len(shapes8)
        assert len(held) == 15

    def test_zero_epochs_returns_frozen_init(self, shapes8, tiny_arch):
        model = train_classifier(shapes8, tiny_arch, TrainConfig(epochs=0))
        assert not model.head_W.flags.writeable

    def test_split_seed_is_separate_from_init_seed(self):
        assert TrainConfig(seed=3).holdout_seed == 3
        assert TrainConfig(seed=3, split_seed=0).holdout_seed == 0

    def test_unreachable_target_raises(self, shapes8):
        arch = ArchConfig(classes=3, conv_channels=(2,), feature_dim=4, target_accuracy=1.01)
        with pytest.raises(TrainingFailure) as e:
            train_classifier(shapes8, arch, TrainConfig(epochs=1, batch_size=16))
        assert 0.0 <= e.value.accuracy <= 1.0

    def test_training_is_deterministic(self, shapes8):
        arch = ArchConfig(classes=3, conv_channels=(2,), feature_dim=4, target_accuracy=0.0)
        cfg = TrainConfig(seed=4, epochs=2, batch_size=16)
        a = train_classifier(shapes8, arch, cfg)
        b = train_classifier(shapes8, arch, cfg)
        assert np.array_equal(a.head_W, b.head_W)

    @pytest.mark.slow
    def test_learns_separable_shapes(self):
        data = gen_synthetic_dataset(classes=2, n=400, image_side=8, seed=0)
        arch = ArchConfig(classes=2, conv_channels=(4,), feature_dim=16, target_accuracy=0.9)
        model = train_classifier(data, arch, TrainConfig(epochs=30, batch_size=32))
        _, held = split_holdout(data, 0.2, 0)
        assert accuracy(model, held) >= 0.9


class TestDataset:
    def test_rejects_out_of_box_values(self):
        with pytest.raises(InputDomainError):
            Dataset(np.full((1, 1, 2, 2), 1.5), np.array([0]))

    def test_classes_inferred(self):
        d = Dataset(np.zeros((3, 1, 2, 2)), np.array([0, 2, 1]))
        assert d.classes == 3
