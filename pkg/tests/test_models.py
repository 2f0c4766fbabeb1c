import numpy as np
import pytest

from misalign.errors import (
    DegenerateLabelsError,
    TooFewPointsError,
    TrainingDivergedError,
)
from misalign.features import FEATURE_DIM, FeatureMap
from misalign.models import (
    CoralModel,
    MlpParams,
    PTLayerParams,
    TrainConfig,
    TrainingSet,
    _eval_loss_acc,
    cdf_l1,
    combined_loss,
    combined_loss_grad,
    coral_fit,
    coral_predict,
    cross_entropy,
    cross_entropy_grad,
    init_pt_layer,
    load_model,
    pool_feature_map,
    predict,
    predict_class,
    pt_layer_backward,
    pt_layer_forward,
    regression_head_grad,
    regression_head_loss,
    save_history_csv,
    save_model,
    softmax,
    softplus,
    train_mlp,
    wasserstein1,
)


def _onehot(i: int, m: int) -> np.ndarray:
    v = np.zeros(m)
    v[i] = 1.0
    return v


def _fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x, dtype=float)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = f()
        flat_x[i] = orig - h
        fm = f()
        flat_x[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    # The floor keeps identically-zero gradients (softmax shift invariance)
    # from turning round-off into a huge ratio.
    denom = max(np.linalg.norm(b), 1e-8)
    return np.linalg.norm(a - b) / denom


class TestLossValues:
    def test_cross_entropy_perfect(self):
        assert cross_entropy(1, _onehot(1, 3)) == 0.0

    def test_cross_entropy_uniform_binary(self):
        assert cross_entropy(0, [0.5, 0.5]) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_w1_perfect(self):
        assert wasserstein1(2, _onehot(2, 5)) == 0.0

    def test_w1_opposite_corners(self):
        assert wasserstein1(0, _onehot(4, 5)) == pytest.approx(4.0, abs=1e-12)

    def test_w1_half_mass_on_neighbor(self):
        assert wasserstein1(0, [0.5, 0.5, 0.0, 0.0, 0.0]) == pytest.approx(0.5, abs=1e-12)

    def test_w1_onehot_pairs_exhaustive(self):
        for m in range(2, 7):
            for i in range(m):
                for j in range(m):
                    assert wasserstein1(i, _onehot(j, m)) == pytest.approx(abs(i - j))

    def test_cdf_l1_triangle_inequality(self, rng):
        for _ in range(100):
            p, q, r = (rng.dirichlet(np.ones(5)) for _ in range(3))
            assert cdf_l1(p, r) <= cdf_l1(p, q) + cdf_l1(q, r) + 1e-12

    def test_combined_perfect(self):
        assert combined_loss(3, _onehot(3, 5)) == 0.0

    def test_combined_uniform_binary(self):
        expected = 0.5 * np.log(2.0) + 0.5 * 0.5
        assert combined_loss(0, [0.5, 0.5]) == pytest.approx(expected, abs=1e-12)

    def test_combined_zero_iff_onehot(self, rng):
        p = rng.dirichlet(np.ones(4))
        if p.max() < 0.999:
            assert combined_loss(int(p.argmax()), p) > 1e-4

    def test_batch_averaging(self):
        y = [0, 1]
        p = [[0.5, 0.5], [0.5, 0.5]]
        assert cross_entropy(y, p) == pytest.approx(np.log(2.0))
        assert wasserstein1(y, p) == pytest.approx(0.5)


class TestLossGradients:
    def test_cross_entropy_grad_fd(self, rng):
        for m in (2, 5, 10):
            logits = rng.normal(size=(1, m))
            y = np.array([int(rng.integers(m))])
            _, grad = cross_entropy_grad(y, logits)
            fd = _fd_grad(lambda: cross_entropy_grad(y, logits)[0], logits, h=1e-5)
            assert _rel_err(grad, fd) < 1e-5

    def test_combined_grad_fd_100_draws(self, rng):
        for trial in range(100):
            m = (2, 5, 10)[trial % 3]
            logits = rng.normal(scale=2.0, size=(1, m))
            y = np.array([int(rng.integers(m))])
            _, grad = combined_loss_grad(y, logits)
            fd = _fd_grad(lambda: combined_loss_grad(y, logits)[0], logits)
            assert _rel_err(grad, fd) < 1e-4

    def test_combined_grad_batched(self, rng):
        logits = rng.normal(size=(6, 5))
        y = rng.integers(5, size=6)
        _, grad = combined_loss_grad(y, logits)
        fd = _fd_grad(lambda: combined_loss_grad(y, logits)[0], logits)
        assert _rel_err(grad, fd) < 1e-4

    def test_regression_values(self):
        assert regression_head_loss(np.log(2.0), 0.0) == pytest.approx(0.0, abs=1e-15)
        target = softplus(1.3)
        assert regression_head_loss(target, 1.3) == pytest.approx(0.0, abs=1e-15)

    def test_regression_grad_fd(self, rng):
        logit = rng.normal(size=(1,))
        target = np.array([0.4])
        _, grad = regression_head_grad(target, logit)
        fd = _fd_grad(lambda: regression_head_grad(target, logit)[0], logit, h=1e-5)
        assert _rel_err(grad, fd) < 1e-6


class TestPointTransformerLayer:
    def _instance(self, seed=0, n=6, d_in=4, d_attn=4, k_nn=3):
        rng = np.random.default_rng(seed)
        params = init_pt_layer(rng, d_in, d_attn, k_nn)
        x = rng.normal(size=(n, d_in))
        p = rng.normal(size=(n, 3))
        return params, x, p

    def test_zero_parameters_zero_output(self):
        params, x, p = self._instance()
        for name in PTLayerParams.ARRAY_FIELDS:
            getattr(params, name)[:] = 0.0
        y = pt_layer_forward(x, p, params)
        np.testing.assert_array_equal(y, np.zeros_like(y))

    def test_self_only_attention(self):
        params, x, p = self._instance(k_nn=1)
        y = pt_layer_forward(x, p, params)
        pos_zero = np.maximum(params.pos_b1, 0.0) @ params.pos_w2 + params.pos_b2
        expected = x @ params.wv + params.bv + pos_zero
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_parameter_gradients_fd(self):
        params, x, p = self._instance(seed=3)
        g_out = np.random.default_rng(9).normal(size=(6, 4))

        def loss():
            return float(np.sum(pt_layer_forward(x, p, params) * g_out))

        _, cache = pt_layer_forward(x, p, params, return_cache=True)
        grads = pt_layer_backward(cache, g_out)
        for name in PTLayerParams.ARRAY_FIELDS:
            fd = _fd_grad(loss, getattr(params, name))
            assert _rel_err(grads[name], fd) < 1e-4, name

    def test_permutation_equivariance(self):
        params, x, p = self._instance(seed=5)
        y = pt_layer_forward(x, p, params)
        perm = np.random.default_rng(2).permutation(6)
        y_perm = pt_layer_forward(x[perm], p[perm], params)
        np.testing.assert_allclose(y_perm, y[perm], atol=1e-9)

    def test_too_few_points(self):
        params, x, p = self._instance(k_nn=10)
        with pytest.raises(TooFewPointsError):
            pt_layer_forward(x, p, params)


def _toy_sets(rng, n=60, m=2, separation=4.0):
    half = n // 2
    inputs = rng.normal(size=(n, 12))
    labels = np.array([0] * half + [1] * (n - half))
    inputs[labels == 1, :4] += separation
    eps = np.where(labels == 1, 0.6, 0.01)
    order = rng.permutation(n)
    return TrainingSet(inputs[order], labels[order], eps[order])


class TestTrainMlp:
    def test_separable_reaches_full_accuracy(self, rng):
        train = _toy_sets(rng)
        val = _toy_sets(rng, n=20)
        config = TrainConfig(loss="rbc", num_classes=2, hidden=(16,), epochs=120,
                             batch_size=8, seed=1)
        model, history = train_mlp(train, val, config)
        _, acc = _eval_loss_acc(model, train)
        assert acc == 1.0
        assert len(history) == 120

    def test_best_checkpoint_not_worse_than_first_epoch(self, rng):
        train = _toy_sets(rng)
        val = _toy_sets(rng, n=20)
        config = TrainConfig(loss="rbc", num_classes=2, hidden=(16,), epochs=40, seed=2)
        model, history = train_mlp(train, val, config)
        final_loss, _ = _eval_loss_acc(model, val)
        assert final_loss <= history[0]["val_loss"] + 1e-12

    def test_identical_seeds_identical_models(self, rng):
        train = _toy_sets(rng)
        val = _toy_sets(rng, n=20)
        config = TrainConfig(loss="rbc", num_classes=2, hidden=(16,), epochs=10, seed=7)
        m1, h1 = train_mlp(train, val, config)
        m2, h2 = train_mlp(train, val, config)
        for (w1, b1), (w2, b2) in zip(m1.weights, m2.weights):
            np.testing.assert_array_equal(w1, w2)
            np.testing.assert_array_equal(b1, b2)
        assert h1 == h2

    def test_regression_head_trains(self, rng):
        # Targets sit mid-bin so a converged head lands in the right class.
        def regression_sets(n):
            base = _toy_sets(rng, n=n)
            eps = np.where(base.epsilons > 0.5, 0.6, 0.15)
            labels = np.where(base.epsilons > 0.5, 4, 2)
            return TrainingSet(base.inputs, labels, eps)

        train = regression_sets(80)
        val = regression_sets(20)
        config = TrainConfig(loss="regression", num_classes=5, hidden=(16,),
                             epochs=200, seed=3)
        model, _ = train_mlp(train, val, config)
        assert model.output_dim() == 1
        loss, acc = _eval_loss_acc(model, train)
        assert loss < 0.02
        assert acc > 0.9

    def test_mlp_backprop_matches_fd(self, rng):
        from misalign.models import _backward_mlp, _forward_mlp

        weights = [
            (rng.normal(size=(7, 6)), rng.normal(size=6)),
            (rng.normal(size=(6, 4)), rng.normal(size=4)),
        ]
        x = rng.normal(size=(5, 7))
        y = rng.integers(4, size=5)

        def loss():
            logits, _ = _forward_mlp(weights, x)
            return combined_loss_grad(y, logits)[0]

        logits, acts = _forward_mlp(weights, x)
        _, grad_logits = combined_loss_grad(y, logits)
        grads = _backward_mlp(weights, acts, grad_logits)
        for layer, (gw, gb) in enumerate(grads):
            assert _rel_err(gw, _fd_grad(loss, weights[layer][0])) < 1e-4
            assert _rel_err(gb, _fd_grad(loss, weights[layer][1])) < 1e-4

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_detected(self, rng):
        train = _toy_sets(rng)
        config = TrainConfig(loss="rbc", num_classes=2, hidden=(16,), epochs=40,
                             learning_rate=1e12, seed=4)
        with pytest.raises(TrainingDivergedError):
            train_mlp(train, train, config)


def _random_feature_map(rng, n=32, label=1) -> FeatureMap:
    feats = rng.normal(size=(n, FEATURE_DIM))
    feats[: n // 2, 4] = 0.0
    feats[n // 2:, 4] = 1.0
    return FeatureMap(feats, rng.normal(size=(n, 3)), label)


class TestPredict:
    def _model(self, rng):
        maps = [_random_feature_map(rng, label=i % 3) for i in range(12)]
        train = TrainingSet.from_feature_maps(maps)
        config = TrainConfig(loss="rbc", num_classes=3, hidden=(8,), epochs=5, seed=0)
        model, _ = train_mlp(train, train, config)
        return model

    def test_distribution_sums_to_one(self, rng):
        model = self._model(rng)
        fm = _random_feature_map(rng)
        p = predict(model, fm)
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        assert (p >= 0).all()

    def test_row_permutation_invariant(self, rng):
        model = self._model(rng)
        fm = _random_feature_map(rng)
        perm = rng.permutation(fm.features.shape[0])
        fm_perm = FeatureMap(fm.features[perm], fm.coords[perm], fm.label)
        np.testing.assert_allclose(predict(model, fm), predict(model, fm_perm), atol=1e-9)

    def test_argmax_matches_class(self, rng):
        model = self._model(rng)
        fm = _random_feature_map(rng)
        assert predict_class(model, fm) == int(np.argmax(predict(model, fm)))

    def test_argmax_invariant_to_logit_shift(self, rng):
        z = rng.normal(size=5)
        assert int(np.argmax(softmax(z))) == int(np.argmax(softmax(z + 100.0)))


class TestCoral:
    def test_symmetric_data_gives_half(self, rng):
        x = np.tile(rng.normal(size=(40, 2)), (2, 1))
        y = np.array([0] * 40 + [1] * 40)
        model = coral_fit(x, y)
        probs = coral_predict(model, x)
        assert np.abs(probs - 0.5).max() < 0.05

    def test_separable_shifted_features(self, rng):
        x0 = rng.normal(size=(30, 2))
        x1 = rng.normal(size=(30, 2)) + 5.0
        x = np.vstack([x0, x1])
        y = np.array([0] * 30 + [1] * 30)
        model = coral_fit(x, y)
        pred = (coral_predict(model, x) >= 0.5).astype(int)
        assert (pred == y).mean() == 1.0

    def test_monotone_in_joint_entropy(self, rng):
        h_sep = rng.normal(size=60)
        h_joint = h_sep + np.array([0.0] * 30 + [1.0] * 30) + 0.05 * rng.normal(size=60)
        x = np.stack([h_joint, h_sep], axis=1)
        y = np.array([0] * 30 + [1] * 30)
        model = coral_fit(x, y)
        assert model.weight[0] > 0.0
        base = coral_predict(model, np.array([[0.5, 0.2]]))
        higher = coral_predict(model, np.array([[1.5, 0.2]]))
        assert higher > base

    def test_single_class_rejected(self, rng):
        with pytest.raises(DegenerateLabelsError):
            coral_fit(rng.normal(size=(10, 2)), np.zeros(10))


class TestModelSerialization:
    def test_mlp_roundtrip(self, rng, tmp_path):
        maps = [_random_feature_map(rng, label=i % 2) for i in range(8)]
        train = TrainingSet.from_feature_maps(maps)
        config = TrainConfig(loss="rbc", num_classes=2, hidden=(8,), epochs=3, seed=0)
        model, history = train_mlp(train, train, config)
        path = str(tmp_path / "model.mmdl")
        save_model(model, path)
        blob = open(path, "rb").read()
        assert blob[:4] == b"MMDL"
        loaded = load_model(path)
        assert loaded.kind == model.kind
        assert loaded.num_classes == model.num_classes
        for (w1, b1), (w2, b2) in zip(model.weights, loaded.weights):
            np.testing.assert_array_equal(w1, w2)
            np.testing.assert_array_equal(b1, b2)
        save_model(loaded, path)
        assert open(path, "rb").read() == blob

    def test_coral_roundtrip(self, tmp_path):
        model = CoralModel(np.array([1.5, -2.0]), 0.25)
        path = str(tmp_path / "coral.mmdl")
        save_model(model, path)
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.weight, model.weight)
        assert loaded.bias == model.bias

    def test_history_csv(self, tmp_path):
        history = [dict(epoch=0, train_loss=1.0, val_loss=2.0, val_accuracy=0.5)]
        path = str(tmp_path / "h.csv")
        save_history_csv(history, path)
        lines = open(path).read().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_accuracy"
        assert lines[1].startswith("0,")

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.mmdl"
        path.write_bytes(b"JUNK" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_model(str(path))
