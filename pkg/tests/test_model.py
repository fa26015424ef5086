"""Network forward/backward, losses, Adam, checkpoints, pretraining."""

import numpy as np
import pytest

from streamseg.core import ConfidenceField, Frame, IGNORE, LabelField, ProbabilityField
from streamseg.errors import MalformedRecord, NoGroundTruth, ShapeMismatch
from streamseg import model
from streamseg.spatial import build_index, local_geometric_features


def random_params(seed=0, feature_dim=9, num_classes=4):
    return model.NetworkParams.init(feature_dim, num_classes, seed=seed)


def fd_loss(params, features, targets, s, beta_hat=0.3):
    loss, _, _ = model.total_loss_and_grad(params, features, targets, s, beta_hat)
    return loss


class TestForward:
    def test_prob_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        params = random_params()
        probs, z, logits = model.forward(params, rng.normal(size=(30, 9)))
        np.testing.assert_allclose(probs.values.sum(axis=1), 1.0, atol=1e-9)
        assert z.shape == (30, 32)
        assert logits.shape == (30, 4)

    def test_feature_dim_checked(self):
        with pytest.raises(ShapeMismatch):
            model.forward(random_params(), np.zeros((5, 7)))

    def test_forward_is_pure(self):
        rng = np.random.default_rng(1)
        params = random_params()
        x = rng.normal(size=(10, 9))
        a, _, _ = model.forward(params, x)
        b, _, _ = model.forward(params, x)
        np.testing.assert_array_equal(a.values, b.values)

    def test_heads_shapes(self):
        params = random_params()
        e, q = model.heads(params, np.random.default_rng(2).normal(size=(8, 32)))
        assert e.shape == (8, 32)
        assert q.shape == (8, 32)


class TestNormalizeFeatures:
    def test_density_is_log_compressed(self):
        f = np.zeros((2, 9))
        f[:, 8] = [0.0, np.e ** 1.5 - 1]
        out = model.normalize_features(f)
        np.testing.assert_allclose(out[:, 8], [0.0, 1.0])

    def test_other_columns_divided_by_scale(self):
        f = np.ones((1, 9))
        out = model.normalize_features(f)
        np.testing.assert_allclose(out[0, :8], 1.0 / model._FEATURE_SCALE[:8])

    def test_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            model.normalize_features(np.zeros((3, 5)))


class TestSmoothTargets:
    def test_hand_oracle(self):
        t, mask = model.smooth_targets(LabelField(np.array([2])),
                                       ConfidenceField(np.array([0.5])),
                                       beta_hat=0.3, num_classes=4)
        # beta = 0.3 * 0.5 = 0.15
        np.testing.assert_allclose(t[0], [0.0375, 0.0375, 0.8875, 0.0375])
        assert mask.tolist() == [True]

    def test_full_confidence_is_one_hot(self):
        t, _ = model.smooth_targets(LabelField(np.array([1])),
                                    ConfidenceField(np.array([1.0])), 0.3, 3)
        np.testing.assert_array_equal(t[0], [0, 1, 0])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        labels = LabelField(rng.integers(0, 5, size=50))
        s = ConfidenceField(rng.random(50))
        t, _ = model.smooth_targets(labels, s, 0.3, 5)
        np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-12)

    def test_ignore_rows_zeroed(self):
        t, mask = model.smooth_targets(LabelField(np.array([IGNORE, 0])),
                                       ConfidenceField(np.array([1.0, 1.0])), 0.3, 2)
        np.testing.assert_array_equal(t[0], 0.0)
        assert mask.tolist() == [False, True]


class TestSoftDice:
    def test_two_class_hand_oracle(self):
        probs = ProbabilityField(np.array([[0.6, 0.4]]))
        loss, grad = model.soft_dice_loss(probs, LabelField(np.array([0])),
                                          ConfidenceField(np.array([1.0])))
        assert loss == pytest.approx(0.4)
        np.testing.assert_allclose(grad[0], [-0.24, 0.24], atol=1e-12)

    def test_perfect_prediction_zero_loss(self):
        probs = ProbabilityField(np.array([[1.0, 0.0]]))
        loss, grad = model.soft_dice_loss(probs, LabelField(np.array([0])),
                                          ConfidenceField(np.array([1.0])))
        assert loss == pytest.approx(0.0)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_all_ignore_zero_everything(self):
        probs = ProbabilityField(np.full((3, 2), 0.5))
        loss, grad = model.soft_dice_loss(probs, LabelField(np.full(3, IGNORE)),
                                          ConfidenceField(np.ones(3)))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)


class TestTotalLossGradcheck:
    def test_dice_gradient_matches_fd(self):
        # spot-check 5 random coordinates of every parameter tensor
        rng = np.random.default_rng(4)
        params = random_params(seed=1)
        x = rng.normal(size=(12, 9))
        labels = LabelField(rng.integers(0, 4, size=12))
        s = ConfidenceField(rng.random(12))
        _, grads, _ = model.total_loss_and_grad(params, x, labels, s)
        eps = 1e-6
        for name, arr in params.tensors.items():
            flat = arr.reshape(-1)
            for j in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                orig = flat[j]
                flat[j] = orig + eps
                up = fd_loss(params, x, labels, s)
                flat[j] = orig - eps
                dn = fd_loss(params, x, labels, s)
                flat[j] = orig
                fd = (up - dn) / (2 * eps)
                assert grads[name].reshape(-1)[j] == pytest.approx(fd, abs=2e-6), name

    def test_graph_and_closed_form_dice_agree(self):
        rng = np.random.default_rng(5)
        params = random_params(seed=2)
        x = rng.normal(size=(20, 9))
        labels = LabelField(rng.integers(0, 4, size=20))
        s = ConfidenceField(rng.random(20))
        loss, _, (dice, reg) = model.total_loss_and_grad(params, x, labels, s)
        probs, _, _ = model.forward(params, x)
        ref, _ = model.soft_dice_loss(probs, labels, s)
        assert loss == pytest.approx(ref, abs=1e-12)
        assert dice == pytest.approx(ref, abs=1e-12)
        assert reg == 0.0

    def test_dice_off_gives_zero(self):
        rng = np.random.default_rng(6)
        params = random_params()
        loss, grads, parts = model.total_loss_and_grad(
            params, rng.normal(size=(5, 9)), LabelField(np.zeros(5, dtype=np.int64)),
            ConfidenceField(np.ones(5)), dice_on=False)
        assert loss == 0.0 and parts == (0.0, 0.0)
        assert all(np.all(g == 0) for g in grads.values())


class TestAdam:
    def test_first_step_closed_form(self):
        params = random_params(seed=3)
        before = params.copy()
        grads = {k: np.random.default_rng(7).normal(size=v.shape)
                 for k, v in params.tensors.items()}
        state = model.OptimizerState.init(params)
        lr, wd, eps = 1e-3, 1e-5, 1e-8
        params, state = model.adam_step(params, grads, state, lr=lr, wd=wd, eps=eps)
        assert state.step == 1
        for name, p0 in before.tensors.items():
            g = grads[name]
            # bias correction makes m_hat = g and v_hat = g*g at step 1
            expect = p0 - lr * g / (np.abs(g) + eps) - lr * wd * p0
            np.testing.assert_allclose(params.tensors[name], expect, atol=1e-12)

    def test_missing_grads_only_decay(self):
        params = random_params(seed=4)
        before = params.copy()
        state = model.OptimizerState.init(params)
        params, _ = model.adam_step(params, {}, state, lr=1e-2, wd=1e-3)
        for name, p0 in before.tensors.items():
            np.testing.assert_allclose(params.tensors[name], p0 * (1 - 1e-2 * 1e-3),
                                       atol=1e-15)

    def test_shape_mismatch_rejected(self):
        params = random_params()
        state = model.OptimizerState.init(params)
        with pytest.raises(ShapeMismatch):
            model.adam_step(params, {"embed_w": np.zeros(3)}, state)

    def test_coupled_wd_enters_moments(self):
        params = random_params(seed=5)
        p0 = params.copy()
        state = model.OptimizerState.init(params)
        model.adam_step(params, {k: np.zeros_like(v) for k, v in params.tensors.items()},
                        state, lr=1e-3, wd=0.1, decoupled_wd=False)
        # with zero raw grads, coupled decay still drives a full Adam step
        diff = params.tensors["embed_w"] - p0.tensors["embed_w"]
        assert np.abs(diff).max() > 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = random_params(seed=6, num_classes=7)
        path = tmp_path / "ckpt.bin"
        params.save(path)
        back = model.NetworkParams.load(path)
        assert back.feature_dim == 9 and back.num_classes == 7
        for name in params.names():
            np.testing.assert_array_equal(back.tensors[name], params.tensors[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(MalformedRecord):
            model.NetworkParams.load(path)

    def test_truncated_payload(self, tmp_path):
        params = random_params()
        path = tmp_path / "ckpt.bin"
        params.save(path)
        path.write_bytes(path.read_bytes()[:-17])
        with pytest.raises(MalformedRecord):
            model.NetworkParams.load(path)

    def test_missing_tensors(self, tmp_path):
        params = random_params()
        path = tmp_path / "ckpt.bin"
        params.save(path)
        blob = path.read_bytes()
        # drop the final tensor (1-d bias of 32 float64 + 8-byte header)
        path.write_bytes(blob[:-(8 + 8 * 32)])
        with pytest.raises(MalformedRecord):
            model.NetworkParams.load(path)


def toy_sequence(seed, frames=8, n=60):
    """Short labeled sequence of two separable clusters."""
    rng = np.random.default_rng(seed)
    out = []
    for t in range(frames):
        a = rng.normal(size=(n // 2, 3)) * 0.3
        b = rng.normal(size=(n // 2, 3)) * 0.3 + [4.0, 0, 0]
        pts = np.vstack([a, b])
        gt = np.repeat([0, 1], n // 2)
        out.append(Frame(t, pts, np.eye(4), gt))
    return out


def toy_features(frame):
    feats = local_geometric_features(frame.points, build_index(frame.points), 8)
    return model.normalize_features(feats)


class TestPretrain:
    def test_deterministic(self):
        seq = toy_sequence(0)
        a, ha = model.pretrain_source([seq], epochs=2, seed=5, feature_fn=toy_features,
                                      num_classes=2, head_epochs=0)
        b, hb = model.pretrain_source([seq], epochs=2, seed=5, feature_fn=toy_features,
                                      num_classes=2, head_epochs=0)
        assert ha == hb
        for name in a.names():
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_loss_decreases(self):
        seq = toy_sequence(1)
        _, hist = model.pretrain_source([seq], epochs=6, seed=0, feature_fn=toy_features,
                                        num_classes=2, head_epochs=0)
        assert hist[-1] < hist[0]

    def test_head_warmup_touches_only_heads(self):
        seq = toy_sequence(2, frames=7)
        base, _ = model.pretrain_source([seq], epochs=1, seed=3, feature_fn=toy_features,
                                        num_classes=2, head_epochs=0)
        warm, _ = model.pretrain_source([seq], epochs=1, seed=3, feature_fn=toy_features,
                                        num_classes=2, head_epochs=1, window=3)
        for name in base.names():
            same = np.array_equal(base.tensors[name], warm.tensors[name])
            if name in model._HEAD_NAMES:
                assert not same, f"{name} should move during warm-up"
            else:
                assert same, f"{name} must stay frozen during warm-up"

    def test_requires_ground_truth(self):
        with pytest.raises(NoGroundTruth):
            model.pretrain_source([[]], epochs=1, seed=0, feature_fn=toy_features,
                                  num_classes=2)
        frame = Frame(0, np.zeros((4, 3)), np.eye(4), None)
        with pytest.raises(NoGroundTruth):
            model.pretrain_source([[frame]], epochs=1, seed=0, feature_fn=toy_features,
                                  num_classes=2)
