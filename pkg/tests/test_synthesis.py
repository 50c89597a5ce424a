import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsynth.autodiff import Model, Tensor, backward_input, softmax_cross_entropy
from fedsynth.data import make_blobs
from fedsynth.errors import ConfigError
from fedsynth.synthesis import (
    SynthesisConfig,
    compute_cam,
    dump_synthetic_dataset,
    hard_feature,
    masked_kl,
    mixup_generate,
    synthesis_loss,
    synthesize,
    update_prototypes,
)


def make_model(arch, seed=0):
    return Model.initialize(arch, np.random.default_rng(seed))


def kl_oracle(z_hat, z_target, cam, eps=1e-8):
    """Hand-rolled softmax-KL over ReLU-masked vectors."""
    mask = np.maximum(cam, 0.0)
    if not mask.any():
        return 0.0

    def sm(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    p = sm(z_target * mask)
    q = sm(z_hat * mask)
    return float(np.sum(p * (np.log(p + eps) - np.log(q + eps))))


class TestComputeCam:
    def make_linear_head(self, weight):
        # feature width 3, two classes; classifier is the last dense layer
        model = make_model(["dense(2,3)", "dense(3,2)"])
        model.params["dense1.weight"].data = np.asarray(weight, dtype=float)
        return model

    def test_linear_classifier_gradient_is_weight_column(self):
        # classifier rows per class: [[1,-2,0],[0,3,1]] stored column-wise
        model = self.make_linear_head(np.array([[1.0, 0.0], [-2.0, 3.0], [0.0, 1.0]]))
        z = np.array([0.3, -0.4, 2.0])
        assert np.array_equal(compute_cam(model, z, 1), [0.0, 3.0, 1.0])

    def test_linear_classifier_class_zero_and_relu(self):
        model = self.make_linear_head(np.array([[1.0, 0.0], [-2.0, 3.0], [0.0, 1.0]]))
        g = compute_cam(model, np.array([1.0, 1.0, 1.0]), 0)
        assert np.array_equal(g, [1.0, -2.0, 0.0])
        assert np.array_equal(np.maximum(g, 0.0), [1.0, 0.0, 0.0])

    def test_matches_finite_differences(self):
        model = make_model(["dense(4,6)", "relu", "dense(6,3)"], seed=4)
        z = np.random.default_rng(5).standard_normal(6)
        g = compute_cam(model, z, 2)
        h = 1e-5
        for i in range(6):
            up, down = z.copy(), z.copy()
            up[i] += h
            down[i] -= h

            def logit(v):
                return float(model.classify(Tensor(v.reshape(1, -1))).data[0, 2])

            fd = (logit(up) - logit(down)) / (2 * h)
            assert abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6) < 1e-4

    def test_class_out_of_range_raises(self):
        model = make_model(["dense(2,3)", "dense(3,2)"])
        with pytest.raises(ValueError):
            compute_cam(model, np.zeros(3), 2)


class TestUpdatePrototypes:
    def test_halfway_blend(self):
        protos = update_prototypes(
            {0: np.array([4.0, 4.0])}, {0: 2}, {0: np.array([0.0, 0.0])}, momentum=0.5
        )
        assert np.array_equal(protos[0], [1.0, 1.0])

    def test_momentum_one_keeps_previous(self):
        protos = update_prototypes(
            {0: np.array([10.0])}, {0: 1}, {0: np.array([3.0])}, momentum=1.0
        )
        assert np.array_equal(protos[0], [3.0])

    def test_momentum_zero_takes_mean(self):
        protos = update_prototypes(
            {0: np.array([10.0])}, {0: 2}, {0: np.array([3.0])}, momentum=0.0
        )
        assert np.array_equal(protos[0], [5.0])

    def test_first_observation_adopts_mean(self):
        protos = update_prototypes({1: np.array([6.0, 2.0])}, {1: 2}, {}, momentum=0.9)
        assert np.array_equal(protos[1], [3.0, 1.0])

    def test_unobserved_class_keeps_previous(self):
        previous = {0: np.array([1.0]), 1: np.array([2.0])}
        protos = update_prototypes({0: np.array([4.0])}, {0: 1, 1: 0}, previous, momentum=0.0)
        assert np.array_equal(protos[1], [2.0])

    def test_momentum_out_of_range_raises(self):
        with pytest.raises(ValueError):
            update_prototypes({}, {}, {}, momentum=1.5)


class TestHardFeature:
    def test_direct_substitution(self):
        assert np.array_equal(hard_feature([1.0, 0.0], [0.0, 0.0], 0.5), [1.5, 0.0])

    def test_zero_scale_is_identity(self):
        z = np.random.default_rng(0).standard_normal(8)
        p = np.random.default_rng(1).standard_normal(8)
        assert np.array_equal(hard_feature(z, p, 0.0), z)

    def test_affine_distance_identity(self):
        z = np.array([2.0, 2.0])
        p = np.array([1.0, 1.0])
        out = hard_feature(z, p, 1.0)
        assert np.array_equal(out, [3.0, 3.0])
        assert abs(np.linalg.norm(out - p) - 2.0 * np.linalg.norm(z - p)) < 1e-12

    @settings(deadline=None, max_examples=60, derandomize=True)
    @given(st.integers(0, 2**32 - 1), st.floats(-1.0, 3.0))
    def test_affine_distance_identity_random(self, seed, scale):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(16)
        p = rng.standard_normal(16)
        lhs = np.linalg.norm(hard_feature(z, p, scale) - p)
        rhs = (1.0 + scale) * np.linalg.norm(z - p)
        assert abs(lhs - rhs) < 1e-12 * max(1.0, rhs)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            hard_feature(np.zeros(3), np.zeros(4), 0.5)


class TestMaskedKl:
    def test_identical_vectors_give_zero(self):
        v = np.random.default_rng(0).standard_normal(6)
        g = np.random.default_rng(1).standard_normal(6)
        loss = masked_kl(Tensor(v, requires_grad=True), v, g)
        assert float(loss.data) == 0.0

    def test_hand_computed_value(self):
        # all-ones mask, z_hat=[0,0], target=[ln3,0]:
        # 0.75*ln(1.5) + 0.25*ln(0.5) = 0.13081203594113697
        loss = masked_kl(
            Tensor(np.zeros(2), requires_grad=True),
            np.array([math.log(3.0), 0.0]),
            np.ones(2),
        )
        assert abs(float(loss.data) - 0.13081203594113697) < 1e-6

    def test_matches_hand_rolled_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            z_hat = rng.standard_normal(9)
            z_t = rng.standard_normal(9)
            cam = rng.standard_normal(9)
            loss = masked_kl(Tensor(z_hat, requires_grad=True), z_t, cam)
            assert abs(float(loss.data) - kl_oracle(z_hat, z_t, cam)) < 1e-10

    @settings(deadline=None, max_examples=60, derandomize=True)
    @given(st.integers(0, 2**32 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        loss = masked_kl(
            Tensor(rng.standard_normal(5), requires_grad=True),
            rng.standard_normal(5),
            rng.standard_normal(5),
        )
        assert float(loss.data) >= -1e-12

    def test_all_zero_mask_returns_zero_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="fedsynth.synthesis"):
            loss = masked_kl(
                Tensor(np.ones(3), requires_grad=True), np.zeros(3), -np.ones(3)
            )
        assert float(loss.data) == 0.0
        assert any("mask" in rec.message for rec in caplog.records)

    def test_gradient_flows_to_synthetic_side_only(self):
        z_hat = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
        target = np.random.default_rng(1).standard_normal(5)
        cam = np.abs(np.random.default_rng(2).standard_normal(5))
        loss = masked_kl(z_hat, target, cam)
        grad = backward_input(loss, z_hat)
        assert grad.shape == (5,)
        assert np.any(grad != 0)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            masked_kl(Tensor(np.zeros(3)), np.zeros(4), np.zeros(4))


class TestSynthesisLoss:
    def setup_method(self):
        self.model = make_model(["dense(5,8)", "relu", "dense(8,8)", "relu", "dense(8,3)"], seed=9)
        self.x = np.random.default_rng(10).random(5)
        self.proto = np.random.default_rng(11).standard_normal(8)

    def test_zero_scale_equals_prototype_free_path_bitwise(self):
        x_hat = Tensor(np.random.default_rng(12).standard_normal(5), requires_grad=True)
        with_proto = synthesis_loss(self.model, x_hat, self.x, 1, self.proto, 0.0)
        x_hat2 = Tensor(x_hat.data.copy(), requires_grad=True)
        without = synthesis_loss(self.model, x_hat2, self.x, 1, None, 0.0)
        assert float(with_proto.data) == float(without.data)

    def test_synthetic_equal_real_reduces_to_classification(self):
        x_hat = Tensor(self.x.copy(), requires_grad=True)
        total = synthesis_loss(self.model, x_hat, self.x, 2, self.proto, 0.0)
        _, logits = self.model.forward(self.x.reshape(1, -1))
        ce = softmax_cross_entropy(logits, [2])
        assert abs(float(total.data) - float(ce.data)) < 1e-15

    def test_input_gradient_matches_finite_differences(self):
        x0 = np.random.default_rng(13).standard_normal(5)
        x_hat = Tensor(x0.copy(), requires_grad=True)
        loss = synthesis_loss(self.model, x_hat, self.x, 0, self.proto, 0.5)
        grad = backward_input(loss, x_hat)
        h = 1e-5
        for i in range(5):
            up, down = x0.copy(), x0.copy()
            up[i] += h
            down[i] -= h

            def value(v):
                return float(synthesis_loss(self.model, Tensor(v), self.x, 0, self.proto, 0.5).data)

            fd = (value(up) - value(down)) / (2 * h)
            assert abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6) < 1e-4


class TestSynthesize:
    def make_shard(self):
        train, _ = make_blobs(3, 5, 20, 0.25, seed=20)
        return train

    def make_cfg(self, **kw):
        base = dict(count=9, steps=5, adam_lr=0.02, scale=0.5, kl_eps=1e-8)
        base.update(kw)
        return SynthesisConfig(**base)

    def test_zero_steps_rejected(self):
        with pytest.raises(ConfigError):
            self.make_cfg(steps=0)

    def test_single_step_runs(self):
        model = make_model(["dense(5,6)", "relu", "dense(6,3)"], seed=21)
        shard = self.make_shard()
        syn = synthesize(model, shard, {}, self.make_cfg(steps=1), np.random.default_rng(0))
        assert len(syn) == 9

    def test_labels_match_paired_reals_and_inputs_clamped(self):
        model = make_model(["dense(5,6)", "relu", "dense(6,3)"], seed=21)
        shard = self.make_shard()
        syn = synthesize(model, shard, {}, self.make_cfg(), np.random.default_rng(1))
        for s in syn.samples:
            assert s.label == int(shard.labels[s.paired_index])
            assert np.all(s.x >= 0.0) and np.all(s.x <= 1.0)

    def test_stratified_to_class_histogram(self):
        model = make_model(["dense(5,6)", "relu", "dense(6,3)"], seed=21)
        shard = self.make_shard()  # 60 samples, 20 per class
        syn = synthesize(model, shard, {}, self.make_cfg(count=9), np.random.default_rng(2))
        labels = np.bincount([s.label for s in syn.samples], minlength=3)
        assert np.array_equal(labels, [3, 3, 3])

    def test_count_capped_at_shard_size(self):
        model = make_model(["dense(5,6)", "relu", "dense(6,3)"], seed=21)
        shard = self.make_shard().subset(range(4))
        syn = synthesize(model, shard, {}, self.make_cfg(count=100), np.random.default_rng(3))
        assert len(syn) == 4

    def test_deterministic_given_seed(self):
        model = make_model(["dense(5,6)", "relu", "dense(6,3)"], seed=21)
        shard = self.make_shard()
        protos = {0: np.zeros(6), 1: np.ones(6), 2: np.full(6, 0.5)}
        a = synthesize(model, shard, protos, self.make_cfg(), np.random.default_rng(9))
        b = synthesize(model, shard, protos, self.make_cfg(), np.random.default_rng(9))
        for x, y in zip(a.samples, b.samples):
            assert np.array_equal(x.x, y.x)
            assert x.initial_loss == y.initial_loss
            assert x.final_loss == y.final_loss

    def test_empty_shard_rejected(self):
        model = make_model(["dense(5,6)", "relu", "dense(6,3)"], seed=21)
        empty = self.make_shard().subset([])
        with pytest.raises(ValueError):
            synthesize(model, empty, {}, self.make_cfg(), np.random.default_rng(0))

    def test_fingerprint_tracks_model(self):
        model = make_model(["dense(5,6)", "relu", "dense(6,3)"], seed=21)
        shard = self.make_shard()
        a = synthesize(model, shard, {}, self.make_cfg(steps=1), np.random.default_rng(5))
        other = make_model(["dense(5,6)", "relu", "dense(6,3)"], seed=99)
        b = synthesize(other, shard, {}, self.make_cfg(steps=1), np.random.default_rng(5))
        assert a.model_fingerprint != b.model_fingerprint


class TestMixup:
    def test_two_sample_average(self):
        from fedsynth.data import Dataset

        shard = Dataset(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([0, 1]), 2)
        syn = mixup_generate(shard, 1, np.random.default_rng(0))
        assert np.array_equal(syn.samples[0].x, [0.5, 0.5])
        assert np.array_equal(syn.samples[0].soft_label, [0.5, 0.5])

    def test_same_class_parents_collapse_to_hard_label(self):
        from fedsynth.data import Dataset

        shard = Dataset(np.array([[0.0, 1.0], [1.0, 0.0]]), np.array([1, 1]), 2)
        syn = mixup_generate(shard, 3, np.random.default_rng(0))
        for s in syn.samples:
            assert s.soft_label is None
            assert s.label == 1

    def test_output_count(self):
        shard, _ = make_blobs(3, 4, 10, 0.2, seed=0)
        syn = mixup_generate(shard, 17, np.random.default_rng(1))
        assert len(syn) == 17

    def test_too_small_shard_rejected(self):
        from fedsynth.data import Dataset

        shard = Dataset(np.zeros((1, 2)), np.array([0]), 1)
        with pytest.raises(ValueError):
            mixup_generate(shard, 1, np.random.default_rng(0))


class TestDump:
    def test_dump_writes_json_and_csv(self, tmp_path):
        model = make_model(["dense(5,6)", "relu", "dense(6,3)"], seed=21)
        shard, _ = make_blobs(3, 5, 10, 0.25, seed=22)
        syn = synthesize(model, shard, {}, SynthesisConfig(count=6, steps=2), np.random.default_rng(4))
        paths = dump_synthetic_dataset(syn, shard, 0.5, 0.5, tmp_path)
        assert [p.name for p in paths] == ["client_00.json", "client_00.csv"]
        lines = paths[1].read_text().strip().split("\n")
        assert lines[0] == "x0,x1,x2,x3,x4,label,paired_index,initial_loss,final_loss"
        assert len(lines) == 7

    def test_identical_samples_report_capped_psnr(self, tmp_path):
        import json

        from fedsynth.synthesis import SyntheticDataset, SyntheticSample

        shard, _ = make_blobs(3, 5, 10, 0.25, seed=22)
        samples = [
            SyntheticSample(x=shard.inputs[i].copy(), label=int(shard.labels[i]), source_client=0,
                            round_index=1, paired_index=i)
            for i in range(4)
        ]
        syn = SyntheticDataset(samples, 6, 0, 1, "abc")
        json_path, _ = dump_synthetic_dataset(syn, shard, 0.5, 0.5, tmp_path)
        meta = json.loads(json_path.read_text())
        assert meta["psnr"] == [100.0, 100.0, 100.0, 100.0]
