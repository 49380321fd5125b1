import math

import numpy as np
import pytest

from simembed import net, training
from simembed.distance import DistanceMetric
from simembed.errors import ConfigError, DataError, NumericError
from simembed.losses import AngularConfig, TripletSample
from simembed.retrieval import EmbeddingRecord, build_index
from simembed.sampling import SamplerConfig
from simembed.training import TrainConfig, TrainLogRow


def tiny_net_config():
    return net.MultiScaleNetConfig(
        branches=(
            net.BranchSpec(1, (net.ConvSpec(2, 3, padding=1,
                                            pool_after=True),), 8),
            net.BranchSpec(2, (net.ConvSpec(2, 3, padding=1),), 4),
        ),
        final_embed_dim=6, input_shape=(1, 8, 8))


def quick_train_config(**overrides):
    base = dict(learning_rate=1e-3, epochs=1, batch_size=4,
                batches_per_epoch=2, val_pairs=8, val_triplets=8, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


class TestRmsprop:
    def test_first_step_matches_closed_form(self):
        cfg = TrainConfig(learning_rate=0.01, rms_decay=0.9, epsilon=1e-12)
        params = {"w": np.array([0.0])}
        grads = {"w": np.array([1.0])}
        state = {"w": np.zeros(1)}
        new_params, new_state = training.rmsprop_step(params, grads, state,
                                                      cfg)
        # s = 0.1 * 1^2, step = 0.01 / sqrt(0.1) = 0.0316228
        assert new_state["w"][0] == pytest.approx(0.1)
        assert new_params["w"][0] == pytest.approx(-0.01 / math.sqrt(0.1),
                                                   rel=1e-6)
        assert new_params["w"][0] == pytest.approx(-0.0316228, abs=1e-6)

    def test_zero_gradient_leaves_params_and_decays_state(self):
        cfg = TrainConfig(learning_rate=0.5, rms_decay=0.9)
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.zeros(2)}
        state = {"w": np.array([0.4, 0.8])}
        new_params, new_state = training.rmsprop_step(params, grads, state,
                                                      cfg)
        assert np.array_equal(new_params["w"], params["w"])
        assert np.allclose(new_state["w"], [0.36, 0.72])

    def test_deterministic(self, rng):
        cfg = TrainConfig(learning_rate=0.01)
        params = {"w": rng.standard_normal(5)}
        grads = {"w": rng.standard_normal(5)}
        state = {"w": np.abs(rng.standard_normal(5))}
        a = training.rmsprop_step(params, grads, state, cfg)
        b = training.rmsprop_step(params, grads, state, cfg)
        assert np.array_equal(a[0]["w"], b[0]["w"])
        assert np.array_equal(a[1]["w"], b[1]["w"])

    def test_inputs_not_mutated(self):
        cfg = TrainConfig(learning_rate=0.1)
        params = {"w": np.array([1.0])}
        grads = {"w": np.array([2.0])}
        state = {"w": np.array([0.5])}
        training.rmsprop_step(params, grads, state, cfg)
        assert params["w"][0] == 1.0 and state["w"][0] == 0.5

    def test_weight_decay_adds_to_gradient(self):
        cfg = TrainConfig(learning_rate=0.01, weight_decay=0.1)
        params = {"w": np.array([2.0])}
        grads = {"w": np.zeros(1)}
        state = {"w": np.zeros(1)}
        new_params, _ = training.rmsprop_step(params, grads, state, cfg)
        # effective gradient 0.1 * 2 = 0.2 moves the weight down
        assert new_params["w"][0] < 2.0

    def test_key_mismatch_rejected(self):
        cfg = TrainConfig()
        with pytest.raises(ConfigError):
            training.rmsprop_step({"a": np.zeros(1)}, {"b": np.zeros(1)},
                                  {"a": np.zeros(1)}, cfg)

    def test_shape_mismatch_rejected(self):
        cfg = TrainConfig()
        with pytest.raises(ConfigError):
            training.rmsprop_step({"a": np.zeros(2)}, {"a": np.zeros(3)},
                                  {"a": np.zeros(2)}, cfg)

    def test_non_finite_gradient_rejected(self):
        cfg = TrainConfig()
        with pytest.raises(NumericError):
            training.rmsprop_step({"a": np.zeros(1)},
                                  {"a": np.array([np.nan])},
                                  {"a": np.zeros(1)}, cfg)

    def test_learning_rate_override_wins(self):
        cfg = TrainConfig(learning_rate=0.01)
        params = {"w": np.array([0.0])}
        grads = {"w": np.array([1.0])}
        state = {"w": np.zeros(1)}
        hot, _ = training.rmsprop_step(params, grads, state, cfg,
                                       learning_rate=0.1)
        cold, _ = training.rmsprop_step(params, grads, state, cfg)
        assert abs(hot["w"][0]) == pytest.approx(10 * abs(cold["w"][0]),
                                                 rel=1e-9)


class TestAugment:
    def test_no_augmentations_is_identity(self, rng):
        cfg = TrainConfig(augmentation=frozenset())
        img = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
        out = training.augment(img, cfg, np.random.default_rng(0))
        assert np.array_equal(out, img)

    def test_hflip_when_rng_fires(self):
        cfg = TrainConfig(augmentation=frozenset({"hflip"}))
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        # default_rng(2).random() < 0.5 so the flip triggers
        out = training.augment(img, cfg, np.random.default_rng(2))
        assert np.array_equal(out, img[:, :, ::-1])

    def test_seeded_augment_reproducible(self, rng):
        cfg = TrainConfig(
            augmentation=frozenset({"hflip", "shift", "rotate"}))
        img = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
        a = training.augment(img, cfg, np.random.default_rng(5))
        b = training.augment(img, cfg, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_shift_zero_fills(self):
        img = np.ones((1, 4, 4), dtype=np.float32)
        out = training._shift(img, 1, 0)
        assert np.all(out[0, 0] == 0)
        assert np.all(out[0, 1:] == 1)

    def test_rotate_zero_degrees_is_identity(self, rng):
        img = rng.uniform(0, 1, (1, 6, 6)).astype(np.float32)
        assert np.array_equal(training._rotate_nearest(img, 0.0), img)

    def test_unknown_augmentation_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(augmentation=frozenset({"zoom"}))


class TestTrainLoop:
    def test_zero_learning_rate_keeps_initial_weights(self, small_dataset):
        tcfg = quick_train_config(learning_rate=0.0)
        ckpt, logs = training.train(small_dataset, small_dataset,
                                    tiny_net_config(), SamplerConfig(
                                        n_candidates=3), tcfg)
        fresh = net.build_network(tiny_net_config(), seed=tcfg.seed)
        for name in fresh.parameters:
            assert np.array_equal(ckpt.parameters[name],
                                  fresh.parameters[name])

    def test_one_epoch_writes_one_log_row(self, small_dataset):
        ckpt, logs = training.train(small_dataset, small_dataset,
                                    tiny_net_config(),
                                    SamplerConfig(n_candidates=3),
                                    quick_train_config())
        assert len(logs) == 1
        row = logs[0]
        assert row.epoch == 1
        assert math.isfinite(row.mean_train_loss)
        assert math.isfinite(row.validation_loss)
        assert 0.0 <= row.triplet_accuracy <= 1.0
        assert row.elapsed_seconds >= 0
        assert ckpt.epoch == 1

    def test_seeded_rerun_is_bitwise_identical(self, small_dataset):
        cfg = quick_train_config(epochs=2, seed=3)
        runs = []
        for _ in range(2):
            ckpt, logs = training.train(small_dataset, small_dataset,
                                        tiny_net_config(),
                                        SamplerConfig(n_candidates=3,
                                                      rng_seed=1), cfg)
            runs.append((ckpt, logs))
        a, b = runs
        for name in a[0].parameters:
            assert np.array_equal(a[0].parameters[name],
                                  b[0].parameters[name])
        for ra, rb in zip(a[1], b[1]):
            assert ra.mean_train_loss == rb.mean_train_loss
            assert ra.validation_loss == rb.validation_loss
            assert ra.triplet_accuracy == rb.triplet_accuracy

    def test_angular_loss_path_runs(self, small_dataset):
        cfg = quick_train_config(loss=AngularConfig())
        ckpt, logs = training.train(small_dataset, small_dataset,
                                    tiny_net_config(),
                                    SamplerConfig(n_candidates=3), cfg)
        assert len(logs) == 1
        assert math.isfinite(logs[0].mean_train_loss)

    def test_single_class_data_rejected(self, small_dataset):
        from simembed.dataset import Dataset
        one_class = Dataset(tuple(
            item for item in small_dataset.items if item.class_label == 0))
        with pytest.raises(DataError):
            training.train(one_class, one_class, tiny_net_config(),
                           SamplerConfig(), quick_train_config())


class TestTripletAccuracy:
    def checkpoint(self):
        return net.build_network(tiny_net_config(), seed=0)

    def test_identical_positive_always_wins(self, rng):
        ckpt = self.checkpoint()
        images = {
            "a": rng.uniform(0, 1, (1, 8, 8)).astype(np.float32),
            "n": rng.uniform(0, 1, (1, 8, 8)).astype(np.float32),
        }
        images["p"] = images["a"].copy()
        trips = [TripletSample("a", "p", "n")]
        assert training.triplet_accuracy(ckpt, trips, images) == 1.0

    def test_tie_counts_as_incorrect(self, rng):
        ckpt = self.checkpoint()
        img_a = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
        img_o = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
        images = {"a": img_a, "p": img_o, "n": img_o.copy()}
        trips = [TripletSample("a", "p", "n")]
        assert training.triplet_accuracy(ckpt, trips, images) == 0.0

    def test_fraction_counts_mixed_outcomes(self, rng):
        ckpt = self.checkpoint()
        images = {}
        trips = []
        for i in range(2):  # winners
            a = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
            images[f"a{i}"] = a
            images[f"p{i}"] = a.copy()
            images[f"n{i}"] = rng.uniform(0, 1, (1, 8, 8)) \
                .astype(np.float32)
            trips.append(TripletSample(f"a{i}", f"p{i}", f"n{i}"))
        for i in range(2):  # ties
            a = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
            o = rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
            images[f"ta{i}"] = a
            images[f"tp{i}"] = o
            images[f"tn{i}"] = o.copy()
            trips.append(TripletSample(f"ta{i}", f"tp{i}", f"tn{i}"))
        assert training.triplet_accuracy(ckpt, trips, images) == 0.5

    def test_accepts_dataset_argument(self, small_dataset):
        ckpt = self.checkpoint()
        ids = list(small_dataset.ids)
        trips = [TripletSample(ids[0], ids[1], ids[-1])]
        acc = training.triplet_accuracy(ckpt, trips, small_dataset)
        assert acc in (0.0, 1.0)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            training.triplet_accuracy(self.checkpoint(), [], {})


class TestTopkRecall:
    def build(self, rng, n=4):
        ckpt = net.build_network(tiny_net_config(), seed=0)
        images = [rng.uniform(0, 1, (1, 8, 8)).astype(np.float32)
                  for _ in range(n)]
        vectors = net.embed(ckpt, np.stack(images))
        records = [EmbeddingRecord(f"item{i}", i, vectors[i])
                   for i in range(n)]
        index = build_index(records, DistanceMetric(2.0))
        return ckpt, images, index

    def test_self_query_is_rank_one(self, rng):
        ckpt, images, index = self.build(rng)
        queries = [(img, [f"item{i}"]) for i, img in enumerate(images)]
        assert training.topk_recall(ckpt, queries, index, k=1) == 1.0

    def test_counts_hits_exactly(self, rng):
        ckpt, images, index = self.build(rng)
        queries = [(images[i], [f"item{i}"]) for i in range(3)]
        queries.append((images[0], ["item3"]))  # top-1 is item0, a miss
        assert training.topk_recall(ckpt, queries, index, k=1) == 0.75

    def test_k_equals_catalog_size_recalls_everything(self, rng):
        ckpt, images, index = self.build(rng)
        queries = [(images[0], ["item3"])]
        assert training.topk_recall(ckpt, queries, index,
                                    k=index.size) == 1.0

    def test_unknown_truth_id_rejected(self, rng):
        ckpt, images, index = self.build(rng)
        with pytest.raises(DataError):
            training.topk_recall(ckpt, [(images[0], ["ghost"])], index)

    def test_empty_queries_rejected(self, rng):
        ckpt, _, index = self.build(rng)
        with pytest.raises(DataError):
            training.topk_recall(ckpt, [], index)


class TestWriteLog:
    def test_format_round_trip(self, tmp_path):
        rows = [TrainLogRow(1, 0.5, 0.25, 0.75, 1.5),
                TrainLogRow(2, 0.25, 0.125, 0.875, 2.0)]
        path = tmp_path / "log.csv"
        training.write_log(str(path), rows)
        text = path.read_text()
        lines = text.strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_loss,triplet_acc,seconds"
        assert lines[1] == "1,0.500000,0.250000,0.7500,1.500"
        assert lines[2] == "2,0.250000,0.125000,0.8750,2.000"
