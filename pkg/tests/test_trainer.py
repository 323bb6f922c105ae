"""Training loop: determinism, metric curves, and delta emission."""

import numpy as np
import pytest

from minirec.delta_stream import decode_delta, encode_delta
from minirec.errors import DataError, IoError
from minirec.model import init_params, params_equal, tensor_items
from minirec.trainer import (
    DeltaAccumulator,
    early_stop_check,
    emit_delta,
    load_dataset,
    load_records,
    train,
)
from minirec.delta_stream import apply_message

from helpers import make_config, write_csv, write_logistic_dataset


def _small_dataset(tmp_path, rows=120, seed=3):
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(rows):
        u, i = int(rng.integers(12)), int(rng.integers(12))
        label = int((u + i) % 2 == 0)
        data.append([label, f"u{u}", f"i{i}"])
    write_csv(tmp_path / "train.csv", ["label", "user_id", "item_id"], data)
    write_csv(tmp_path / "eval.csv", ["label", "user_id", "item_id"], data[:40])


class TestLoadData:
    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            load_records(str(tmp_path / "nope.csv"))

    def test_bad_label(self, tmp_path):
        write_csv(tmp_path / "train.csv", ["label", "user_id", "item_id"],
                  [[2, "u1", "i1"]])
        cfg = make_config(tmp_path)
        with pytest.raises(DataError):
            load_dataset(cfg, str(tmp_path / "train.csv"))

    def test_loads_features_once(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path)
        fvs, labels = load_dataset(cfg, str(tmp_path / "train.csv"))
        assert len(fvs) == len(labels) == 120
        assert set(np.unique(labels)) <= {0.0, 1.0}


class TestTrainDeterminism:
    def test_same_seed_bitwise_identical(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path, train_config={"num_epochs": 2, "batch_size": 16})
        art1, rep1 = train(cfg)
        art2, rep2 = train(cfg)
        assert params_equal(art1.params, art2.params)
        assert rep1.curves == rep2.curves

    def test_different_seed_differs(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path, train_config={"num_epochs": 1, "batch_size": 16})
        other = make_config(tmp_path, train_config={"num_epochs": 1, "batch_size": 16,
                                                    "seed": 43})
        art1, _ = train(cfg)
        art2, _ = train(other)
        assert not params_equal(art1.params, art2.params)

    def test_zero_epochs_is_initialization(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path, train_config={"num_epochs": 0})
        art, report = train(cfg)
        init = init_params(cfg, np.random.default_rng([cfg.train_config.seed, 0]))
        assert params_equal(art.params, init)
        assert art.model_version == 0
        assert report.steps == 0


class TestEvalCurves:
    def test_one_entry_per_interval(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path, train_config={"num_epochs": 4},
                          eval_config={"eval_interval": 2})
        _, report = train(cfg)
        assert [m["epoch"] for m in report.curves] == [2, 4]
        for entry in report.curves:
            assert set(entry) == {"epoch", "auc", "logloss"}

    def test_final_metrics_are_last_eval(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path, train_config={"num_epochs": 2})
        _, report = train(cfg)
        last = {k: v for k, v in report.curves[-1].items() if k != "epoch"}
        assert report.final_metrics == last

    def test_learns_separable_data(self, tmp_path):
        train_path, eval_path, _, _ = write_logistic_dataset(
            tmp_path, n_train=2000, n_eval=500)
        cfg = make_config(tmp_path, train_config={
            "num_epochs": 5, "learning_rate": 0.05, "batch_size": 256})
        _, report = train(cfg, train_path=train_path, eval_path=eval_path)
        assert report.final_metrics["auc"] >= 0.95


class TestEarlyStop:
    def test_still_improving(self):
        assert early_stop_check([0.7, 0.71, 0.72], 2) is False

    def test_stale_curve(self):
        assert early_stop_check([0.72, 0.70, 0.70, 0.70], 2) is True

    def test_single_entry(self):
        assert early_stop_check([0.5], 3) is False

    def test_patience_stops_training(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path, train_config={"num_epochs": 50, "learning_rate": 1e-6})
        _, report = train(cfg, patience=2)
        assert report.stopped_early
        assert report.epochs_run < 50


class TestEpochCallback:
    def test_callback_can_stop(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path, train_config={"num_epochs": 10})
        seen = []

        def stop_after_three(epoch, metrics):
            seen.append(epoch)
            return epoch >= 3

        _, report = train(cfg, epoch_callback=stop_after_three)
        assert report.epochs_run == 3
        assert seen == [1, 2, 3]


class _ListSink:
    def __init__(self):
        self.frames = []

    def publish(self, frame: bytes) -> None:
        self.frames.append(frame)


class TestDeltaEmission:
    def test_cadence_and_versions(self, tmp_path):
        _small_dataset(tmp_path)
        # 120 rows, batch 16 -> 8 steps/epoch; period 5 -> emits at steps 5, 10
        # within epochs plus one final partial period
        cfg = make_config(tmp_path, train_config={
            "num_epochs": 2, "batch_size": 16, "delta_period_steps": 5})
        sink = _ListSink()
        art, report = train(cfg, sink=sink)
        messages = [decode_delta(f) for f in sink.frames]
        versions = [m.model_version for m in messages]
        assert versions == sorted(versions)
        assert len(set(versions)) == len(versions)
        assert report.deltas_emitted == len(messages) == 4
        assert art.model_version == versions[-1]

    def test_replay_reproduces_final_params(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path, train_config={
            "num_epochs": 2, "batch_size": 16, "delta_period_steps": 3})
        sink = _ListSink()
        art, _ = train(cfg, sink=sink)
        replayed = init_params(cfg, np.random.default_rng([cfg.train_config.seed, 0]))
        for frame in sink.frames:
            apply_message(replayed, decode_delta(frame))
        assert params_equal(replayed, art.params)

    def test_touched_rows_match_data(self, tmp_path):
        """One small batch: the delta carries exactly the referenced rows."""
        rows = [[1, "u1", "i1"], [0, "u2", "i1"]]
        write_csv(tmp_path / "train.csv", ["label", "user_id", "item_id"], rows)
        write_csv(tmp_path / "eval.csv", ["label", "user_id", "item_id"], rows)
        cfg = make_config(tmp_path, train_config={
            "num_epochs": 1, "batch_size": 2, "delta_period_steps": 1})
        sink = _ListSink()
        art, _ = train(cfg, sink=sink)
        (msg,) = [decode_delta(f) for f in sink.frames]
        fvs, _ = load_dataset(cfg, str(tmp_path / "train.csv"))
        expected = {
            (index, row)
            for fv in fvs
            for index, slot in ((0, "user_id"), (2, "item_id"))
            for row in fv.ids[slot]
        }
        # fo tensors sit at odd indices, one above their embedding table
        expected |= {(index + 1, row) for index, row in expected}
        got = {(rec.tensor_index, rec.row_id) for rec in msg.sparse}
        assert got == expected

    def test_emit_delta_empty_period_still_increments(self, tmp_path):
        cfg = make_config(tmp_path)
        params = init_params(cfg, np.random.default_rng([1, 0]))
        acc = DeltaAccumulator()
        msg = emit_delta(acc, params)
        assert msg.model_version == 1
        assert msg.sparse == () and msg.dense == ()
        again = emit_delta(acc, params)
        assert again.model_version == 2

    def test_delta_carries_values_not_gradients(self, tmp_path):
        _small_dataset(tmp_path)
        cfg = make_config(tmp_path, train_config={
            "num_epochs": 1, "batch_size": 16, "delta_period_steps": 100})
        sink = _ListSink()
        art, _ = train(cfg, sink=sink)
        final = decode_delta(sink.frames[-1])
        for record in final.sparse:
            name, arr = tensor_items(art.params)[record.tensor_index]
            if name.startswith("emb:"):
                np.testing.assert_array_equal(
                    np.asarray(record.values, np.float32), arr[record.row_id])
