"""Mini-batch training loop with evaluation, export, and delta emission.

Training is a pure function of (config, data bytes, seed). Three seeded
RNG streams keep the sources of randomness independent and reproducible:
[seed, 0] initializes parameters, [seed, 1] shuffles epochs, [seed, 2] is
reserved for gate noise in feature selection. Feature vectors are
generated once up front; epochs only permute indices.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .artifact import ModelArtifact
from .config import PipelineConfig
from .delta_stream import DeltaMessage, DenseRecord, SparseRecord, encode_delta
from .errors import DataError, IoError
from .features import FeatureVector, generate
from .model import (
    ModelParams,
    SparseGradient,
    backward,
    evaluate_metrics,
    forward,
    init_params,
    is_sparse_tensor,
    tensor_items,
)
from .optim import AdamOptimizer

_F32 = np.float32


@dataclass
class TrainReport:
    curves: list[dict] = field(default_factory=list)
    final_metrics: dict | None = None
    epochs_run: int = 0
    steps: int = 0
    deltas_emitted: int = 0
    stopped_early: bool = False

    def metric_curve(self, name: str) -> list[float]:
        return [c[name] for c in self.curves if name in c]


@dataclass
class DeltaAccumulator:
    """Rows touched since the last emission, keyed by tensor name."""

    touched: dict[str, set[int]] = field(default_factory=dict)
    dense_dirty: bool = False
    steps_since_emit: int = 0

    def add(self, grad: SparseGradient) -> None:
        for slot, rows in grad.emb_rows.items():
            self.touched.setdefault(f"emb:{slot}", set()).update(rows)
        for slot, rows in grad.fo_rows.items():
            self.touched.setdefault(f"fo:{slot}", set()).update(rows)
        self.dense_dirty = True
        self.steps_since_emit += 1

    def reset(self) -> None:
        self.touched.clear()
        self.dense_dirty = False
        self.steps_since_emit = 0


def emit_delta(acc: DeltaAccumulator, params: ModelParams) -> DeltaMessage:
    """Snapshot the touched rows' current values into a versioned message.

    The version increments first and the message carries the incremented
    value, so versions across a stream are strictly increasing even for
    empty periods. Values are the rows' current states, not gradients.
    """
    params.model_version += 1
    sparse: list[SparseRecord] = []
    dense: list[DenseRecord] = []
    for index, (name, arr) in enumerate(tensor_items(params)):
        if is_sparse_tensor(name):
            rows = acc.touched.get(name)
            if rows:
                for row_id in sorted(rows):
                    sparse.append(SparseRecord(index, row_id, tuple(float(x) for x in arr[row_id])))
        elif acc.dense_dirty:
            dense.append(DenseRecord(index, tuple(float(x) for x in arr.reshape(-1))))
    acc.reset()
    return DeltaMessage(
        model_version=params.model_version, sparse=tuple(sparse), dense=tuple(dense)
    )


def early_stop_check(curve: list[float], patience: int) -> bool:
    """True iff the best (highest) value occurred more than patience epochs ago."""
    if not curve:
        return False
    best_idx = 0
    for i, value in enumerate(curve):
        if value > curve[best_idx]:
            best_idx = i
    return (len(curve) - 1 - best_idx) > patience


def load_records(path: str, delimiter: str = ",") -> list[dict[str, str]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh, delimiter=delimiter)
            if reader.fieldnames is None:
                raise DataError(0, "missing header row")
            return [dict(row) for row in reader]
    except OSError as exc:
        raise IoError(f"cannot read {path!r}: {exc}") from exc


def load_dataset(cfg: PipelineConfig, path: str) -> tuple[list[FeatureVector], np.ndarray]:
    """Read a CSV and generate features once; labels as a 0/1 array."""
    d = cfg.data_config
    records = load_records(path, d.delimiter)
    fvs: list[FeatureVector] = []
    labels = np.zeros(len(records), dtype=np.int64)
    for i, record in enumerate(records):
        row = i + 1
        text = record.get(d.label_column)
        if text is None:
            raise DataError(row, f"missing label column {d.label_column!r}")
        try:
            value = float(text)
        except ValueError:
            raise DataError(row, f"non-numeric label {text!r}") from None
        if value not in (0.0, 1.0):
            raise DataError(row, f"label must be 0 or 1, got {text!r}")
        labels[i] = int(value)
        fvs.append(generate(record, cfg.feature_config))
    return fvs, labels


def score_all(params: ModelParams, fvs: list[FeatureVector]) -> list[float]:
    return [float(forward(params, fv).probability) for fv in fvs]


def evaluate_params(
    cfg: PipelineConfig, params: ModelParams, fvs: list[FeatureVector], labels: np.ndarray
) -> dict[str, float]:
    scores = score_all(params, fvs)
    metrics = evaluate_metrics(scores, labels.tolist())
    return {name: metrics[name] for name in cfg.eval_config.metrics}


def average_gradients(grads: list[SparseGradient], params: ModelParams) -> SparseGradient:
    """Mean of per-sample gradients; rows keep sparse union of touched sets."""
    scale = _F32(1.0 / len(grads))
    out = SparseGradient(
        emb_rows={},
        fo_rows={},
        mlp_weights=[np.zeros_like(w) for w in params.mlp_weights],
        mlp_biases=[np.zeros_like(b) for b in params.mlp_biases],
        bias=_F32(0.0),
    )
    for g in grads:
        for slot, rows in g.emb_rows.items():
            acc = out.emb_rows.setdefault(slot, {})
            for row_id, vec in rows.items():
                if row_id in acc:
                    acc[row_id] = acc[row_id] + vec
                else:
                    acc[row_id] = vec.copy()
        for slot, rows in g.fo_rows.items():
            acc_fo = out.fo_rows.setdefault(slot, {})
            for row_id, val in rows.items():
                acc_fo[row_id] = acc_fo.get(row_id, _F32(0.0)) + val
        for i, w in enumerate(g.mlp_weights):
            out.mlp_weights[i] += w
        for i, b in enumerate(g.mlp_biases):
            out.mlp_biases[i] += b
        out.bias = out.bias + g.bias
    for slot, rows in out.emb_rows.items():
        for row_id in rows:
            rows[row_id] = rows[row_id] * scale
    for slot, rows in out.fo_rows.items():
        for row_id in rows:
            rows[row_id] = rows[row_id] * scale
    for i in range(len(out.mlp_weights)):
        out.mlp_weights[i] *= scale
        out.mlp_biases[i] *= scale
    out.bias = out.bias * scale
    return out


def train(
    cfg: PipelineConfig,
    train_path: str | None = None,
    eval_path: str | None = None,
    sink=None,
    patience: int | None = None,
    epoch_callback=None,
) -> tuple[ModelArtifact, TrainReport]:
    """Run the full seeded training loop.

    sink: optional delta publisher; a delta is emitted and published every
    train_config.delta_period_steps optimizer steps, plus a final partial
    period. epoch_callback(epoch, metrics) may return True to stop after
    the current epoch (the HPO stopping hook). patience enables the
    trainer-local early stop on the first eval metric.
    """
    t = cfg.train_config
    effective_train = train_path if train_path is not None else cfg.data_config.train_path
    effective_eval = eval_path if eval_path is not None else cfg.data_config.eval_path
    if effective_train != cfg.data_config.train_path or effective_eval != cfg.data_config.eval_path:
        cfg = dataclasses.replace(
            cfg,
            data_config=dataclasses.replace(
                cfg.data_config, train_path=effective_train, eval_path=effective_eval
            ),
        )

    init_rng = np.random.default_rng([t.seed, 0])
    shuffle_rng = np.random.default_rng([t.seed, 1])
    params = init_params(cfg, init_rng)
    optimizer = AdamOptimizer(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_epsilon)
    acc = DeltaAccumulator()
    report = TrainReport()

    fvs, labels = load_dataset(cfg, effective_train) if t.num_epochs > 0 else ([], np.zeros(0))
    eval_data = None
    if effective_eval:
        eval_data = load_dataset(cfg, effective_eval)

    reg = cfg.model_config.embedding_regularization
    primary_metric = cfg.eval_config.metrics[0] if cfg.eval_config.metrics else None
    stop = False
    for epoch in range(1, t.num_epochs + 1):
        order = shuffle_rng.permutation(len(fvs))
        for start in range(0, len(order), t.batch_size):
            batch = order[start : start + t.batch_size]
            grads = []
            for idx in batch:
                fv = fvs[idx]
                trace = forward(params, fv)
                grads.append(backward(trace, fv, int(labels[idx]), reg))
            avg = average_gradients(grads, params)
            optimizer.apply(params, avg)
            acc.add(avg)
            report.steps += 1
            if sink is not None and report.steps % t.delta_period_steps == 0:
                sink.publish(encode_delta(emit_delta(acc, params)))
                report.deltas_emitted += 1
        report.epochs_run = epoch

        metrics = None
        if eval_data is not None and epoch % cfg.eval_config.eval_interval == 0:
            metrics = evaluate_params(cfg, params, eval_data[0], eval_data[1])
            report.curves.append({"epoch": epoch, **metrics})
            report.final_metrics = metrics
        if patience is not None and primary_metric is not None:
            curve = report.metric_curve(primary_metric)
            if primary_metric == "logloss":
                curve = [-v for v in curve]
            if early_stop_check(curve, patience):
                report.stopped_early = True
                stop = True
        if epoch_callback is not None and epoch_callback(epoch, metrics):
            report.stopped_early = True
            stop = True
        if stop:
            break

    if sink is not None and acc.steps_since_emit > 0:
        sink.publish(encode_delta(emit_delta(acc, params)))
        report.deltas_emitted += 1

    artifact = ModelArtifact(config=cfg, params=params, seed=t.seed, step_count=report.steps)
    return artifact, report
