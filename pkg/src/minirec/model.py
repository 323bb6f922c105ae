"""DeepFM-style CTR model: lookup, FM interaction, MLP, manual gradients.

Parameters are 32-bit floats and every reduction runs in a fixed
sequential order, so a forward pass is bitwise reproducible on one
platform and scores survive the 32-bit serving wire format unchanged.

The forward pass is split into `compute_parts` (per-slot pooled embedding
and first-order sums) and `assemble` (FM + MLP + bias on top of the
parts). The serving cache stores per-slot parts and re-assembles, so the
cached path runs the exact same float operations as the uncached one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .config import PipelineConfig
from .errors import (
    DegenerateLabels,
    DimensionMismatch,
    IndexOutOfRange,
    SlotMismatch,
)
from .features import FeatureSpec, FeatureVector

PROB_CLIP = 1e-7

_F32 = np.float32


@dataclass
class EmbeddingTable:
    name: str
    vocab_size: int
    dim: int
    values: np.ndarray
    first_order: np.ndarray

    def check(self) -> None:
        assert self.values.shape == (self.vocab_size, self.dim)
        assert self.first_order.shape == (self.vocab_size, 1)


@dataclass
class ModelParams:
    specs: tuple[FeatureSpec, ...]
    model_type: str
    embedding_dim: int
    tables: dict[str, EmbeddingTable]
    mlp_weights: list[np.ndarray]
    mlp_biases: list[np.ndarray]
    bias: np.ndarray
    model_version: int = 0

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.specs)


class SlotPart(NamedTuple):
    """Per-slot forward intermediates: pooled embedding and first-order sum.

    `pooled` is None for the logreg model type, which never reads the
    embedding tables.
    """

    pooled: np.ndarray | None
    fo: np.float32


@dataclass
class ForwardTrace:
    params: ModelParams
    fv: FeatureVector
    parts: dict[str, SlotPart]
    slot_scale: Mapping[str, float] | None
    scaled_pooled: list[np.ndarray]
    fm: np.float32
    mlp_input: np.ndarray | None
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    logit: np.float32
    probability: np.float32


@dataclass
class SparseGradient:
    emb_rows: dict[str, dict[int, np.ndarray]]
    fo_rows: dict[str, dict[int, np.float32]]
    mlp_weights: list[np.ndarray]
    mlp_biases: list[np.ndarray]
    bias: np.float32
    slot_scale: dict[str, float] | None = None


def mlp_layer_dims(num_slots: int, embedding_dim: int, hidden: Sequence[int]) -> list[tuple[int, int]]:
    dims = [num_slots * embedding_dim, *hidden, 1]
    return list(zip(dims, dims[1:]))


def init_params(cfg: PipelineConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters: embeddings U(-0.01, 0.01), MLP Glorot, rest zero.

    Draw order is fixed (tables in config order, then MLP layers) so a
    seeded generator produces identical parameters on every run.
    """
    m = cfg.model_config
    tables: dict[str, EmbeddingTable] = {}
    for spec in cfg.feature_config:
        vocab = spec.table_vocab_size
        values = rng.uniform(-0.01, 0.01, size=(vocab, m.embedding_dim)).astype(_F32)
        first_order = np.zeros((vocab, 1), dtype=_F32)
        tables[spec.name] = EmbeddingTable(spec.name, vocab, m.embedding_dim, values, first_order)
    mlp_weights: list[np.ndarray] = []
    mlp_biases: list[np.ndarray] = []
    if m.model_type == "deepfm":
        for fan_in, fan_out in mlp_layer_dims(len(cfg.feature_config), m.embedding_dim, m.mlp_hidden_dims):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            mlp_weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(_F32))
            mlp_biases.append(np.zeros(fan_out, dtype=_F32))
    return ModelParams(
        specs=cfg.feature_config,
        model_type=m.model_type,
        embedding_dim=m.embedding_dim,
        tables=tables,
        mlp_weights=mlp_weights,
        mlp_biases=mlp_biases,
        bias=np.zeros(1, dtype=_F32),
        model_version=0,
    )


def tensor_items(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    """All tensors in canonical directory order.

    The position of a tensor in this list is its wire index for delta
    messages, and its position in the artifact payload.
    """
    out: list[tuple[str, np.ndarray]] = []
    for spec in params.specs:
        table = params.tables[spec.name]
        out.append((f"emb:{spec.name}", table.values))
        out.append((f"fo:{spec.name}", table.first_order))
    for i, (w, b) in enumerate(zip(params.mlp_weights, params.mlp_biases)):
        out.append((f"mlp:W{i}", w))
        out.append((f"mlp:b{i}", b))
    out.append(("bias", params.bias))
    return out


def is_sparse_tensor(name: str) -> bool:
    """Sparse tensors are row-addressable in deltas; dense ones ship whole."""
    return name.startswith("emb:") or name.startswith("fo:")


def copy_params(params: ModelParams) -> ModelParams:
    tables = {
        name: EmbeddingTable(t.name, t.vocab_size, t.dim, t.values.copy(), t.first_order.copy())
        for name, t in params.tables.items()
    }
    return ModelParams(
        specs=params.specs,
        model_type=params.model_type,
        embedding_dim=params.embedding_dim,
        tables=tables,
        mlp_weights=[w.copy() for w in params.mlp_weights],
        mlp_biases=[b.copy() for b in params.mlp_biases],
        bias=params.bias.copy(),
        model_version=params.model_version,
    )


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    items_a, items_b = tensor_items(a), tensor_items(b)
    if [n for n, _ in items_a] != [n for n, _ in items_b]:
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for (_, x), (_, y) in zip(items_a, items_b))


def pooled_lookup(
    table: EmbeddingTable,
    ids: Sequence[int],
    pooling: str = "sum",
    weights: Sequence[float] | None = None,
) -> np.ndarray:
    """Sum (or mean) of table rows, accumulated in id-list position order."""
    out = np.zeros(table.dim, dtype=_F32)
    for j, row_id in enumerate(ids):
        if not 0 <= row_id < table.vocab_size:
            raise IndexOutOfRange(row_id, table.vocab_size)
        row = table.values[row_id]
        if weights is None:
            out += row
        else:
            out += _F32(weights[j]) * row
    if pooling == "mean" and ids:
        out /= _F32(len(ids))
    return out


def first_order_sum(
    table: EmbeddingTable, ids: Sequence[int], weights: Sequence[float] | None = None
) -> np.float32:
    total = _F32(0.0)
    for j, row_id in enumerate(ids):
        if not 0 <= row_id < table.vocab_size:
            raise IndexOutOfRange(row_id, table.vocab_size)
        w = table.first_order[row_id, 0]
        total = total + (w if weights is None else _F32(weights[j]) * w)
    return total


def fm_second_order(pooled: Sequence[np.ndarray]) -> np.float32:
    """Second-order FM term via 0.5 * sum_k[(sum_i e_ik)^2 - sum_i e_ik^2].

    Equal to the sum of pairwise dot products of the vectors.
    """
    vectors = list(pooled)
    if not vectors:
        return _F32(0.0)
    dim = vectors[0].shape[0]
    total = np.zeros(dim, dtype=_F32)
    total_sq = np.zeros(dim, dtype=_F32)
    for v in vectors:
        if v.shape[0] != dim:
            raise DimensionMismatch(f"expected dim {dim}, got {v.shape[0]}")
        total += v
        total_sq += v * v
    acc = _F32(0.0)
    for k in range(dim):
        acc = acc + (total[k] * total[k] - total_sq[k])
    return _F32(0.5) * acc


def compute_parts(
    params: ModelParams, fv: FeatureVector, specs: Sequence[FeatureSpec] | None = None
) -> dict[str, SlotPart]:
    """Per-slot pooled embeddings and first-order sums.

    This is the cacheable unit in serving: a slot's part depends only on
    that slot's features and tables, never on other slots. `specs`
    restricts computation to a subset of the model's slots (serving
    computes user-side, item-side, and cross parts separately).
    """
    known = set(params.slot_names)
    for name in set(fv.ids) | set(fv.dense):
        if name not in known:
            raise SlotMismatch(f"feature vector has undeclared slot {name!r}")
    need_pooled = params.model_type == "deepfm"
    parts: dict[str, SlotPart] = {}
    for spec in params.specs if specs is None else specs:
        table = params.tables[spec.name]
        if spec.kind == "numeric_raw":
            value = _F32(fv.dense.get(spec.name, 0.0))
            pooled = value * table.values[0] if need_pooled else None
            parts[spec.name] = SlotPart(pooled, value * table.first_order[0, 0])
        else:
            ids = fv.ids.get(spec.name, ())
            weights = fv.weights.get(spec.name)
            pooled = pooled_lookup(table, ids, spec.pooling, weights) if need_pooled else None
            parts[spec.name] = SlotPart(pooled, first_order_sum(table, ids, weights))
    return parts


def _clip_probability(logit: np.float32) -> np.float32:
    p = 1.0 / (1.0 + math.exp(-float(logit)))
    return _F32(min(max(p, PROB_CLIP), 1.0 - PROB_CLIP))


def assemble(
    params: ModelParams,
    fv: FeatureVector,
    parts: dict[str, SlotPart],
    slot_scale: Mapping[str, float] | None = None,
) -> ForwardTrace:
    """Combine per-slot parts into the final logit and probability.

    `slot_scale` multiplies a slot's pooled embedding and first-order
    contribution before they enter the logit; the feature-selection gates
    drive this hook. Absent slots default to scale 1.
    """
    logit = params.bias[0]
    for spec in params.specs:
        scale = _F32(1.0) if slot_scale is None else _F32(slot_scale.get(spec.name, 1.0))
        logit = logit + scale * parts[spec.name].fo

    scaled_pooled: list[np.ndarray] = []
    fm = _F32(0.0)
    mlp_input: np.ndarray | None = None
    pre_activations: list[np.ndarray] = []
    activations: list[np.ndarray] = []
    if params.model_type == "deepfm":
        for spec in params.specs:
            scale = _F32(1.0) if slot_scale is None else _F32(slot_scale.get(spec.name, 1.0))
            scaled_pooled.append(scale * parts[spec.name].pooled)
        fm = fm_second_order(scaled_pooled)
        logit = logit + fm
        mlp_input = np.concatenate(scaled_pooled) if scaled_pooled else np.zeros(0, dtype=_F32)
        x = mlp_input
        last = len(params.mlp_weights) - 1
        for i, (w, b) in enumerate(zip(params.mlp_weights, params.mlp_biases)):
            pre = x @ w + b
            pre_activations.append(pre)
            x = pre if i == last else np.maximum(pre, _F32(0.0))
            activations.append(x)
        logit = logit + x[0]

    return ForwardTrace(
        params=params,
        fv=fv,
        parts=parts,
        slot_scale=dict(slot_scale) if slot_scale is not None else None,
        scaled_pooled=scaled_pooled,
        fm=fm,
        mlp_input=mlp_input,
        pre_activations=pre_activations,
        activations=activations,
        logit=_F32(logit),
        probability=_clip_probability(_F32(logit)),
    )


def forward(
    params: ModelParams, fv: FeatureVector, slot_scale: Mapping[str, float] | None = None
) -> ForwardTrace:
    return assemble(params, fv, compute_parts(params, fv), slot_scale)


def backward(trace: ForwardTrace, fv: FeatureVector, label: int, reg: float = 0.0) -> SparseGradient:
    """Exact gradient of logloss + reg * sum_touched ||row||^2.

    Sparse entries cover exactly the rows fv references; for the logreg
    model type the embedding tables never enter the loss, so only
    first-order rows and the bias appear.
    """
    params = trace.params
    d = _F32(trace.probability - _F32(label))

    grad = SparseGradient(
        emb_rows={},
        fo_rows={},
        mlp_weights=[np.zeros_like(w) for w in params.mlp_weights],
        mlp_biases=[np.zeros_like(b) for b in params.mlp_biases],
        bias=d,
        slot_scale={} if trace.slot_scale is not None else None,
    )

    grad_input: np.ndarray | None = None
    if params.model_type == "deepfm" and params.mlp_weights:
        delta = np.array([d], dtype=_F32)
        for i in range(len(params.mlp_weights) - 1, -1, -1):
            x = trace.activations[i - 1] if i > 0 else trace.mlp_input
            grad.mlp_weights[i] = np.outer(x, delta).astype(_F32)
            grad.mlp_biases[i] = delta.copy()
            delta = delta @ params.mlp_weights[i].T
            if i > 0:
                delta = delta * (trace.pre_activations[i - 1] > 0)
        grad_input = delta

    fm_total: np.ndarray | None = None
    if params.model_type == "deepfm":
        fm_total = np.zeros(params.embedding_dim, dtype=_F32)
        for u in trace.scaled_pooled:
            fm_total += u

    dim = params.embedding_dim
    for slot_index, spec in enumerate(params.specs):
        part = trace.parts[spec.name]
        scale = _F32(1.0)
        if trace.slot_scale is not None:
            scale = _F32(trace.slot_scale.get(spec.name, 1.0))

        grad_pooled = None
        grad_scaled = None
        if params.model_type == "deepfm":
            u = trace.scaled_pooled[slot_index]
            grad_scaled = d * (fm_total - u)
            if grad_input is not None:
                grad_scaled = grad_scaled + grad_input[slot_index * dim : (slot_index + 1) * dim]
            grad_pooled = scale * grad_scaled

        if grad.slot_scale is not None:
            gate = d * part.fo
            if grad_scaled is not None:
                gate = gate + float(np.dot(grad_scaled, part.pooled))
            grad.slot_scale[spec.name] = float(gate)

        emb_slot: dict[int, np.ndarray] = {}
        fo_slot: dict[int, np.float32] = {}
        if spec.kind == "numeric_raw":
            value = _F32(fv.dense.get(spec.name, 0.0))
            if value != 0.0:
                fo_slot[0] = d * scale * value
                if grad_pooled is not None:
                    emb_slot[0] = grad_pooled * value
        else:
            ids = fv.ids.get(spec.name, ())
            weights = fv.weights.get(spec.name)
            divisor = _F32(len(ids)) if spec.pooling == "mean" and ids else _F32(1.0)
            for j, row_id in enumerate(ids):
                w = _F32(1.0) if weights is None else _F32(weights[j])
                fo_slot[row_id] = fo_slot.get(row_id, _F32(0.0)) + d * scale * w
                if grad_pooled is not None:
                    contrib = grad_pooled * (w / divisor)
                    if row_id in emb_slot:
                        emb_slot[row_id] = emb_slot[row_id] + contrib
                    else:
                        emb_slot[row_id] = contrib.copy()
        if reg > 0.0 and params.model_type == "deepfm":
            table = params.tables[spec.name]
            for row_id in list(emb_slot):
                emb_slot[row_id] = emb_slot[row_id] + _F32(2.0 * reg) * table.values[row_id]
        if emb_slot:
            grad.emb_rows[spec.name] = emb_slot
        if fo_slot:
            grad.fo_rows[spec.name] = fo_slot
    return grad


def logloss(scores: Iterable[float], labels: Iterable[float]) -> float:
    """Mean binary cross-entropy in 64-bit floats, probabilities clipped."""
    total = 0.0
    count = 0
    for score, label in zip(scores, labels):
        p = min(max(float(score), PROB_CLIP), 1.0 - PROB_CLIP)
        total += -(label * math.log(p) + (1.0 - label) * math.log(1.0 - p))
        count += 1
    if count == 0:
        raise DimensionMismatch("empty score list")
    return total / count


def auc(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties 0.5.

    Computed with average ranks: for P positives and N negatives,
    AUC = (sum of positive ranks - P(P+1)/2) / (P*N). With average ranks
    for tied scores this equals pairwise counting with half credit.
    """
    if len(scores) != len(labels):
        raise DimensionMismatch("scores and labels differ in length")
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    pos = sum(1 for y in labels if y == 1)
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise DegenerateLabels(logloss(scores, labels))
    rank_sum = 0.0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            j += 1
        avg_rank = (i + 1 + j) / 2.0
        for k in range(i, j):
            if labels[order[k]] == 1:
                rank_sum += avg_rank
        i = j
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def evaluate_metrics(scores: Sequence[float], labels: Sequence[float]) -> dict[str, float]:
    if len(scores) != len(labels):
        raise DimensionMismatch("scores and labels differ in length")
    return {"auc": auc(scores, labels), "logloss": logloss(scores, labels)}
