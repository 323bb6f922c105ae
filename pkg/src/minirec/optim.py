"""Lazy sparse Adam.

Sparse tensors (embedding and first-order tables) keep per-row moment
vectors and per-row step counts: a row's moments and bias-correction
exponent advance only when a batch touches it. Untouched rows stay
bit-identical across steps, which is what makes "parameters changed this
period" a well-defined small set for delta streaming.

Dense tensors (MLP weights, global bias) use ordinary Adam with a shared
step count, since every step touches all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, SparseGradient

_F32 = np.float32


@dataclass
class _DenseState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class _SparseState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    step: dict[int, int] = field(default_factory=dict)


@dataclass
class AdamOptimizer:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        self._emb: dict[str, _SparseState] = {}
        self._fo: dict[str, _SparseState] = {}
        self._dense: dict[str, _DenseState] = {}

    def _sparse_row_update(self, state: _SparseState, row: np.ndarray, grad: np.ndarray, row_id: int) -> None:
        b1, b2 = _F32(self.beta1), _F32(self.beta2)
        m = state.m.get(row_id)
        if m is None:
            m = np.zeros_like(row)
            v = np.zeros_like(row)
        else:
            v = state.v[row_id]
        t = state.step.get(row_id, 0) + 1
        m = b1 * m + (_F32(1.0) - b1) * grad
        v = b2 * v + (_F32(1.0) - b2) * (grad * grad)
        state.m[row_id] = m
        state.v[row_id] = v
        state.step[row_id] = t
        m_hat = m / _F32(1.0 - self.beta1**t)
        v_hat = v / _F32(1.0 - self.beta2**t)
        row -= _F32(self.learning_rate) * m_hat / (np.sqrt(v_hat) + _F32(self.epsilon))

    def _dense_update(self, name: str, value: np.ndarray, grad: np.ndarray) -> None:
        state = self._dense.get(name)
        if state is None:
            state = _DenseState(m=np.zeros_like(value), v=np.zeros_like(value))
            self._dense[name] = state
        b1, b2 = _F32(self.beta1), _F32(self.beta2)
        state.step += 1
        state.m = b1 * state.m + (_F32(1.0) - b1) * grad
        state.v = b2 * state.v + (_F32(1.0) - b2) * (grad * grad)
        m_hat = state.m / _F32(1.0 - self.beta1**state.step)
        v_hat = state.v / _F32(1.0 - self.beta2**state.step)
        value -= _F32(self.learning_rate) * m_hat / (np.sqrt(v_hat) + _F32(self.epsilon))

    def apply(self, params: ModelParams, grad: SparseGradient) -> None:
        """Update params in place. Rows absent from grad are not read."""
        for slot in sorted(grad.emb_rows):
            table = params.tables[slot]
            state = self._emb.setdefault(slot, _SparseState())
            for row_id in sorted(grad.emb_rows[slot]):
                self._sparse_row_update(state, table.values[row_id], grad.emb_rows[slot][row_id], row_id)
        for slot in sorted(grad.fo_rows):
            table = params.tables[slot]
            state = self._fo.setdefault(slot, _SparseState())
            for row_id in sorted(grad.fo_rows[slot]):
                g = np.array([grad.fo_rows[slot][row_id]], dtype=_F32)
                self._sparse_row_update(state, table.first_order[row_id], g, row_id)
        for i, g in enumerate(grad.mlp_weights):
            self._dense_update(f"mlp:W{i}", params.mlp_weights[i], g)
        for i, g in enumerate(grad.mlp_biases):
            self._dense_update(f"mlp:b{i}", params.mlp_biases[i], g)
        self._dense_update("bias", params.bias, np.array([grad.bias], dtype=_F32))


@dataclass
class ScalarAdam:
    """Adam over a flat float64 vector; used by the gate optimizer."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        self._m: np.ndarray | None = None
        self._v: np.ndarray | None = None
        self._step = 0

    def apply(self, values: np.ndarray, grads: np.ndarray) -> None:
        if self._m is None:
            self._m = np.zeros_like(values)
            self._v = np.zeros_like(values)
        self._step += 1
        self._m = self.beta1 * self._m + (1.0 - self.beta1) * grads
        self._v = self.beta2 * self._v + (1.0 - self.beta2) * (grads * grads)
        m_hat = self._m / (1.0 - self.beta1**self._step)
        v_hat = self._v / (1.0 - self.beta2**self._step)
        values -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
