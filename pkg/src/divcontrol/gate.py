"""Instruction-conditioned routing over tailor components.

A frozen hashed-token embedding stands in for a pretrained text encoder;
a two-layer perceptron maps the embedding to softmax scores over tailors.
Selection applies per-tailor balance biases (top-K on score + bias) while
the emitted coefficients stay unbiased, and the biases are nudged after
each batch toward uniform tailor load without any auxiliary loss term.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, InvalidInputError
from .factorized import GatedCoefficients
from .rng import stream
from .tensor import Tensor, cosine_similarity

VOCAB_HASH_SIZE = 4096


@dataclass(frozen=True)
class InstructionEmbedding:
    condition_id: str
    text: str
    e_txt: np.ndarray  # unit-norm, frozen


def _token_index(token: str) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % VOCAB_HASH_SIZE


class InstructionEncoder:
    """Frozen bag-of-tokens encoder: hash tokens into a seeded Gaussian
    table, mean-pool, L2-normalize."""

    def __init__(self, encoder_seed: int, embed_dim: int):
        self.encoder_seed = int(encoder_seed)
        self.embed_dim = int(embed_dim)
        gen = stream(encoder_seed, "embed-table")
        self.table = gen.standard_normal((VOCAB_HASH_SIZE, embed_dim))

    def encode(self, text: str, condition_id: str = "") -> InstructionEmbedding:
        tokens = text.lower().split()
        if not tokens:
            raise InvalidInputError("instruction text is empty")
        rows = self.table[[_token_index(t) for t in tokens]]
        pooled = rows.mean(axis=0)
        norm = np.linalg.norm(pooled)
        if norm > 0:
            pooled = pooled / norm
        return InstructionEmbedding(condition_id=condition_id, text=text,
                                    e_txt=pooled)


def embed_instruction(encoder_seed: int, text: str, embed_dim: int = 64,
                      condition_id: str = "") -> InstructionEmbedding:
    return InstructionEncoder(encoder_seed, embed_dim).encode(text, condition_id)


@dataclass
class GateState:
    """Routing network plus load-balancing state.

    ``balance_bias`` takes part only in top-K selection, never in the
    emitted coefficient values. ``batch_count`` holds tailor activations
    since the last bias update; ``usage_count`` accumulates the totals.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    k: int
    bias_update_rate: float = 1e-3
    balance_bias: np.ndarray = None
    usage_count: np.ndarray = None
    batch_count: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        n_t = self.w2.shape[0]
        if not (0 <= self.k <= max(n_t, 1)):
            raise ContractError(f"K={self.k} outside [0, {n_t}]")
        if self.balance_bias is None:
            self.balance_bias = np.zeros(n_t)
        if self.usage_count is None:
            self.usage_count = np.zeros(n_t, dtype=np.int64)
        if self.batch_count is None:
            self.batch_count = np.zeros(n_t, dtype=np.int64)

    @property
    def n_tailor(self) -> int:
        return self.w2.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @staticmethod
    def init(embed_dim: int, n_tailor: int, k: int, seed: int,
             bias_update_rate: float = 1e-3) -> "GateState":
        """Hidden layer Kaiming-uniform, output layer zero so routing starts
        uniform."""
        gen = stream(seed, "init", "gate")
        bound = np.sqrt(6.0 / embed_dim)
        w1 = Tensor(gen.uniform(-bound, bound, (embed_dim, embed_dim)),
                    requires_grad=True)
        b1 = Tensor(np.zeros(embed_dim), requires_grad=True)
        w2 = Tensor(np.zeros((n_tailor, embed_dim)), requires_grad=True)
        b2 = Tensor(np.zeros(n_tailor), requires_grad=True)
        return GateState(w1, b1, w2, b2, k=k, bias_update_rate=bias_update_rate)


def gate_logits(gate: GateState, e: InstructionEmbedding) -> Tensor:
    if e.e_txt.size != gate.embed_dim:
        raise ContractError(
            f"embedding dim {e.e_txt.size} != gate dim {gate.embed_dim}")
    h = T.tanh(T.add(T.linear(Tensor(e.e_txt.reshape(1, -1)), gate.w1), gate.b1))
    return T.reshape(T.add(T.linear(h, gate.w2), gate.b2), (gate.n_tailor,))


def route(gate: GateState, e: InstructionEmbedding) -> Tensor:
    """Softmax routing weights over tailors; differentiable into the gate."""
    return T.softmax(gate_logits(gate, e))


def topk_select(alpha, gate: GateState,
                active_override: tuple | None = None) -> GatedCoefficients:
    """Pick the K tailors with the largest biased score, keep unbiased values.

    Ties break toward the lower index. ``active_override`` pins the active
    set (used by gradient probes where selection must stay fixed).
    """
    alpha_t = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    n_t = gate.n_tailor
    if alpha_t.size != n_t:
        raise ContractError(f"alpha length {alpha_t.size} != n_tailor {n_t}")
    k = min(gate.k, n_t)
    if active_override is not None:
        active = tuple(active_override)
    elif k == 0:
        active = ()
    else:
        scores = alpha_t.data + gate.balance_bias
        order = np.argsort(-scores, kind="stable")  # stable: ties -> lower index
        active = tuple(int(i) for i in order[:k])
    mask = np.zeros(n_t)
    if active:
        mask[list(active)] = 1.0
    g = T.mul(alpha_t, mask)
    return GatedCoefficients(g=g, active_set=active)


def record_usage(gate: GateState, active_set, count: int = 1) -> None:
    """Count ``count`` routing events for each tailor in ``active_set``."""
    for j in active_set:
        gate.batch_count[j] += count


def update_biases(gate: GateState) -> None:
    """Sign-rule balance update from the batch's load, then fold counts.

    b_i <- b_i - rate * sign(load_i - mean_load); sign(0) = 0, so a
    perfectly balanced batch leaves the biases untouched.
    """
    load = gate.batch_count.astype(np.float64)
    if load.size:
        delta = np.sign(load - load.mean())
        gate.balance_bias = gate.balance_bias - gate.bias_update_rate * delta
    gate.usage_count = gate.usage_count + gate.batch_count
    gate.batch_count = np.zeros_like(gate.batch_count)


def compose_multi_condition(gate: GateState, embeddings) -> GatedCoefficients:
    """Route a combination of conditions: average the gate logits, then
    softmax and top-K select as usual."""
    embeddings = list(embeddings)
    if len(embeddings) < 2:
        raise ContractError("compose_multi_condition needs at least 2 embeddings")
    logits = gate_logits(gate, embeddings[0])
    for e in embeddings[1:]:
        logits = T.add(logits, gate_logits(gate, e))
    alpha = T.softmax(T.mul(logits, 1.0 / len(embeddings)))
    return topk_select(alpha, gate)


def similarity_matrix(gate: GateState, embeddings) -> np.ndarray:
    """Pairwise cosine similarity of routing vectors; symmetric, unit diagonal."""
    embeddings = list(embeddings)
    if len(embeddings) < 2:
        raise ContractError("similarity_matrix needs at least 2 embeddings")
    with T.no_grad():
        alphas = [route(gate, e).data for e in embeddings]
    n = len(alphas)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = cosine_similarity(alphas[i], alphas[j])
    return sim
