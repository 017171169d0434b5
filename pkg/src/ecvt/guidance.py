"""Semantic guidance applied to encoded video tokens.

Three mechanisms, each shape-preserving on (L, D_V) features:

* :func:`gate_fuse`   - sigmoid-gated blend of tokens with a projected global prompt.
* :func:`refine`      - cross-attention from tokens to the per-clip prompts, residual.
* :func:`calibrate`   - one masked graph-attention round over event nodes, then
  token-to-node attention with a temporal-distance penalty, residual.

All weights are stored as (out, in) matrices and applied as ``x @ W.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .numerics import Tensor
from .prompt_oracle import EventGraph

_MASKED = -1e30


@dataclass
class GateParams:
    W_g: Tensor  # (D_V, D_V + D_P)
    b_g: Tensor  # (D_V,)
    W_p: Tensor  # (D_V, D_P)

    @classmethod
    def init(cls, d_v: int, d_p: int, seed: int, prefix: str = "gate") -> "GateParams":
        return cls(
            nx.seeded_uniform(seed, f"{prefix}.W_g", (d_v, d_v + d_p), d_v + d_p),
            nx.zeros_param((d_v,)),
            nx.seeded_uniform(seed, f"{prefix}.W_p", (d_v, d_p), d_p),
        )


@dataclass
class CrossAttnParams:
    W_Q: Tensor  # (D_P, D_V)
    W_K: Tensor  # (D_P, D_P)
    W_V: Tensor  # (D_V, D_P)

    @classmethod
    def init(cls, d_v: int, d_p: int, seed: int, prefix: str = "refine") -> "CrossAttnParams":
        return cls(
            nx.seeded_uniform(seed, f"{prefix}.W_Q", (d_p, d_v), d_v),
            nx.seeded_uniform(seed, f"{prefix}.W_K", (d_p, d_p), d_p),
            nx.seeded_uniform(seed, f"{prefix}.W_V", (d_v, d_p), d_p),
        )


@dataclass
class CalibParams:
    # node update (graph attention over neighbours)
    node_q: Tensor  # (D_P, D_P)
    node_k: Tensor  # (D_P, D_P)
    node_v: Tensor  # (D_P, D_P)
    # token -> node cross-attention
    tok_q: Tensor  # (D_P, D_V)
    tok_k: Tensor  # (D_P, D_P)
    tok_v: Tensor  # (D_V, D_P)

    @classmethod
    def init(cls, d_v: int, d_p: int, seed: int, prefix: str = "calib") -> "CalibParams":
        u = lambda name, shape, fan: nx.seeded_uniform(seed, f"{prefix}.{name}", shape, fan)  # noqa: E731
        return cls(
            u("node_q", (d_p, d_p), d_p),
            u("node_k", (d_p, d_p), d_p),
            u("node_v", (d_p, d_p), d_p),
            u("tok_q", (d_p, d_v), d_v),
            u("tok_k", (d_p, d_p), d_p),
            u("tok_v", (d_v, d_p), d_p),
        )


def _check_width(F: Tensor, w: Tensor, axis_in: int, what: str) -> None:
    if F.ndim != 2 or w.shape[axis_in] != F.shape[1]:
        raise DimensionError(f"{what}: features {F.shape} do not fit weight {w.shape}")


def gate_fuse(F: Tensor, p_global, params: GateParams) -> Tensor:
    """Per-token gate g_i = sigmoid(W_g [f_i; p] + b_g); out_i = g_i*f_i + (1-g_i)*(W_p p)."""
    p = nx.as_tensor(p_global)
    d_v = F.shape[1] if F.ndim == 2 else -1
    if params.W_g.shape != (d_v, d_v + p.shape[0]) or params.W_p.shape != (d_v, p.shape[0]):
        raise DimensionError(
            f"gate_fuse: features {F.shape}, prompt {p.shape}, W_g {params.W_g.shape}, W_p {params.W_p.shape}"
        )
    joint = nx.concat([F, nx.repeat_rows(p, F.shape[0])], axis=1)
    g = nx.sigmoid(nx.linear(joint, params.W_g, params.b_g))
    projected = nx.matvec(params.W_p, p)
    return nx.add(nx.mul(g, F), nx.mul(nx.sub(1.0, g), projected))


def gate_values(F: Tensor, p_global, params: GateParams) -> np.ndarray:
    p = nx.as_tensor(p_global)
    joint = nx.concat([F, nx.repeat_rows(p, F.shape[0])], axis=1)
    return nx.sigmoid(nx.linear(joint, params.W_g, params.b_g)).data


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float, bias: np.ndarray | None = None) -> Tensor:
    logits = nx.mul(nx.matmul(q, nx.transpose(k)), scale)
    if bias is not None:
        logits = nx.add(logits, bias)
    return nx.matmul(nx.softmax_rows(logits), v)


def refine(F: Tensor, subs, params: CrossAttnParams) -> Tensor:
    """Cross-attention of every token over all M sub-event embeddings, with residual."""
    P = nx.as_tensor(np.asarray(subs, dtype=np.float64) if not isinstance(subs, Tensor) else subs)
    if P.ndim != 2 or P.shape[0] < 1:
        raise ContractError(f"refine needs at least one sub-event embedding, got shape {P.shape}")
    _check_width(F, params.W_Q, 1, "refine")
    d_p = params.W_K.shape[0]
    Q = nx.linear(F, params.W_Q)
    K = nx.linear(P, params.W_K)
    V = nx.linear(P, params.W_V)
    return nx.add(F, _attend(Q, K, V, 1.0 / math.sqrt(d_p)))


def attention_weights(F: Tensor, subs, params: CrossAttnParams) -> np.ndarray:
    P = nx.as_tensor(np.asarray(subs, dtype=np.float64))
    Q = nx.linear(F, params.W_Q)
    K = nx.linear(P, params.W_K)
    logits = nx.mul(nx.matmul(Q, nx.transpose(K)), 1.0 / math.sqrt(params.W_K.shape[0]))
    return nx.softmax_rows(logits).data


def interval_gaps(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gap in seconds between every row of ``a`` and of ``b``; 0 where they overlap."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    gap = np.maximum(b[None, :, 0] - a[:, None, 1], a[:, None, 0] - b[None, :, 1])
    return np.maximum(gap, 0.0)


def update_nodes(H: Tensor, graph: EventGraph, params: CalibParams) -> Tensor:
    """One masked attention round: node n sees itself and its in/out neighbours."""
    d_p = params.node_k.shape[0]
    mask = np.where(graph.adjacency(), 0.0, _MASKED)
    Q = nx.linear(H, params.node_q)
    K = nx.linear(H, params.node_k)
    V = nx.linear(H, params.node_v)
    return nx.add(H, _attend(Q, K, V, 1.0 / math.sqrt(d_p), mask))


def calibrate(
    F: Tensor,
    graph: EventGraph,
    spans,
    params: CalibParams,
    gamma: float = 1.0,
    rounds: int = 1,
    node_embeddings: Tensor | None = None,
) -> Tensor:
    """Align tokens with the event graph.

    Node embeddings are first updated by ``rounds`` masked graph-attention
    steps.  Each token then attends over the updated nodes with logits
    penalised by ``gamma * gap(token span, node anchor)``.
    """
    if not graph.is_acyclic():
        raise ContractError("calibrate needs an acyclic event graph")
    spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
    if F.ndim != 2 or len(spans) != F.shape[0]:
        raise DimensionError(f"calibrate: {len(spans)} spans for features {F.shape}")
    _check_width(F, params.tok_q, 1, "calibrate")
    H = node_embeddings if node_embeddings is not None else Tensor(graph.embeddings)
    for _ in range(rounds):
        H = update_nodes(H, graph, params)
    d_p = params.tok_k.shape[0]
    bias = -gamma * interval_gaps(spans, graph.anchors)
    Q = nx.linear(F, params.tok_q)
    K = nx.linear(H, params.tok_k)
    V = nx.linear(H, params.tok_v)
    return nx.add(F, _attend(Q, K, V, 1.0 / math.sqrt(d_p), bias))


def token_node_weights(F: Tensor, graph: EventGraph, spans, params: CalibParams, gamma: float = 1.0) -> np.ndarray:
    """Step-2 attention weights (L, N), for inspection and tests."""
    H = update_nodes(Tensor(graph.embeddings), graph, params)
    bias = -gamma * interval_gaps(spans, graph.anchors)
    logits = nx.mul(nx.matmul(nx.linear(F, params.tok_q), nx.transpose(nx.linear(H, params.tok_k))),
                    1.0 / math.sqrt(params.tok_k.shape[0]))
    return nx.softmax_rows(nx.add(logits, bias)).data
