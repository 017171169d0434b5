import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecvt import numerics as nx
from ecvt.errors import ContractError, DimensionError
from ecvt.guidance import (
    CalibParams,
    CrossAttnParams,
    GateParams,
    attention_weights,
    calibrate,
    gate_fuse,
    gate_values,
    interval_gaps,
    refine,
    token_node_weights,
    update_nodes,
)
from ecvt.numerics import Tensor, grad_check
from ecvt.prompt_oracle import EventGraph, EventScript, GraphNode, ScriptEvent, build_graph

D_V, D_P, L = 6, 4, 5
rng0 = np.random.default_rng(11)
F = Tensor(rng0.standard_normal((L, D_V)))
P_GLOBAL = rng0.standard_normal(D_P)
SPANS = np.stack([np.arange(L) * 2.0, np.arange(L) * 2.0 + 2.0], axis=1)


def _gate(bias):
    return GateParams(Tensor(np.zeros((D_V, D_V + D_P))), Tensor(np.full(D_V, bias)),
                      Tensor(np.random.default_rng(1).standard_normal((D_V, D_P))))


def test_gate_open_limit():
    out = gate_fuse(F, P_GLOBAL, _gate(30.0)).data
    assert np.max(np.abs(out - F.data) / np.abs(F.data)) < 1e-9


def test_gate_closed_limit():
    p = _gate(-30.0)
    proj = p.W_p.data @ P_GLOBAL
    out = gate_fuse(F, P_GLOBAL, p).data
    np.testing.assert_allclose(out, np.broadcast_to(proj, out.shape), rtol=1e-9, atol=1e-12)


def test_gate_half_open_is_exact():
    p = _gate(0.0)
    out = gate_fuse(F, P_GLOBAL, p).data
    np.testing.assert_array_equal(out, 0.5 * F.data + 0.5 * (p.W_p.data @ P_GLOBAL))


def test_gate_values_strictly_inside_unit_interval():
    g = gate_values(F, P_GLOBAL, GateParams.init(D_V, D_P, 0))
    assert np.all((g > 0) & (g < 1))


def test_gate_shape_mismatch():
    with pytest.raises(DimensionError):
        gate_fuse(F, np.ones(D_P + 1), GateParams.init(D_V, D_P, 0))


def test_refine_zero_value_is_identity():
    p = CrossAttnParams.init(D_V, D_P, 0)
    p.W_V = Tensor(np.zeros_like(p.W_V.data))
    np.testing.assert_array_equal(refine(F, rng0.standard_normal((3, D_P)), p).data, F.data)


def test_refine_single_sub_event():
    p = CrossAttnParams.init(D_V, D_P, 0)
    sub = rng0.standard_normal((1, D_P))
    np.testing.assert_array_equal(attention_weights(F, sub, p), np.ones((L, 1)))
    np.testing.assert_allclose(refine(F, sub, p).data, F.data + p.W_V.data @ sub[0], atol=1e-14)


def test_refine_identical_sub_events_ignore_query_and_key():
    p = CrossAttnParams.init(D_V, D_P, 0)
    subs = np.tile(rng0.standard_normal(D_P), (4, 1))
    np.testing.assert_allclose(refine(F, subs, p).data, F.data + p.W_V.data @ subs[0], atol=1e-13)


def test_refine_needs_a_sub_event():
    with pytest.raises(ContractError):
        refine(F, np.zeros((0, D_P)), CrossAttnParams.init(D_V, D_P, 0))


@given(st.permutations(range(4)), st.integers(0, 1000))
def test_refine_ignores_order_of_sub_events(perm, seed):
    r = np.random.default_rng(seed)
    subs = r.standard_normal((4, D_P))
    p = CrossAttnParams.init(D_V, D_P, seed)
    np.testing.assert_allclose(refine(F, subs[list(perm)], p).data, refine(F, subs, p).data, atol=1e-12)


def _zero_calib():
    p = CalibParams.init(D_V, D_P, 0)
    return CalibParams(*(Tensor(np.zeros_like(getattr(p, k).data)) for k in p.__dataclass_fields__))


def test_calibrate_global_only_zero_params_is_identity():
    g = build_graph(EventScript(1, [], 10.0), D_P, 0)
    np.testing.assert_array_equal(calibrate(F, g, SPANS, _zero_calib()).data, F.data)


def test_temporal_penalty_dominates_equal_logits():
    emb = np.eye(D_P)[0]
    nodes = (GraphNode(0, 1, (0.0, 2.0), emb), GraphNode(1, 1, (102.0, 104.0), emb))
    g = EventGraph(nodes, ())
    spans = np.array([[0.0, 2.0]])
    w = token_node_weights(Tensor(np.zeros((1, D_V))), g, spans, CalibParams.init(D_V, D_P, 0), gamma=1.0)
    assert w[0, 0] > 0.99
    np.testing.assert_allclose(w[0], [1 / (1 + np.exp(-100.0)), np.exp(-100.0) / (1 + np.exp(-100.0))], rtol=1e-12)


def test_isolated_nodes_update_from_themselves_only():
    r = np.random.default_rng(3)
    nodes = tuple(GraphNode(i, 1, (0.0, 1.0), r.standard_normal(D_P)) for i in range(2))
    g = EventGraph(nodes, ())
    p = CalibParams.init(D_V, D_P, 0)
    H = Tensor(g.embeddings)
    out = update_nodes(H, g, p).data
    # with only self in view, attention weight is 1 and the update is H + V(H)
    np.testing.assert_allclose(out, H.data + H.data @ p.node_v.data.T, atol=1e-14)


def test_calibrate_rejects_cyclic_graph():
    emb = np.eye(D_P)[0]
    nodes = (GraphNode(0, 1, (0, 10), emb), GraphNode(1, 1, (0, 2), emb))
    g = EventGraph(nodes, ((0, 1, "X"), (1, 0, "X")))
    with pytest.raises(ContractError):
        calibrate(F, g, SPANS, CalibParams.init(D_V, D_P, 0))


def _graph():
    return build_graph(EventScript(1, [ScriptEvent(1, 1.0, 4.0), ScriptEvent(2, 5.0, 9.0)], 10.0), D_P, 0)


@given(st.floats(-50, 50))
def test_calibrate_invariant_to_time_shift(shift):
    g = _graph()
    shifted = EventGraph(tuple(GraphNode(n.node_id, n.class_id, (n.anchor[0] + shift, n.anchor[1] + shift), n.embedding)
                               for n in g.nodes), g.edges, g.global_id)
    p = CalibParams.init(D_V, D_P, 2)
    np.testing.assert_allclose(calibrate(F, shifted, SPANS + shift, p).data, calibrate(F, g, SPANS, p).data, atol=1e-12)


def test_all_three_preserve_shape():
    assert gate_fuse(F, P_GLOBAL, GateParams.init(D_V, D_P, 0)).shape == (L, D_V)
    assert refine(F, rng0.standard_normal((3, D_P)), CrossAttnParams.init(D_V, D_P, 0)).shape == (L, D_V)
    assert calibrate(F, _graph(), SPANS, CalibParams.init(D_V, D_P, 0)).shape == (L, D_V)


def test_interval_gaps():
    np.testing.assert_array_equal(interval_gaps([[0, 1]], [[0.5, 2], [3, 4], [-5, -2]]), [[0, 2, 2]])


def test_full_chain_grad_check():
    r = np.random.default_rng(5)
    g = _graph()
    subs = r.standard_normal((4, D_P))
    gp, cp, kp = GateParams.init(D_V, D_P, 1), CrossAttnParams.init(D_V, D_P, 1), CalibParams.init(D_V, D_P, 1)
    w = r.standard_normal((L, D_V))

    def f(x, wg, wq, tq, nq):
        out = gate_fuse(x, P_GLOBAL, GateParams(wg, gp.b_g, gp.W_p))
        out = refine(out, subs, CrossAttnParams(wq, cp.W_K, cp.W_V))
        out = calibrate(out, g, SPANS, CalibParams(nq, kp.node_k, kp.node_v, tq, kp.tok_k, kp.tok_v))
        return nx.tsum(nx.mul(out, w))

    inputs = [Tensor(F.data.copy()), gp.W_g, cp.W_Q, kp.tok_q, kp.node_q]
    assert grad_check(f, inputs) < 1e-4
