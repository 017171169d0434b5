"""Seeded finite-difference checks for every differentiable piece of the model.

Each case builds a scalar function and its inputs from a seed.  Inputs are
drawn at unit scale and non-scalar outputs are reduced against a fixed random
weighting, so gradients stay O(1) and the central difference is not swamped
by round-off.  Points near kinks (relu, min/max) and near stationary points
(where the true gradient is ~0 and the relative error is all round-off) are
nudged away.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .encoder import EncoderConfig, VideoFeatures, encode
from .encoder import init_params as init_encoder
from .errors import ConfigError
from .guidance import CalibParams, CrossAttnParams, GateParams, calibrate, gate_fuse, refine
from .head_losses import LossWeights, giou_1d_tensor, loss_cal, loss_cls, loss_reg, loss_sem, total_loss
from .numerics import Tensor
from .prompt_oracle import EventScript, ScriptEvent, build_graph

GROUPS = ("ops", "encoder", "gate", "refine", "calibrate", "losses", "chain", "model")
TOLERANCE = 1e-4

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


@dataclass(frozen=True)
class Case:
    name: str
    group: str
    build: Builder
    max_coords: int | None = None


CASES: list[Case] = []


def case(name: str, group: str, max_coords: int | None = None):
    def register(fn: Builder) -> Builder:
        CASES.append(Case(name, group, fn, max_coords))
        return fn
    return register


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _reduce(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = rng.standard_normal(out.shape)
    return lambda y: nx.tsum(nx.mul(y, w))


def _weighted(fn: Callable[..., Tensor], inputs: list[Tensor], rng) -> tuple[Callable[..., Tensor], list[Tensor]]:
    red = _reduce(fn(*inputs), rng)
    return (lambda *xs: red(fn(*xs))), inputs


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


def _unary(name: str, fn, sampler=None):
    @case(name, "ops")
    def build(rng):
        x = sampler(rng) if sampler else rng.standard_normal((3, 4))
        return _weighted(fn, [_t(x)], rng)
    return build


def _binary(name: str, fn, sampler=None):
    @case(name, "ops")
    def build(rng):
        a, b = sampler(rng) if sampler else (rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))
        return _weighted(fn, [_t(a), _t(b)], rng)
    return build


def _positive(rng, shape=(3, 4)):
    return rng.uniform(0.5, 2.0, shape)


def _separated(rng):
    a = rng.standard_normal((3, 4))
    return a, a + _away_from_zero(rng, (3, 4))


_binary("add", nx.add)
_binary("add_row_broadcast", nx.add, lambda r: (r.standard_normal((3, 4)), r.standard_normal(4)))
_binary("sub", nx.sub)
_binary("mul", nx.mul)
_binary("mul_scalar_tensor", nx.mul, lambda r: (r.standard_normal((3, 4)), r.standard_normal(())))
_binary("div", nx.div, lambda r: (r.standard_normal((3, 4)), _away_from_zero(r, (3, 4), 0.5)))
_binary("minimum", nx.minimum, _separated)
_binary("maximum", nx.maximum, _separated)
_binary("matmul", nx.matmul, lambda r: (r.standard_normal((3, 4)), r.standard_normal((4, 2))))
_unary("neg", nx.neg)
_unary("exp", nx.exp)
_unary("log", nx.log, _positive)
_unary("square", nx.square)
_unary("sqrt", nx.sqrt, _positive)
_unary("sigmoid", nx.sigmoid, lambda r: 3.0 * r.standard_normal((3, 4)))
_unary("softplus", nx.softplus, lambda r: 3.0 * r.standard_normal((3, 4)))
_unary("tanh", nx.tanh)
_unary("relu", nx.relu, lambda r: _away_from_zero(r, (3, 4)))
_GELU_STATIONARY = -0.7518


def _gelu_inputs(r):
    x = np.clip(2.0 * r.standard_normal((3, 4)), -4.0, 4.0)  # tanh saturates beyond
    near = np.abs(x - _GELU_STATIONARY) < 0.15
    return np.where(near, x + 0.3, x)


_unary("gelu", nx.gelu, _gelu_inputs)
_unary("transpose", nx.transpose)
_unary("reshape", lambda x: nx.reshape(x, (2, 6)))
_unary("tsum_all", lambda x: nx.mul(nx.tsum(x), nx.tsum(x)))
_unary("tsum_axis0", lambda x: nx.tsum(x, axis=0))
_unary("tsum_axis1", lambda x: nx.tsum(x, axis=1))
_unary("mean_axis1", lambda x: nx.mean(x, axis=1))
_unary("softmax_rows", nx.softmax_rows, lambda r: 2.0 * r.standard_normal((3, 5)))
_unary("log_softmax_rows", nx.log_softmax_rows, lambda r: 2.0 * r.standard_normal((3, 5)))
_unary("l2_normalize_rows", nx.l2_normalize_rows)
_unary("slice_cols", lambda x: nx.slice_cols(x, 1, 3))
_unary("take_rows", lambda x: nx.take_rows(x, [2, 0, 2]))
_unary("pick", lambda x: nx.pick(x, [0, 1, 2, 2], [3, 0, 1, 1]))
_unary("repeat_rows", lambda x: nx.repeat_rows(x, 3), lambda r: r.standard_normal(4))


@case("linear", "ops")
def _linear(rng):
    return _weighted(nx.linear, [_t(rng.standard_normal((3, 4))), _t(rng.standard_normal((2, 4))),
                                 _t(rng.standard_normal(2))], rng)


@case("matvec", "ops")
def _matvec(rng):
    return _weighted(nx.matvec, [_t(rng.standard_normal((3, 4))), _t(rng.standard_normal(4))], rng)


@case("layer_norm_rows", "ops")
def _layer_norm(rng):
    return _weighted(nx.layer_norm_rows, [_t(rng.standard_normal((3, 5))), _t(rng.uniform(0.5, 1.5, 5)),
                                          _t(rng.standard_normal(5))], rng)


@case("concat", "ops")
def _concat(rng):
    return _weighted(lambda a, b: nx.concat([a, b], axis=1),
                     [_t(rng.standard_normal((3, 2))), _t(rng.standard_normal((3, 4)))], rng)


@case("stack_rows", "ops")
def _stack(rng):
    return _weighted(lambda a, b: nx.stack_rows([a, b, a]), [_t(rng.standard_normal(3)), _t(rng.standard_normal(3))], rng)


# ------------------------------------------------------------------ encoder

_ENC = EncoderConfig(depth=2, heads=2, d_v=8, d_ff=12)


@case("encoder", "encoder", max_coords=4)
def _encoder(rng):
    params = init_encoder(dataclasses.replace(_ENC, seed=int(rng.integers(1 << 30))))
    names = sorted(params)
    for n in names:  # move LN and biases off their trivial starting values
        params[n].data = params[n].data + 0.3 * rng.standard_normal(params[n].shape)
    x = _t(rng.standard_normal((3, _ENC.d_v)))
    spans = np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 3.0]])

    def f(x, *ws):
        p = dict(zip(names, ws))
        return encode(VideoFeatures(x, spans), _ENC, p).tokens

    return _weighted(f, [x] + [params[n] for n in names], rng)


# ----------------------------------------------------------------- guidance

D_V, D_P = 6, 5


def _unit(rng, shape):
    return _t(rng.standard_normal(shape) / np.sqrt(shape[-1]) * 1.5)


def _script(rng, duration=8.0) -> EventScript:
    n = int(rng.integers(1, 4))
    cuts = np.sort(rng.choice(np.arange(1, int(duration)), size=2 * n, replace=False)).astype(float)
    events = [ScriptEvent(int(rng.integers(1, 4)), cuts[2 * k], cuts[2 * k + 1]) for k in range(n)]
    return EventScript(events[0].class_id, events, duration)


@case("gate_fuse", "gate")
def _gate(rng):
    inputs = [_t(rng.standard_normal((3, D_V))), _t(rng.standard_normal(D_P)),
              _unit(rng, (D_V, D_V + D_P)), _t(rng.standard_normal(D_V)), _unit(rng, (D_V, D_P))]
    return _weighted(lambda F, p, Wg, bg, Wp: gate_fuse(F, p, GateParams(Wg, bg, Wp)), inputs, rng)


@case("refine", "refine")
def _refine(rng):
    inputs = [_t(rng.standard_normal((3, D_V))), _t(rng.standard_normal((4, D_P))),
              _unit(rng, (D_P, D_V)), _unit(rng, (D_P, D_P)), _unit(rng, (D_V, D_P))]
    return _weighted(lambda F, P, q, k, v: refine(F, P, CrossAttnParams(q, k, v)), inputs, rng)


def _calib_inputs(rng):
    return [_unit(rng, (D_P, D_P)), _unit(rng, (D_P, D_P)), _unit(rng, (D_P, D_P)),
            _unit(rng, (D_P, D_V)), _unit(rng, (D_P, D_P)), _unit(rng, (D_V, D_P))]


@case("calibrate", "calibrate")
def _calibrate(rng):
    script = _script(rng)
    graph = build_graph(script, D_P, int(rng.integers(1000)), 4)
    spans = np.stack([np.arange(4) * 2.0, np.arange(4) * 2.0 + 2.0], axis=1)
    gamma = float(rng.uniform(0.2, 2.0))
    inputs = [_t(rng.standard_normal((4, D_V))), _t(rng.standard_normal((len(graph.nodes), D_P)))] + _calib_inputs(rng)

    def f(F, H, *ws):
        return calibrate(F, graph, spans, CalibParams(*ws), gamma, rounds=2, node_embeddings=H)

    return _weighted(f, inputs, rng)


@case("gate_refine_calibrate", "chain", max_coords=8)
def _chain(rng):
    script = _script(rng)
    graph = build_graph(script, D_P, 0, 4)
    spans = np.stack([np.arange(4) * 2.0, np.arange(4) * 2.0 + 2.0], axis=1)
    gate = [_unit(rng, (D_V, D_V + D_P)), _t(rng.standard_normal(D_V)), _unit(rng, (D_V, D_P))]
    cross = [_unit(rng, (D_P, D_V)), _unit(rng, (D_P, D_P)), _unit(rng, (D_V, D_P))]
    calib = _calib_inputs(rng)
    p_global = rng.standard_normal(D_P)
    subs = rng.standard_normal((4, D_P))
    # distinct node embeddings: identical rows make the token->node attention
    # logits irrelevant and their true gradient exactly zero
    H = rng.standard_normal((len(graph.nodes), D_P))

    def f(F, *ws):
        x = gate_fuse(F, p_global, GateParams(*ws[:3]))
        x = refine(x, subs, CrossAttnParams(*ws[3:6]))
        return calibrate(x, graph, spans, CalibParams(*ws[6:]), node_embeddings=Tensor(H))

    return _weighted(f, [_t(rng.standard_normal((4, D_V)))] + gate + cross + calib, rng)


# ------------------------------------------------------------------- losses


@case("loss_cls", "losses")
def _loss_cls(rng):
    targets = rng.integers(0, 4, size=5)
    return (lambda z: loss_cls(z, targets)), [_t(2.0 * rng.standard_normal((5, 4)))]


def _intervals(rng, n):
    """Predicted and target intervals with every pairwise endpoint gap >= 0.05."""
    while True:
        pts = rng.uniform(0.0, 10.0, size=(n, 4))
        srt = np.sort(pts, axis=1)
        if np.all(np.diff(srt, axis=1) > 0.05):
            break
    ps, pe = np.minimum(pts[:, 0], pts[:, 1]), np.maximum(pts[:, 0], pts[:, 1])
    gs, ge = np.minimum(pts[:, 2], pts[:, 3]), np.maximum(pts[:, 2], pts[:, 3])
    return ps, pe, gs, ge


@case("giou_1d", "losses")
def _giou(rng):
    ps, pe, gs, ge = _intervals(rng, 4)
    return _weighted(lambda s, e: giou_1d_tensor(s, e, gs, ge), [_t(ps), _t(pe)], rng)


@case("loss_reg", "losses")
def _loss_reg(rng):
    ps, pe, gs, ge = _intervals(rng, 4)
    return (lambda s, e: loss_reg(s, e, gs, ge)), [_t(ps), _t(pe)]


@case("loss_sem", "losses")
def _loss_sem(rng):
    subs = rng.standard_normal((4, D_P))
    subs[3] = subs[1]  # duplicate description, dropped from the denominator
    pos = rng.integers(0, 4, size=5)
    extra = rng.standard_normal((2, D_P))
    # short token vectors keep the normalisation Jacobian large at tau = 0.07
    return (lambda x: loss_sem(x, subs, pos, 0.07, extra)), [_t(0.3 * rng.standard_normal((5, D_P)))]


@case("loss_cal_literal", "losses")
def _loss_cal_literal(rng):
    anchors = np.sort(rng.uniform(0, 10, (3, 2)), axis=1)
    return (lambda s, e: loss_cal(s, e, anchors, "literal")), [_t(rng.uniform(0, 10, 3)), _t(rng.uniform(0, 10, 3))]


@case("loss_cal_separate", "losses")
def _loss_cal_separate(rng):
    anchors = np.sort(rng.uniform(0, 10, (3, 2)), axis=1)
    return (lambda s, e: loss_cal(s, e, anchors, "separate")), [_t(rng.uniform(0, 10, 3)), _t(rng.uniform(0, 10, 3))]


@case("total_loss", "losses")
def _total(rng):
    w = LossWeights(*rng.uniform(0.1, 2.0, 3))

    def f(a, b, c, d):
        return total_loss({"loss_cls": a, "loss_reg": b, "loss_sem": c, "loss_cal": d}, w)

    return f, [_t(rng.uniform(0, 3, ())) for _ in range(4)]


# -------------------------------------------------------------- whole model


@case("ecvt_total_loss", "model", max_coords=2)
def _model(rng):
    from .harness.config import DatasetSpec, RunConfig, Seeds
    from .harness.data import class_templates, generate_video
    from .harness.model import ECVTModel

    seed = int(rng.integers(1 << 30))
    spec = DatasetSpec(num_classes=3, duration_range=(2.0, 2.0), d_in=8, events_per_video=(1, 1),
                       event_len_range=(1.0, 1.0), min_gap=0.0, d_p=8, clip_len=1.0, clip_stride=1.0)
    video = generate_video(spec, 0, seed, class_templates(spec, seed))
    cfg = RunConfig(encoder=EncoderConfig(depth=1, heads=2, d_v=8, d_ff=8), dataset=spec,
                    seeds=Seeds(model=seed), loss_weights=LossWeights(lambda_cal=0.2, cal_normalize=False))
    model = ECVTModel(cfg, spec.num_classes, spec.d_p)
    names = sorted(model.params)
    for n in names:
        model.params[n].data = model.params[n].data + 0.2 * rng.standard_normal(model.params[n].shape)

    def f(*ws):
        model.params = dict(zip(names, ws))
        return model.video_loss(video)[0]

    return f, [model.params[n] for n in names]


# ------------------------------------------------------------------ running


@dataclass
class CaseResult:
    name: str
    group: str
    seeds: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


@dataclass
class GradcheckReport:
    results: list[CaseResult] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((r.max_error for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.results)

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": TOLERANCE,
            "max_error": self.max_error,
            "seconds": self.seconds,
            "cases": [dataclasses.asdict(r) | {"passed": r.passed} for r in self.results],
        }


def select(module: str = "all") -> list[Case]:
    if module == "all":
        return list(CASES)
    if module not in GROUPS:
        raise ConfigError(f"unknown gradcheck module {module!r}; choose from all, {', '.join(GROUPS)}")
    return [c for c in CASES if c.group == module]


def run_case(c: Case, seeds: int = 20, eps: float = 1e-5) -> CaseResult:
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([s, 0x6C4E])
        f, inputs = c.build(rng)
        worst = max(worst, nx.grad_check(f, inputs, eps, max_coords=c.max_coords, seed=s))
    return CaseResult(c.name, c.group, seeds, worst, time.perf_counter() - t0)


def run(module: str = "all", seeds: int = 20, eps: float = 1e-5) -> GradcheckReport:
    return GradcheckReport([run_case(c, seeds, eps) for c in select(module)])
