"""Deterministic stand-in for LVLM prompting plus text encoding.

An :class:`EventScript` (the ground-truth events of a video) is turned into a
:class:`PromptBundle`: one global embedding for the dominant action, one
embedding per clip describing what happens inside it, and an
:class:`EventGraph` with temporal anchors.  Class embeddings come from a
seeded table in which every pair of classes has cosine similarity below
``MAX_PAIR_COSINE``.  Class id 0 is reserved for BACKGROUND.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, ContractError, VocabularyError

BACKGROUND = 0
BEFORE = "BEFORE"
PART_OF = "PART_OF"
MAX_PAIR_COSINE = 0.5
DEFAULT_VOCAB_SIZE = 64
_MAX_DRAWS = 10_000


# ------------------------------------------------------------------ scripts


@dataclass(frozen=True)
class ScriptEvent:
    class_id: int
    start: float
    end: float


@dataclass(frozen=True)
class EventScript:
    global_label: int
    events: tuple[ScriptEvent, ...]
    video_duration_sec: float
    video_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        self.validate()

    def validate(self) -> None:
        if not self.video_duration_sec > 0:
            raise ContractError(f"video duration must be positive, got {self.video_duration_sec}")
        prev = -math.inf
        for ev in self.events:
            if not 0.0 <= ev.start < ev.end <= self.video_duration_sec:
                raise ContractError(f"event {ev} lies outside [0, {self.video_duration_sec}] or is empty")
            if ev.start < prev:
                raise ContractError("script events must be sorted by start time")
            prev = ev.start

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "duration_sec": self.video_duration_sec,
            "global_label": self.global_label,
            "events": [{"class_id": e.class_id, "start": e.start, "end": e.end} for e in self.events],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EventScript":
        return cls(
            global_label=int(obj["global_label"]),
            events=tuple(ScriptEvent(int(e["class_id"]), float(e["start"]), float(e["end"])) for e in obj["events"]),
            video_duration_sec=float(obj["duration_sec"]),
            video_id=str(obj.get("video_id", "")),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


# --------------------------------------------------------------- clipping


@dataclass(frozen=True)
class ClipPolicy:
    clip_len: float = 4.0
    stride: float = 2.0


def clip_video(duration_sec: float, clip_len: float, stride: float) -> list[tuple[float, float]]:
    """Clip spans starting at 0, stride, 2*stride, ...; the last is clamped to the duration."""
    if stride <= 0:
        raise ConfigError(f"clip stride must be positive, got {stride}")
    if clip_len <= 0:
        raise ConfigError(f"clip length must be positive, got {clip_len}")
    if stride > clip_len:
        raise ConfigError(f"stride {stride} exceeds clip length {clip_len}; clips would leave gaps")
    if duration_sec <= 0:
        raise ConfigError(f"duration must be positive, got {duration_sec}")
    # small tolerance so 6.0000000001 / 2 does not round up to an extra clip
    m = max(1, math.ceil((duration_sec - clip_len) / stride - 1e-9) + 1)
    return [(k * stride, min(k * stride + clip_len, duration_sec)) for k in range(m)]


# ------------------------------------------------------------ embeddings


_tables: dict[tuple[int, int], list[np.ndarray]] = {}
_tables_lock = threading.Lock()


def _class_vector(class_id: int, d_p: int, seed: int) -> np.ndarray:
    """Unit vector for one class, built by rejection sampling.

    Classes are placed in id order and each new vector must have cosine below
    ``MAX_PAIR_COSINE`` with every earlier one, so class ``c`` depends only on
    the classes before it and the table grows without changing.
    """
    with _tables_lock:
        rows = _tables.setdefault((d_p, seed), [])
        if len(rows) <= class_id:
            rng = np.random.default_rng([int(seed), int(d_p), 0xEC57, len(rows)])
            while len(rows) <= class_id:
                for _ in range(_MAX_DRAWS):
                    v = rng.standard_normal(d_p)
                    v /= np.linalg.norm(v)
                    if all(float(v @ r) < MAX_PAIR_COSINE for r in rows):
                        v.setflags(write=False)
                        rows.append(v)
                        break
                else:
                    raise ConfigError(f"cannot place {len(rows) + 1} classes in {d_p} dims at cosine < {MAX_PAIR_COSINE}")
                rng = np.random.default_rng([int(seed), int(d_p), 0xEC57, len(rows)])
        return rows[class_id]


def embed_event(
    class_id: int,
    context: tuple[float, float] | None = None,
    d_p: int = 32,
    seed: int = 0,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
) -> np.ndarray:
    """Unit-norm embedding of an action class.

    ``context`` (a clip span) is accepted so a text-encoder backend can share
    the signature; this oracle ignores it.
    """
    if not 0 <= class_id < vocab_size:
        raise VocabularyError(f"class {class_id} is outside the vocabulary [0, {vocab_size})")
    return _class_vector(class_id, d_p, seed).copy()


# ----------------------------------------------------------------- graphs


@dataclass(frozen=True)
class GraphNode:
    node_id: int
    class_id: int
    anchor: tuple[float, float]
    embedding: np.ndarray


@dataclass(frozen=True)
class EventGraph:
    nodes: tuple[GraphNode, ...]
    edges: tuple[tuple[int, int, str], ...] = ()
    global_id: int = 0

    @property
    def anchors(self) -> np.ndarray:
        return np.array([n.anchor for n in self.nodes], dtype=np.float64).reshape(-1, 2)

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([n.embedding for n in self.nodes])

    @property
    def event_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.node_id != self.global_id]

    def index_of(self, node_id: int) -> int:
        for i, n in enumerate(self.nodes):
            if n.node_id == node_id:
                return i
        raise KeyError(node_id)

    def adjacency(self) -> np.ndarray:
        """Boolean (N, N) mask: self, in- and out-neighbours."""
        n = len(self.nodes)
        adj = np.eye(n, dtype=bool)
        for src, dst, _ in self.edges:
            i, j = self.index_of(src), self.index_of(dst)
            adj[i, j] = adj[j, i] = True
        return adj

    def is_acyclic(self) -> bool:
        ids = [n.node_id for n in self.nodes]
        indeg = {i: 0 for i in ids}
        out: dict[int, list[int]] = {i: [] for i in ids}
        for src, dst, _ in self.edges:
            out[src].append(dst)
            indeg[dst] += 1
        ready = [i for i in ids if indeg[i] == 0]
        seen = 0
        while ready:
            i = ready.pop()
            seen += 1
            for j in out[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
        return seen == len(ids)

    def validate(self) -> None:
        """Check every structural invariant; raises ContractError on the first failure."""
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate node ids in event graph")
        if self.global_id not in ids:
            raise ContractError("event graph has no global node")
        by_id = {n.node_id: n for n in self.nodes}
        for src, dst, rel in self.edges:
            if src not in by_id or dst not in by_id:
                raise ContractError(f"edge ({src}, {dst}) references a missing node")
            if rel == BEFORE:
                if by_id[src].anchor[1] > by_id[dst].anchor[0]:
                    raise ContractError(f"BEFORE edge {src}->{dst} contradicts the anchors")
            elif rel == PART_OF:
                if dst != self.global_id:
                    raise ContractError(f"PART_OF edge {src}->{dst} must point at the global node")
            else:
                raise ContractError(f"unknown relation {rel!r}")
        part_of = {src for src, dst, rel in self.edges if rel == PART_OF}
        missing = [i for i in ids if i != self.global_id and i not in part_of]
        if missing:
            raise ContractError(f"event nodes {missing} have no PART_OF edge")
        if not self.is_acyclic():
            raise ContractError("event graph contains a cycle")

    def to_json(self) -> dict:
        return {
            "global_id": self.global_id,
            "nodes": [
                {"node_id": n.node_id, "class_id": n.class_id, "anchor": list(n.anchor), "embedding": n.embedding.tolist()}
                for n in self.nodes
            ],
            "edges": [[s, d, r] for s, d, r in self.edges],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EventGraph":
        nodes = tuple(
            GraphNode(int(n["node_id"]), int(n["class_id"]), (float(n["anchor"][0]), float(n["anchor"][1])),
                      np.asarray(n["embedding"], dtype=np.float64))
            for n in obj["nodes"]
        )
        edges = tuple((int(s), int(d), str(r)) for s, d, r in obj["edges"])
        return cls(nodes, edges, int(obj.get("global_id", 0)))


# ----------------------------------------------------------------- bundles


@dataclass(frozen=True)
class SubEvent:
    embedding: np.ndarray
    clip_span: tuple[float, float]


@dataclass(frozen=True)
class PromptBundle:
    p_global: np.ndarray
    subs: tuple[SubEvent, ...]
    graph: EventGraph

    @property
    def sub_matrix(self) -> np.ndarray:
        return np.stack([s.embedding for s in self.subs])

    @property
    def clip_spans(self) -> np.ndarray:
        return np.array([s.clip_span for s in self.subs], dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "p_global": self.p_global.tolist(),
            "subs": [{"embedding": s.embedding.tolist(), "clip_span": list(s.clip_span)} for s in self.subs],
            "graph": self.graph.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PromptBundle":
        return cls(
            p_global=np.asarray(obj["p_global"], dtype=np.float64),
            subs=tuple(
                SubEvent(np.asarray(s["embedding"], dtype=np.float64), (float(s["clip_span"][0]), float(s["clip_span"][1])))
                for s in obj["subs"]
            ),
            graph=EventGraph.from_json(obj["graph"]),
        )


def _overlap(a: tuple[float, float], b: tuple[float, float]) -> float:
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


def build_graph(script: EventScript, d_p: int, seed: int, vocab_size: int = DEFAULT_VOCAB_SIZE) -> EventGraph:
    nodes = [GraphNode(0, script.global_label, (0.0, script.video_duration_sec),
                       embed_event(script.global_label, None, d_p, seed, vocab_size))]
    edges: list[tuple[int, int, str]] = []
    for k, ev in enumerate(script.events, start=1):
        nodes.append(GraphNode(k, ev.class_id, (ev.start, ev.end), embed_event(ev.class_id, None, d_p, seed, vocab_size)))
        edges.append((k, 0, PART_OF))
    for k in range(1, len(script.events)):
        a, b = script.events[k - 1], script.events[k]
        if a.end <= b.start:
            edges.append((k, k + 1, BEFORE))
    return EventGraph(tuple(nodes), tuple(edges), global_id=0)


def build_bundle(
    script: EventScript,
    clip_policy: ClipPolicy = ClipPolicy(),
    d_p: int = 32,
    seed: int = 0,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
) -> PromptBundle:
    """Global, per-clip and graph prompts for one scripted video.

    A clip's embedding is the overlap-weighted mean of the class embeddings
    of the events it overlaps, renormalised; clips with no overlap get the
    BACKGROUND embedding.
    """
    script.validate()
    p_global = embed_event(script.global_label, None, d_p, seed, vocab_size)
    background = embed_event(BACKGROUND, None, d_p, seed, vocab_size)
    subs = []
    for span in clip_video(script.video_duration_sec, clip_policy.clip_len, clip_policy.stride):
        acc = np.zeros(d_p)
        for ev in script.events:
            w = _overlap(span, (ev.start, ev.end))
            if w > 0:
                acc += w * embed_event(ev.class_id, span, d_p, seed, vocab_size)
        norm = np.linalg.norm(acc)
        subs.append(SubEvent(acc / norm if norm > 1e-12 else background, span))
    return PromptBundle(p_global, tuple(subs), build_graph(script, d_p, seed, vocab_size))


def scripts_from_events(
    events: Iterable[tuple[int, float, float]], duration: float, video_id: str = ""
) -> EventScript:
    """Script whose global label is the class with the most total event time."""
    evs = tuple(sorted((ScriptEvent(int(c), float(s), float(e)) for c, s, e in events), key=lambda e: (e.start, e.end)))
    totals: dict[int, float] = {}
    for ev in evs:
        totals[ev.class_id] = totals.get(ev.class_id, 0.0) + ev.end - ev.start
    label = max(sorted(totals), key=lambda c: totals[c]) if totals else BACKGROUND
    return EventScript(label, evs, float(duration), video_id)
