"""Parameterized composite agent graph.

A graph is a fixed roster of nodes plus an ordered list of *potential* edges,
each switched on independently with probability ``logistic(theta_k)``.  The
potential edges always run from a lower to a higher position in a fixed
topological layout, so every subset is a DAG.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

KINDS = ("tot", "reflect", "io", "output")


class InvalidParameterError(ValueError):
    pass


class StructureMismatchError(ValueError):
    pass


class GraphParseError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at char {position})"
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class NodeSpec:
    node_id: int
    kind: str
    cfg: tuple = ()  # sorted (key, value) pairs, kept hashable
    prompt_template_id: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown node kind {self.kind!r}")
        c = dict(self.cfg)
        if self.kind == "tot" and (c.get("depth", 0) < 1 or c.get("branching", 0) < 1):
            raise InvalidParameterError("ToT nodes need depth >= 1 and branching >= 1")
        if self.kind == "reflect" and (c.get("passes", 0) < 1 or c.get("reflection_steps", -1) < 0):
            raise InvalidParameterError("Reflect nodes need passes >= 1 and reflection_steps >= 0")

    @property
    def config(self) -> dict:
        return dict(self.cfg)

    def to_json(self) -> dict:
        cfg = dict(self.cfg)
        if self.prompt_template_id:
            cfg["template"] = self.prompt_template_id
        return {"id": self.node_id, "kind": self.kind, "cfg": dict(sorted(cfg.items()))}

    @classmethod
    def from_json(cls, obj: dict) -> "NodeSpec":
        cfg = dict(obj.get("cfg", {}))
        template = cfg.pop("template", "")
        return cls(int(obj["id"]), str(obj["kind"]), tuple(sorted(cfg.items())), template)


def tot(node_id: int, depth: int = 4, branching: int = 2, template: str = "tot") -> NodeSpec:
    return NodeSpec(node_id, "tot", (("branching", branching), ("depth", depth)), template)


def reflect(node_id: int, reflection_steps: int = 1, passes: int = 2, template: str = "reflect") -> NodeSpec:
    return NodeSpec(node_id, "reflect", (("passes", passes), ("reflection_steps", reflection_steps)), template)


def io(node_id: int, template: str = "io") -> NodeSpec:
    return NodeSpec(node_id, "io", (), template)


def output(node_id: int, template: str = "output") -> NodeSpec:
    return NodeSpec(node_id, "output", (), template)


def _check_nodes(nodes: Sequence[NodeSpec]) -> None:
    ids = [n.node_id for n in nodes]
    if ids != list(range(len(nodes))):
        raise InvalidParameterError("node ids must be contiguous from 0 and listed in order")
    if sum(n.kind == "output" for n in nodes) != 1:
        raise InvalidParameterError("exactly one Output node is required")


def _check_edges(edges: Sequence[tuple[int, int]], n: int) -> None:
    seen = set()
    for u, v in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise InvalidParameterError(f"edge ({u}, {v}) references a missing node")
        if u == v:
            raise InvalidParameterError(f"self-loop on node {u}")
        if (u, v) in seen:
            raise InvalidParameterError(f"duplicate edge ({u}, {v})")
        seen.add((u, v))


def topological_order(n: int, edges: Iterable[tuple[int, int]]) -> list[int] | None:
    """Kahn's algorithm, smallest ready id first; ``None`` if there is a cycle."""
    import heapq

    succ: list[list[int]] = [[] for _ in range(n)]
    indeg = [0] * n
    for u, v in edges:
        succ[u].append(v)
        indeg[v] += 1
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, v)
    return order if len(order) == n else None


@dataclass(frozen=True)
class GraphStructure:
    """One realized acyclic agent graph."""

    nodes: tuple[NodeSpec, ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(sorted((int(u), int(v)) for u, v in self.edges)))
        _check_nodes(self.nodes)
        _check_edges(self.edges, len(self.nodes))
        if topological_order(len(self.nodes), self.edges) is None:
            raise InvalidParameterError("graph structure contains a cycle")

    @property
    def output_id(self) -> int:
        return next(n.node_id for n in self.nodes if n.kind == "output")

    def predecessors(self, node_id: int) -> list[int]:
        return sorted(u for u, v in self.edges if v == node_id)

    @property
    def degenerate(self) -> bool:
        """True when no IO node reaches the Output node."""
        frontier = [n.node_id for n in self.nodes if n.kind == "io"]
        seen = set(frontier)
        while frontier:
            u = frontier.pop()
            for a, b in self.edges:
                if a == u and b not in seen:
                    seen.add(b)
                    frontier.append(b)
        return self.output_id not in seen

    def to_text(self) -> str:
        return serialize(self)


def serialize(structure: GraphStructure) -> str:
    obj = {
        "nodes": [n.to_json() for n in structure.nodes],
        "edges": [[u, v] for u, v in structure.edges],
    }
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def deserialize(text: str) -> GraphStructure:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"malformed graph text: {exc.msg}", exc.pos) from None
    if not isinstance(obj, dict) or "nodes" not in obj or "edges" not in obj:
        raise GraphParseError("graph text must be an object with 'nodes' and 'edges'", 0)
    try:
        nodes = tuple(NodeSpec.from_json(o) for o in obj["nodes"])
        edges = tuple((int(e[0]), int(e[1])) for e in obj["edges"])
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise GraphParseError(f"bad graph field: {exc}") from None
    if topological_order(len(nodes), [e for e in edges if 0 <= min(e) and max(e) < len(nodes)]) is None:
        raise GraphParseError("acyclicity violated: edges form a cycle")
    try:
        return GraphStructure(nodes, edges)
    except InvalidParameterError as exc:
        raise GraphParseError(str(exc)) from None


@dataclass(frozen=True)
class GraphParams:
    """Node roster, potential edges and their logits."""

    nodes: tuple[NodeSpec, ...]
    potential_edges: tuple[tuple[int, int], ...]
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "potential_edges", tuple((int(u), int(v)) for u, v in self.potential_edges))
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        _check_nodes(self.nodes)
        _check_edges(self.potential_edges, len(self.nodes))
        if theta.shape[0] != len(self.potential_edges):
            raise InvalidParameterError(
                f"theta has length {theta.shape[0]}, expected {len(self.potential_edges)}"
            )
        if not np.all(np.isfinite(theta)):
            raise InvalidParameterError("theta contains non-finite values")
        if topological_order(len(self.nodes), self.potential_edges) is None:
            raise InvalidParameterError("potential-edge set must be acyclic")

    @property
    def d(self) -> int:
        return len(self.potential_edges)

    def with_theta(self, theta) -> "GraphParams":
        return GraphParams(self.nodes, self.potential_edges, theta)

    def structure_from_mask(self, mask) -> GraphStructure:
        edges = [e for e, on in zip(self.potential_edges, mask) if on]
        return GraphStructure(self.nodes, tuple(edges))

    def mask_of(self, structure: GraphStructure) -> np.ndarray:
        index = {e: k for k, e in enumerate(self.potential_edges)}
        mask = np.zeros(self.d, dtype=bool)
        for e in structure.edges:
            k = index.get(e)
            if k is None:
                raise StructureMismatchError(f"edge {e} is not a potential edge")
            mask[k] = True
        return mask


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def edge_probabilities(params: GraphParams) -> np.ndarray:
    theta = np.asarray(params.theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise InvalidParameterError("theta contains non-finite values")
    return _sigmoid(theta)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_mask(params: GraphParams, rng_seed) -> np.ndarray:
    """Inclusion bits: ``default_rng(seed).random(d) < p``."""
    u = _rng(rng_seed).random(params.d)
    return u < edge_probabilities(params)


def sample_structure(params: GraphParams, rng_seed) -> GraphStructure:
    return params.structure_from_mask(sample_mask(params, rng_seed))


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log(1/(1+e^-x)) = -softplus(-x)
    return -np.logaddexp(0.0, -x)


def log_prob_mask(params: GraphParams, mask) -> float:
    theta = params.theta
    mask = np.asarray(mask, dtype=bool)
    return float(np.sum(np.where(mask, _log_sigmoid(theta), _log_sigmoid(-theta))))


def log_prob(params: GraphParams, structure: GraphStructure) -> float:
    return log_prob_mask(params, params.mask_of(structure))


def log_prob_grad(params: GraphParams, mask) -> np.ndarray:
    """d/dtheta of the log-likelihood: ``included - p``."""
    return np.asarray(mask, dtype=np.float64) - edge_probabilities(params)


def realize_map(params: GraphParams) -> GraphStructure:
    # p >= 0.5 exactly when theta >= 0; the tie includes the edge
    return params.structure_from_mask(params.theta >= 0.0)


def all_pairs_edges(n: int) -> tuple[tuple[int, int], ...]:
    return tuple((u, v) for u in range(n) for v in range(u + 1, n))


def reference_nodes() -> tuple[NodeSpec, ...]:
    """The 12-node composite: three ToT(depth 4, branching 2) agents, three
    Reflect(1 step, 2 passes) agents, five IO nodes and one Output node."""
    return (
        io(0, "io_direct"),
        io(1, "io_plan"),
        tot(2, template="tot_propose"),
        reflect(3, template="reflect_critique"),
        io(4, "io_verify"),
        tot(5, template="tot_search"),
        reflect(6, template="reflect_revise"),
        io(7, "io_extract"),
        tot(8, template="tot_refine"),
        reflect(9, template="reflect_check"),
        io(10, "io_summarize"),
        output(11),
    )


def reference_params(theta0: float = 0.0) -> GraphParams:
    nodes = reference_nodes()
    edges = all_pairs_edges(len(nodes))
    return GraphParams(nodes, edges, np.full(len(edges), theta0))
