"""Run a realized agent graph on one query against a text backend."""
from __future__ import annotations

import logging
import re
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .graph import GraphStructure, NodeSpec, topological_order
from .hashing import stable_hash

log = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """Any failure reported by a text backend."""


class ExecutionError(RuntimeError):
    def __init__(self, message: str, transcript: "Transcript | None" = None):
        super().__init__(message)
        self.transcript = transcript if transcript is not None else Transcript()


class BudgetExceededError(ExecutionError):
    pass


class TextBackend(ABC):
    # Seconds charged per call for deterministic latency accounting; ``None``
    # means wall time is measured instead.
    simulated_seconds: float | None = None

    @abstractmethod
    def complete(self, prompt: str, *, seed: int = 0, max_tokens: int = 256) -> str:
        ...

    def healthcheck(self) -> bool:
        return True


_VOCAB = (
    "consider the first clue then check each letter against crossing words "
    "combine partial results carefully verify arithmetic before committing try "
    "another branch if stuck prefer shorter steps keep track of constraints "
    "evaluate candidate options rank them propose refine summarize answer "
    "reason about structure align with goal reduce errors compare alternatives"
).split()

_MARKER = re.compile(r"ANSWER\{[^{}]*\}")
_SCORE_REQUEST = re.compile(r"Return exactly (\d+) scores")


class MockBackend(TextBackend):
    """Deterministic in-process backend.

    The completion is a keyed-hash function of ``(prompt, seed)``.  Two
    conventions make it usable for tests:

    * a prompt containing ``ANSWER{...}`` gets that marker echoed at the end of
      the completion (the first marker found);
    * a prompt asking to "Return exactly N scores" gets N integers in 0..10.
    """

    def __init__(self, words: int = 8, call_seconds: float = 1.0):
        self.words = words
        self.simulated_seconds = call_seconds
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str, *, seed: int = 0, max_tokens: int = 256) -> str:
        with self._lock:
            self.calls += 1
        key = f"{seed}"
        m = _SCORE_REQUEST.search(prompt)
        if m:
            n = int(m.group(1))
            return " ".join(str(stable_hash(prompt, f"{key}:score:{i}") % 11) for i in range(n))
        toks = [_VOCAB[stable_hash(prompt, f"{key}:{i}") % len(_VOCAB)] for i in range(self.words)]
        text = " ".join(toks[:max_tokens])
        marker = _MARKER.search(prompt)
        if marker:
            text += " " + marker.group(0)
        return text


@dataclass(frozen=True)
class ExecutionContext:
    query: str
    rng_seed: int = 0
    max_calls: int = 1000
    max_tokens_per_call: int = 256
    timeout_per_call: float = 30.0

    def __post_init__(self):
        if self.max_calls <= 0 or self.max_tokens_per_call <= 0 or self.timeout_per_call <= 0:
            raise ValueError("generation limits must be positive")


@dataclass
class NodeRecord:
    node_id: int
    inputs: list[str]
    output: str
    backend_calls: int
    wall_time: float
    error: str | None = None


@dataclass
class Transcript:
    records: list[NodeRecord] = field(default_factory=list)

    @property
    def backend_calls(self) -> int:
        return sum(r.backend_calls for r in self.records)

    @property
    def wall_time(self) -> float:
        return sum(r.wall_time for r in self.records)

    def order(self) -> list[int]:
        return [r.node_id for r in self.records]


# Prompt wording is configuration; keys are template ids, falling back to kind.
DEFAULT_INSTRUCTIONS = {
    "io": "Solve the task below directly.",
    "io_direct": "Solve the task below directly.",
    "io_plan": "Outline a short plan for solving the task below, then give an answer.",
    "io_verify": "Check the material below for mistakes and give a corrected answer.",
    "io_extract": "Extract the most likely final answer from the material below.",
    "io_summarize": "Summarize the reasoning below into a concise answer.",
    "tot": "Work on the task below one step at a time.",
    "reflect": "Answer the task below.",
    "output": "Combine the candidate answers below into one final answer.",
}


def _instruction(node: NodeSpec) -> str:
    return DEFAULT_INSTRUCTIONS.get(node.prompt_template_id) or DEFAULT_INSTRUCTIONS[node.kind]


def _flat(text: str) -> str:
    return " / ".join(line.strip() for line in text.splitlines() if line.strip())


class _Meter:
    """Shared call budget for one graph run."""

    def __init__(self, backend: TextBackend, ctx: ExecutionContext):
        self.backend = backend
        self.ctx = ctx
        self.total = 0
        self._lock = threading.Lock()

    def caller(self) -> "_NodeCaller":
        return _NodeCaller(self)


class _NodeCaller:
    def __init__(self, meter: _Meter):
        self.meter = meter
        self.calls = 0

    def __call__(self, prompt: str) -> str:
        m = self.meter
        with m._lock:
            if m.total >= m.ctx.max_calls:
                raise BudgetExceededError(f"backend call budget of {m.ctx.max_calls} exhausted")
            m.total += 1
        self.calls += 1
        return m.backend.complete(prompt, seed=m.ctx.rng_seed, max_tokens=m.ctx.max_tokens_per_call)


def node_input(query: str, pred_outputs: list[tuple[int, str]]) -> str:
    parts = [f"Query:\n{query}"]
    for pid, text in pred_outputs:
        parts.append(f"[node {pid} output]\n{text}")
    return "\n\n".join(parts)


def parse_scores(text: str, n: int) -> list[float]:
    nums = [float(x) for x in re.findall(r"-?\d+(?:\.\d+)?", text)[:n]]
    return nums + [0.0] * (n - len(nums))


def io_execute(node: NodeSpec, text: str, call) -> str:
    return call(f"{_instruction(node)}\n\n{text}\n\nAnswer:")


def tot_execute(node: NodeSpec, text: str, call) -> str:
    """Beam search over thoughts: ``branching`` continuations per kept state,
    one joint evaluation call per level, keep the best ``branching`` states."""
    cfg = node.config
    depth, b = cfg["depth"], cfg["branching"]
    frontier = [""]
    leaves: list[str] = []
    for level in range(depth):
        candidates = []
        for state in frontier:
            for k in range(b):
                step = call(
                    f"{_instruction(node)}\n\n{text}\n\n"
                    f"Partial solution so far:\n{state or '(empty)'}\n\n"
                    f"Propose the next step (branch {k + 1} of {b}, level {level + 1} of {depth}):"
                )
                candidates.append(f"{state}\n{step}".strip("\n"))
        listing = "\n".join(f"{i + 1}. {_flat(c)}" for i, c in enumerate(candidates))
        verdict = call(
            f"Evaluate how promising each candidate is for the task.\n\n{text}\n\n"
            f"Candidates:\n{listing}\n\n"
            f"Return exactly {len(candidates)} scores between 0 and 10 separated by spaces."
        )
        scores = parse_scores(verdict, len(candidates))
        order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
        frontier = [candidates[i] for i in order[:b]]
        leaves = frontier
    return leaves[0]


def reflect_execute(node: NodeSpec, text: str, call) -> str:
    """Draft, then per extra pass: ``reflection_steps`` critiques and one revision."""
    cfg = node.config
    answer = call(f"{_instruction(node)}\n\n{text}\n\nDraft answer:")
    for _ in range(cfg["passes"] - 1):
        notes = []
        for _ in range(cfg["reflection_steps"]):
            prior = "".join(f"\nEarlier reflection:\n{n}\n" for n in notes)
            notes.append(call(
                f"Critique the answer below and point out errors.\n\n{text}\n\n"
                f"Answer:\n{answer}\n{prior}\nReflection:"
            ))
        joined = "\n".join(notes)
        answer = call(
            f"Revise the answer using the reflection.\n\n{text}\n\n"
            f"Answer:\n{answer}\n\nReflection:\n{joined}\n\nRevised answer:"
        )
    return answer


def output_execute(node: NodeSpec, text: str, pred_outputs: list[tuple[int, str]], call) -> str:
    if len(pred_outputs) == 1:
        return pred_outputs[0][1]
    return call(f"{_instruction(node)}\n\n{text}\n\nFinal answer:")


def node_calls(node: NodeSpec, n_preds: int) -> int:
    """Backend calls one node makes (static, independent of the backend)."""
    cfg = node.config
    if node.kind == "io":
        return 1
    if node.kind == "reflect":
        return 1 + (cfg["passes"] - 1) * (cfg["reflection_steps"] + 1)
    if node.kind == "tot":
        b, gens, width = cfg["branching"], 0, 1
        for _ in range(cfg["depth"]):
            gens += width * b
            width = min(b, width * b)
        return gens + cfg["depth"]
    return 0 if n_preds == 1 else 1


def estimated_calls(structure: GraphStructure) -> int:
    if structure.degenerate:
        return 1
    return sum(node_calls(n, len(structure.predecessors(n.node_id))) for n in structure.nodes)


def _run_node(node, structure, query, outputs, meter):
    preds = [(p, outputs[p]) for p in structure.predecessors(node.node_id)]
    text = node_input(query, preds)
    call = meter.caller()
    t0 = time.perf_counter()
    error = None
    out = ""
    try:
        if node.kind == "io":
            out = io_execute(node, text, call)
        elif node.kind == "tot":
            out = tot_execute(node, text, call)
        elif node.kind == "reflect":
            out = reflect_execute(node, text, call)
        else:
            out = output_execute(node, text, preds, call)
    except Exception as exc:  # recorded, then re-raised by the scheduler
        error = exc
    sim = meter.backend.simulated_seconds
    wall = call.calls * sim if sim is not None else time.perf_counter() - t0
    rec = NodeRecord(node.node_id, [query] + [o for _, o in preds], out, call.calls, wall,
                     None if error is None else f"{type(error).__name__}: {error}")
    return rec, error


def run_graph(structure: GraphStructure, backend: TextBackend, ctx: ExecutionContext,
              workers: int = 1) -> tuple[str, Transcript]:
    """Execute every node once in topological order and return the Output
    node's answer.  Degenerate structures run the first IO node alone."""
    meter = _Meter(backend, ctx)
    transcript = Transcript()
    if structure.degenerate:
        first_io = next(n for n in structure.nodes if n.kind == "io")
        rec, err = _run_node(first_io, GraphStructure(structure.nodes, ()), ctx.query, {}, meter)
        transcript.records.append(rec)
        if err is not None:
            raise _wrap(err, transcript)
        return rec.output, transcript

    order = topological_order(len(structure.nodes), structure.edges)
    rank = {nid: i for i, nid in enumerate(order)}
    outputs: dict[int, str] = {}
    if workers <= 1:
        for nid in order:
            rec, err = _run_node(structure.nodes[nid], structure, ctx.query, outputs, meter)
            transcript.records.append(rec)
            if err is not None:
                raise _wrap(err, transcript)
            outputs[nid] = rec.output
    else:
        done: set[int] = set()
        preds = {n.node_id: set(structure.predecessors(n.node_id)) for n in structure.nodes}
        with ThreadPoolExecutor(max_workers=workers) as pool:
            while len(done) < len(order):
                wave = [nid for nid in order if nid not in done and preds[nid] <= done]
                results = list(pool.map(
                    lambda nid: _run_node(structure.nodes[nid], structure, ctx.query, outputs, meter), wave))
                failure = None
                for nid, (rec, err) in zip(wave, results):
                    transcript.records.append(rec)
                    outputs[nid] = rec.output
                    done.add(nid)
                    failure = failure or err
                transcript.records.sort(key=lambda r: rank[r.node_id])
                if failure is not None:
                    raise _wrap(failure, transcript)
    return outputs[structure.output_id], transcript


def _wrap(err: Exception, transcript: Transcript) -> ExecutionError:
    if isinstance(err, ExecutionError):
        err.transcript = transcript
        return err
    log.warning("graph execution failed: %s", err)
    wrapped = ExecutionError(f"backend failure: {type(err).__name__}: {err}", transcript)
    wrapped.__cause__ = err
    return wrapped
