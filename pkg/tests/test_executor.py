import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphroute.executor import (
    BackendError,
    BudgetExceededError,
    ExecutionContext,
    ExecutionError,
    MockBackend,
    TextBackend,
    estimated_calls,
    io_execute,
    node_calls,
    reflect_execute,
    run_graph,
    tot_execute,
)
from graphroute.graph import (
    GraphStructure,
    all_pairs_edges,
    io,
    output,
    reference_nodes,
    reference_params,
    reflect,
    sample_structure,
    tot,
)


class Counting:
    """Call recorder usable as the ``call`` argument of node executors."""

    def __init__(self, backend):
        self.backend = backend
        self.prompts = []

    def __call__(self, prompt):
        self.prompts.append(prompt)
        return self.backend.complete(prompt)


class LexicographicBackend(TextBackend):
    """Scores candidates by their lexicographic rank; remembers the last listing."""

    def __init__(self):
        self.mock = MockBackend()
        self.last_listing = []

    def complete(self, prompt, *, seed=0, max_tokens=256):
        m = re.search(r"Return exactly (\d+) scores", prompt)
        if not m:
            return self.mock.complete(prompt, seed=seed)
        block = prompt.split("Candidates:\n", 1)[1].split("\n\nReturn exactly", 1)[0]
        items = [re.sub(r"^\d+\. ", "", ln) for ln in block.splitlines()]
        self.last_listing = items
        order = sorted(range(len(items)), key=lambda i: items[i])
        scores = [0] * len(items)
        for r, i in enumerate(order):
            scores[i] = r
        return " ".join(map(str, scores))


class FailingBackend(TextBackend):
    def complete(self, prompt, *, seed=0, max_tokens=256):
        raise BackendError("down")


def _flat(text):
    return " / ".join(ln.strip() for ln in text.splitlines() if ln.strip())


def test_tot_call_counts_reference():
    call = Counting(MockBackend())
    tot_execute(tot(0), "Query:\nq", call)
    gens = [p for p in call.prompts if "Propose the next step" in p]
    evals = [p for p in call.prompts if "Return exactly" in p]
    assert (len(gens), len(evals)) == (14, 4)
    assert node_calls(tot(0), 1) == 18


def test_tot_degenerate_tree():
    call = Counting(MockBackend())
    tot_execute(tot(0, depth=1, branching=1), "Query:\nq", call)
    assert len(call.prompts) == 2


def test_tot_returns_lexicographic_max_leaf():
    backend = LexicographicBackend()
    leaf = tot_execute(tot(0), "Query:\nsome puzzle", backend.complete)
    assert _flat(leaf) == max(backend.last_listing)


def test_reflect_call_counts():
    call = Counting(MockBackend())
    reflect_execute(reflect(0), "Query:\nq", call)
    assert len(call.prompts) == 3
    assert node_calls(reflect(0), 1) == 3

    call = Counting(MockBackend())
    draft = reflect_execute(reflect(0, passes=1), "Query:\nq", call)
    assert len(call.prompts) == 1
    assert draft == MockBackend().complete(call.prompts[0])


def test_reflect_continues_after_empty_critique():
    class EmptyCritique(TextBackend):
        def complete(self, prompt, *, seed=0, max_tokens=256):
            return "" if prompt.startswith("Critique") else "draft"

    call = Counting(EmptyCritique())
    assert reflect_execute(reflect(0), "Query:\nq", call) == "draft"
    assert len(call.prompts) == 3


def test_single_hop_answer():
    g = GraphStructure((io(0), output(1)), ((0, 1),))
    backend = MockBackend()
    answer, tr = run_graph(g, backend, ExecutionContext("what is 2+2", 5))
    prompt = io_execute(io(0), "Query:\nwhat is 2+2", lambda p: p)
    assert answer == MockBackend().complete(prompt, seed=5)
    assert tr.backend_calls == 1


def test_mock_backend_conventions():
    m = MockBackend()
    assert m.complete("hello", seed=1) == m.complete("hello", seed=1)
    assert m.complete("hello", seed=1) != m.complete("hello", seed=2)
    assert m.complete("solve ANSWER{42} now").endswith("ANSWER{42}")
    nums = m.complete("Return exactly 5 scores between 0 and 10").split()
    assert len(nums) == 5 and all(0 <= int(x) <= 10 for x in nums)


@pytest.mark.parametrize("workers", [1, 4])
def test_full_reference_structure(workers):
    nodes = reference_nodes()
    g = GraphStructure(nodes, all_pairs_edges(12))
    _, tr = run_graph(g, MockBackend(), ExecutionContext("q"), workers=workers)
    order = tr.order()
    assert len(tr.records) == 12 and sorted(order) == list(range(12))
    pos = {nid: i for i, nid in enumerate(order)}
    assert all(pos[u] < pos[v] for u, v in g.edges)
    assert tr.backend_calls == estimated_calls(g)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 3))
def test_run_is_pure_and_call_estimate_exact(seed, run_seed):
    g = sample_structure(reference_params(), seed)
    a = run_graph(g, MockBackend(), ExecutionContext("query text", run_seed))
    b = run_graph(g, MockBackend(), ExecutionContext("query text", run_seed))
    assert a[0] == b[0]
    assert [(r.node_id, r.output, r.inputs) for r in a[1].records] == \
           [(r.node_id, r.output, r.inputs) for r in b[1].records]
    assert a[1].backend_calls == estimated_calls(g)
    pos = {nid: i for i, nid in enumerate(a[1].order())}
    assert all(pos[u] < pos[v] for u, v in g.edges if u in pos and v in pos)


def test_parallel_matches_serial():
    g = sample_structure(reference_params(1.0), 3)
    a = run_graph(g, MockBackend(), ExecutionContext("q", 2), workers=1)
    b = run_graph(g, MockBackend(), ExecutionContext("q", 2), workers=4)
    assert a[0] == b[0]
    assert [r.output for r in a[1].records] == [r.output for r in b[1].records]


def test_degenerate_runs_first_io_only():
    g = GraphStructure(reference_nodes(), ())
    _, tr = run_graph(g, MockBackend(), ExecutionContext("q"))
    assert tr.order() == [0] and tr.backend_calls == 1 == estimated_calls(g)


def test_budget_exceeded():
    g = GraphStructure(reference_nodes(), all_pairs_edges(12))
    with pytest.raises(BudgetExceededError) as err:
        run_graph(g, MockBackend(), ExecutionContext("q", max_calls=10))
    assert err.value.transcript is not None
    assert err.value.transcript.backend_calls == 10


def test_backend_failure_keeps_partial_transcript():
    g = GraphStructure((io(0), io(1), output(2)), ((0, 1), (1, 2)))
    with pytest.raises(ExecutionError) as err:
        run_graph(g, FailingBackend(), ExecutionContext("q"))
    tr = err.value.transcript
    assert tr.records and tr.records[-1].error is not None


def test_simulated_latency():
    g = GraphStructure(reference_nodes(), ((2, 11),))
    _, tr = run_graph(g, MockBackend(call_seconds=0.5), ExecutionContext("q"))
    assert tr.wall_time == pytest.approx(0.5 * tr.backend_calls)
