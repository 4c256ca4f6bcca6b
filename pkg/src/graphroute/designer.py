"""Graph designer: per-query ranking of candidate graphs.

The designer predicts a rank-like value in (0, 1) for every (query, candidate)
pair; smaller means better, so selection takes the argmin.  It is trained with
a pairwise-weighted listwise loss over each query's K candidates.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import httpx
import numpy as np

from .graph import KINDS, deserialize
from .hashing import stable_hash
from .kernels import WEIGHT_MODES, pairwise_loss_grad, rank_rows
from .optim import AdamW, CandidateSet
from .runners import Runner, safe_run
from .tasks import TaskSample, TaskSpec

log = logging.getLogger(__name__)

DESIGNER_TEMPLATE = (
    "Task Introduction:\n"
    "(a) You are currently acting as the graph designer for the agent system that works on the [task_name] task. \n"
    "(b) The task [task_name]'s introduction is as follows: [task_intro].\n"
    "(c) you will be given an input query, and a graph structure. Please evaluate the graph structure's "
    "quality in terms of how it will help solving the task in the input prompt. \n"
    "\n"
    "The input query is: \n"
    "[input_query].\n"
    "\n"
    "The graph structure is:\n"
    "[graph_structure]\n"
)
_SLOT = re.compile(r"\[(task_name|task_intro|input_query|graph_structure)\]")
_RENDERED = re.compile(
    r"^Task Introduction:\n.*?works on the (?P<task_name>.*?) task\. \n"
    r"\(b\) The task .*?'s introduction is as follows: (?P<task_intro>.*?)\.\n"
    r".*?The input query is: \n(?P<input_query>.*)\.\n\nThe graph structure is:\n(?P<graph>.*)\n$",
    re.S,
)


def render_query(task_name: str, task_intro: str, input_query: str, graph_text: str) -> str:
    slots = {"task_name": task_name, "task_intro": task_intro,
             "input_query": input_query, "graph_structure": graph_text}
    for k, v in slots.items():
        if not v:
            raise ValueError(f"template slot {k} is empty")
    return _SLOT.sub(lambda m: slots[m.group(1)], DESIGNER_TEMPLATE)


def parse_rendered_query(text: str) -> dict | None:
    """Inverse of :func:`render_query`; ``None`` if ``text`` is not a rendered prompt."""
    m = _RENDERED.match(text)
    return m.groupdict() if m else None


# --- Ranking loss ------------------------------------------------------------

def rank_scores(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError("need at least one score")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return rank_rows(scores[None, :])[0]


def pair_weight(s_i: float, s_j: float, r_i: int, r_j: int, uniform: bool = False,
                printed: bool = False) -> float:
    """Weight of ordered pair (i, j); nonzero only when i strictly beats j."""
    if not s_i > s_j:
        return 0.0
    if uniform:
        return 1.0
    gap = abs(r_i - r_j)
    if printed:
        return max(0.0, gap ** 0.5)
    return 1.0 - (gap + 1) ** -0.5


def gelu(x: float) -> float:
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def gelu_grad(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0))) + x * math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def weight_mode(uniform: bool = False, printed: bool = False) -> int:
    if uniform:
        return WEIGHT_MODES["uniform"]
    return WEIGHT_MODES["printed" if printed else "rank-gap"]


def ranking_loss(scores, predictions, uniform: bool = False, printed: bool = False) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and predictions differ in length")
    r = rank_scores(s)
    total = 0.0
    for i in range(len(s)):
        for j in range(len(s)):
            if i != j:
                m = pair_weight(s[i], s[j], r[i], r[j], uniform, printed)
                if m:
                    total += m * gelu((s[j] - s[i]) * (y[j] - y[i]))
    return total


# --- Features and scorer -----------------------------------------------------

def tokenize(text: str) -> list[str]:
    return re.findall(r"\w+", text.lower())


def token_bucket(token: str, buckets: int) -> int:
    return stable_hash(token, "tok") % buckets


@dataclass(frozen=True)
class FeatureExtractor:
    """Fixed-length features for a (query, graph) pair.

    Layout, in order:

    ``E = n(n-1)/2`` edge indicators over all (u < v) pairs of an ``n``-node
    roster; 4 node-kind counts divided by n; edge count divided by E;
    ``length_buckets`` one-hot of floor(log2(1 + chars) / 3), capped; ``ngram_buckets``
    hashed token presence bits; then the outer product of the edge indicators
    with the query block (length one-hot + token bits), row-major.
    """

    num_nodes: int = 12
    length_buckets: int = 4
    ngram_buckets: int = 32

    @property
    def n_edges(self) -> int:
        return self.num_nodes * (self.num_nodes - 1) // 2

    @property
    def query_dim(self) -> int:
        return self.length_buckets + self.ngram_buckets

    @property
    def dim(self) -> int:
        return self.n_edges + len(KINDS) + 1 + self.query_dim + self.n_edges * self.query_dim

    def edge_index(self, u: int, v: int) -> int | None:
        n = self.num_nodes
        if not (0 <= u < v < n):
            return None
        return u * (2 * n - u - 1) // 2 + (v - u - 1)

    def graph_block(self, graph_text: str) -> np.ndarray:
        return _graph_block(self, graph_text)

    def query_block(self, query: str) -> np.ndarray:
        q = np.zeros(self.query_dim)
        if not query:
            return q
        q[min(self.length_buckets - 1, int(math.log2(1 + len(query))) // 3)] = 1.0
        for tok in tokenize(query):
            q[self.length_buckets + token_bucket(tok, self.ngram_buckets)] = 1.0
        return q

    def extract(self, query: str, graph_text: str) -> np.ndarray:
        g = self.graph_block(graph_text)
        q = self.query_block(query)
        return np.concatenate([g, q, np.outer(g[:self.n_edges], q).ravel()])


@lru_cache(maxsize=4096)
def _graph_block(fx: FeatureExtractor, graph_text: str) -> np.ndarray:
    g = deserialize(graph_text)
    block = np.zeros(fx.n_edges + len(KINDS) + 1)
    for u, v in g.edges:
        k = fx.edge_index(u, v)
        if k is not None:
            block[k] = 1.0
    for node in g.nodes:
        block[fx.n_edges + KINDS.index(node.kind)] += 1.0 / fx.num_nodes
    block[-1] = len(g.edges) / max(1, fx.n_edges)
    block.setflags(write=False)
    return block


DEFAULT_EXTRACTOR = FeatureExtractor()


def _input_query(query: str) -> str:
    parsed = parse_rendered_query(query)
    return parsed["input_query"] if parsed else query


def extract_features(query: str, graph_text: str, extractor: FeatureExtractor = DEFAULT_EXTRACTOR) -> np.ndarray:
    return extractor.extract(_input_query(query), graph_text)


@dataclass
class ScorerParams:
    weights: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls, dim: int) -> "ScorerParams":
        return cls(np.zeros(dim), 0.0)

    def vector(self) -> np.ndarray:
        return np.append(self.weights, self.bias)

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "ScorerParams":
        return cls(np.array(v[:-1], dtype=np.float64), float(v[-1]))

    def to_json(self) -> dict:
        return {"bias": self.bias, "weights": [float(w) for w in self.weights]}

    @classmethod
    def from_json(cls, obj: dict) -> "ScorerParams":
        return cls(np.array(obj["weights"], dtype=np.float64), float(obj["bias"]))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def score(params: ScorerParams, query: str, graph_text: str,
          extractor: FeatureExtractor = DEFAULT_EXTRACTOR) -> float:
    """sigmoid(w . features + b); ``query`` may be raw or a rendered prompt."""
    return float(_sigmoid(params.weights @ extract_features(query, graph_text, extractor) + params.bias))


def predict(params: ScorerParams, features: np.ndarray) -> np.ndarray:
    return _sigmoid(features @ params.weights + params.bias)


def group_loss_and_grad(params: ScorerParams, S: np.ndarray, F: np.ndarray, R: np.ndarray | None = None,
                        mode: int = 0):
    """Summed loss over groups and its gradient as a flat ``[D + 1]`` vector.

    ``S`` is ``[G, K]`` scores, ``F`` is ``[G, K, D]`` features.
    """
    S = np.atleast_2d(S)
    if R is None:
        R = rank_rows(S)
    Y = predict(params, F)
    loss, dY = pairwise_loss_grad(S, Y, R, mode)
    dlogit = dY * Y * (1.0 - Y)
    grad_w = np.einsum("gk,gkd->d", dlogit, F)
    return float(loss.sum()), np.append(grad_w, dlogit.sum())


def loss_gradient(scores, features, params: ScorerParams, uniform: bool = False,
                  printed: bool = False) -> ScorerParams:
    """Exact gradient of one query's ranking loss w.r.t. the scorer parameters."""
    s = np.asarray(scores, dtype=np.float64)
    F = np.asarray(features, dtype=np.float64)
    if F.shape[0] != s.shape[0]:
        raise ValueError("one feature row per candidate is required")
    _, g = group_loss_and_grad(params, s[None, :], F[None, :, :], mode=weight_mode(uniform, printed))
    return ScorerParams.from_vector(g)


def params_loss(scores, features, params: ScorerParams, uniform: bool = False, printed: bool = False) -> float:
    return ranking_loss(scores, predict(params, np.asarray(features)), uniform, printed)


class Scorer(Protocol):
    calls: int

    def score(self, rendered_query: str, graph_text: str) -> float: ...


class FeatureScorer:
    def __init__(self, params: ScorerParams, extractor: FeatureExtractor = DEFAULT_EXTRACTOR):
        self.params = params
        self.extractor = extractor
        self.calls = 0

    def score(self, rendered_query: str, graph_text: str) -> float:
        self.calls += 1
        return score(self.params, rendered_query, graph_text, self.extractor)


class RemoteScorer:
    """Scores through an HTTP service: POST ``{url}`` with ``{"query", "graph"}``,
    expecting ``{"score": float}``."""

    def __init__(self, url: str, timeout: float = 30.0, transport: httpx.BaseTransport | None = None):
        self.url = url
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self.calls = 0

    def score(self, rendered_query: str, graph_text: str) -> float:
        self.calls += 1
        resp = self._client.post(self.url, json={"query": rendered_query, "graph": graph_text})
        resp.raise_for_status()
        value = float(resp.json()["score"])
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"remote score {value} outside [0, 1]")
        return value


def select_graph(scorer: Scorer, query: str, candidates: CandidateSet | Sequence, task: TaskSpec,
                 select_highest: bool = False) -> int:
    """1-based index of the candidate with the lowest predicted rank value
    (highest with ``select_highest``); ties go to the smaller index."""
    texts = candidates.texts() if isinstance(candidates, CandidateSet) else list(candidates)
    if not texts:
        raise ValueError("no candidates")
    if len(texts) == 1:
        return 1
    values = [scorer.score(render_query(task.name, task.intro, query or " ", t), t) for t in texts]
    if select_highest:
        return int(np.argmax(values)) + 1
    return int(np.argmin(values)) + 1


# --- Dataset -----------------------------------------------------------------

@dataclass
class DesignerRecord:
    sample_id: str
    candidate_index: int
    rendered_query: str
    graph_text: str
    score: float
    rank: int
    failed: bool = field(default=False, compare=False)

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "candidate_index": self.candidate_index,
                "query": self.rendered_query, "graph": self.graph_text,
                "score": self.score, "rank": self.rank}

    @classmethod
    def from_json(cls, obj: dict) -> "DesignerRecord":
        return cls(str(obj["sample_id"]), int(obj["candidate_index"]), obj["query"], obj["graph"],
                   float(obj["score"]), int(obj["rank"]))


def write_records(path, records: Sequence[DesignerRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def read_records(path) -> list[DesignerRecord]:
    with open(path, encoding="utf-8") as fh:
        return [DesignerRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def build_designer_dataset(samples: Sequence[TaskSample], candidates: CandidateSet, runner: Runner,
                           task: TaskSpec) -> list[DesignerRecord]:
    """Run every candidate on every sample; K ranked records per sample."""
    if len(candidates) == 0:
        raise ValueError("candidates must be non-empty")
    texts = candidates.texts()
    records = []
    for sample in samples:
        outcomes = [safe_run(runner, g, sample) for g in candidates.graphs]
        scores = [o.score for o in outcomes]
        ranks = rank_scores(scores)
        for k, (text, o) in enumerate(zip(texts, outcomes)):
            records.append(DesignerRecord(
                sample.id, k + 1, render_query(task.name, task.intro, sample.query or " ", text),
                text, o.score, int(ranks[k]), o.failed,
            ))
    return records


# --- Training ----------------------------------------------------------------

@dataclass(frozen=True)
class DesignerHyper:
    lr: float = 1e-4
    warmup_frac: float = 0.06
    eval_every: int = 50
    patience: int = 10
    max_epochs: int = 10
    batch_size: int | None = None  # None: about 128 steps per epoch
    weight_decay: float = 0.0
    uniform_pair_weight: bool = False
    printed_m_formula: bool = False
    seed: int = 0


@dataclass
class TrainHistory:
    evals: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    stopped_early: bool = False
    steps: int = 0


def group_records(records: Sequence[DesignerRecord], extractor: FeatureExtractor = DEFAULT_EXTRACTOR):
    """Stack records into ``S [G, K]`` and ``F [G, K, D]`` (groups by sample id,
    candidates in index order)."""
    groups: dict[str, list[DesignerRecord]] = {}
    for r in records:
        groups.setdefault(r.sample_id, []).append(r)
    sizes = {len(g) for g in groups.values()}
    if len(sizes) != 1:
        raise ValueError("every sample needs the same number of candidate records")
    ids = list(groups)
    S = np.array([[r.score for r in sorted(groups[i], key=lambda r: r.candidate_index)] for i in ids])
    F = np.array([[extract_features(r.rendered_query, r.graph_text, extractor)
                   for r in sorted(groups[i], key=lambda r: r.candidate_index)] for i in ids])
    return ids, S, F


def lr_at(step: int, total: int, base: float, warmup: int) -> float:
    """Linear warmup to ``base`` over ``warmup`` steps, then linear decay to 0."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    return base * max(0.0, (total - step) / max(1, total - warmup))


def train_scorer(records: Sequence[DesignerRecord], hyper: DesignerHyper = DesignerHyper(),
                 dev_records: Sequence[DesignerRecord] | None = None,
                 extractor: FeatureExtractor = DEFAULT_EXTRACTOR,
                 history: TrainHistory | None = None) -> ScorerParams:
    """Minibatch AdamW over per-sample K-groups with dev-loss early stopping.

    Without ``dev_records`` the last tenth of the groups is held out.  Returns
    the parameters with the lowest dev loss (earliest on ties).
    """
    if not records:
        raise ValueError("no training records")
    history = history if history is not None else TrainHistory()
    _, S, F = group_records(records, extractor)
    if dev_records:
        _, S_dev, F_dev = group_records(dev_records, extractor)
    else:
        n_dev = max(1, len(S) // 10) if len(S) > 1 else 0
        if n_dev:
            S, S_dev, F, F_dev = S[:-n_dev], S[-n_dev:], F[:-n_dev], F[-n_dev:]
        else:
            S_dev, F_dev = S, F
    mode = weight_mode(hyper.uniform_pair_weight, hyper.printed_m_formula)
    R, R_dev = rank_rows(S), rank_rows(S_dev)
    G = len(S)
    batch = hyper.batch_size or max(1, math.ceil(G / 128))
    per_epoch = math.ceil(G / batch)
    total = per_epoch * hyper.max_epochs
    warmup = math.ceil(hyper.warmup_frac * total)

    params = ScorerParams.zeros(F.shape[2])
    x = params.vector()
    opt = AdamW(x.size, hyper.lr, weight_decay=hyper.weight_decay)
    rng = np.random.default_rng(hyper.seed)

    def dev_loss(vec):
        loss, _ = group_loss_and_grad(ScorerParams.from_vector(vec), S_dev, F_dev, R_dev, mode)
        return loss / len(S_dev)

    best_x, best_loss = x.copy(), dev_loss(x)
    history.evals.append((0, best_loss))
    stale = 0
    step = 0
    for _ in range(hyper.max_epochs):
        order = rng.permutation(G)
        for b in range(per_epoch):
            idx = order[b * batch:(b + 1) * batch]
            _, grad = group_loss_and_grad(ScorerParams.from_vector(x), S[idx], F[idx], R[idx], mode)
            x = opt.step(x, grad / len(idx), lr=lr_at(step, total, hyper.lr, warmup))
            step += 1
            if step % hyper.eval_every == 0:
                loss = dev_loss(x)
                history.evals.append((step, loss))
                if loss < best_loss:
                    best_x, best_loss, stale = x.copy(), loss, 0
                    history.best_step = step
                else:
                    stale += 1
                    if stale >= hyper.patience:
                        history.stopped_early = True
                        history.steps = step
                        log.info("early stop at step %d (best %d)", step, history.best_step)
                        return ScorerParams.from_vector(best_x)
    history.steps = step
    return ScorerParams.from_vector(best_x)
