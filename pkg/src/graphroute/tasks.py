"""Task environments, metrics, dataset splits and the synthetic affinity task."""
from __future__ import annotations

import ast
import itertools
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSample:
    id: str
    query: str
    target: Any = None

    def to_json(self) -> dict:
        return {"id": self.id, "query": self.query, "target": self.target}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    intro: str
    metric: str  # exact-24 | char-accuracy | option-accuracy | synthetic

    def score(self, answer: str, sample: TaskSample) -> float:
        return score_answer(self, answer, sample)


GAME24 = TaskSpec(
    "Game-of-24",
    "Given four numbers, combine all of them exactly once with +, -, *, / and "
    "parentheses so that the expression equals 24",
    "exact-24",
)
CROSSWORD = TaskSpec(
    "Crossword",
    "Fill a 5x5 mini crossword grid from five horizontal and five vertical clues",
    "char-accuracy",
)
MCQ = TaskSpec(
    "Multiple-choice QA",
    "Answer the question by choosing the single correct option letter",
    "option-accuracy",
)
SYNTHETIC = TaskSpec(
    "Synthetic affinity",
    "A controlled task where the best graph depends on a bucket token in the query",
    "synthetic",
)
BUILTIN_TASKS = {"game24": GAME24, "crossword": CROSSWORD, "mcq": MCQ, "synthetic": SYNTHETIC}


# --- Game of 24 -------------------------------------------------------------

_OPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}


def _normalize_expr(expression: str) -> str:
    expr = expression.strip()
    for a, b in (("×", "*"), ("x", "*"), ("÷", "/"), ("−", "-"), ("–", "-")):
        expr = expr.replace(a, b)
    return re.sub(r"=\s*24\s*$", "", expr).strip()


def _eval(node, leaves: list[int]) -> Fraction:
    if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
        left = _eval(node.left, leaves)
        right = _eval(node.right, leaves)
        if isinstance(node.op, ast.Add):
            return left + right
        if isinstance(node.op, ast.Sub):
            return left - right
        if isinstance(node.op, ast.Mult):
            return left * right
        if right == 0:
            raise ZeroDivisionError("division by zero")
        return left / right
    if isinstance(node, ast.Constant) and type(node.value) is int:
        leaves.append(node.value)
        return Fraction(node.value)
    raise ValueError(f"unsupported token {ast.dump(node)[:40]}")


def game24_diagnose(numbers: Sequence[int], expression: str) -> tuple[int, str]:
    """Score plus a one-line reason; never raises."""
    try:
        tree = ast.parse(_normalize_expr(expression), mode="eval")
    except SyntaxError as exc:
        return 0, f"parse error: {exc.msg}"
    leaves: list[int] = []
    try:
        value = _eval(tree.body, leaves)
    except ZeroDivisionError:
        return 0, "division by zero"
    except ValueError as exc:
        return 0, str(exc)
    if Counter(leaves) != Counter(int(n) for n in numbers):
        return 0, f"operands {sorted(leaves)} do not match {sorted(numbers)}"
    if value != 24:
        return 0, f"evaluates to {value}, not 24"
    return 1, "ok"


def game24_check(numbers: Sequence[int], expression: str) -> int:
    score, reason = game24_diagnose(numbers, expression)
    if not score:
        log.debug("game24 rejected %r: %s", expression, reason)
    return score


def game24_solve(numbers: Sequence[int]) -> str | None:
    """Exhaustive search with exact rationals: repeatedly combine any two
    remaining values with any operator, in both orders."""
    start = tuple((Fraction(n), str(n)) for n in numbers)
    seen: set[tuple] = set()

    def search(items):
        if len(items) == 1:
            return items[0][1] if items[0][0] == 24 else None
        key = tuple(sorted(v for v, _ in items))
        if key in seen:
            return None
        seen.add(key)
        for i, j in itertools.permutations(range(len(items)), 2):
            (a, ea), (b, eb) = items[i], items[j]
            rest = [items[k] for k in range(len(items)) if k not in (i, j)]
            options = [(a + b, f"({ea}+{eb})"), (a - b, f"({ea}-{eb})"), (a * b, f"({ea}*{eb})")]
            if b != 0:
                options.append((a / b, f"({ea}/{eb})"))
            for value, expr in options:
                found = search(rest + [(value, expr)])
                if found:
                    return found
        return None

    found = search(list(start))
    if found and found.startswith("(") and found.endswith(")") and _balanced(found[1:-1]):
        found = found[1:-1]
    return found


def _balanced(s: str) -> bool:
    depth = 0
    for ch in s:
        depth += (ch == "(") - (ch == ")")
        if depth < 0:
            return False
    return depth == 0


# --- Crossword and multiple choice -------------------------------------------

_BLANKS = " _.-?"


def _grid(rows) -> list[str]:
    if isinstance(rows, str):
        rows = [rows[i:i + 5] for i in range(0, len(rows), 5)] if len(rows) == 25 else rows.split("\n")
    rows = list(rows)
    if len(rows) != 5 or any(len(r) != 5 for r in rows):
        raise ValueError("crossword grids must be 5 rows of 5 cells")
    return [r.upper() for r in rows]


def crossword_accuracy(predicted, gold) -> float:
    """Fraction of the 25 cells that match, case-insensitive; blanks never match."""
    p, g = _grid(predicted), _grid(gold)
    hits = sum(pc == gc and pc not in _BLANKS for pr, gr in zip(p, g) for pc, gc in zip(pr, gr))
    return hits / 25.0


def extract_grid(answer: str) -> list[str] | None:
    marker = re.search(r"ANSWER\{([^{}]*)\}", answer)
    if marker:
        cells = re.sub(r"[^A-Za-z_.?]", "", marker.group(1))
        if len(cells) == 25:
            return [cells[i:i + 5] for i in range(0, 25, 5)]
    lines = [ln.strip().replace(" ", "") for ln in answer.splitlines()]
    rows = [ln for ln in lines if re.fullmatch(r"[A-Za-z_.?]{5}", ln)]
    return rows[-5:] if len(rows) >= 5 else None


_OPTION = re.compile(r"(?<![A-Za-z0-9])([A-Z])(?:[).]|(?![A-Za-z0-9]))")


def extract_option(predicted: str) -> str | None:
    m = _OPTION.search(predicted)
    return m.group(1) if m else None


def mcq_score(predicted: str, gold_letter: str) -> int:
    if len(gold_letter) != 1 or not gold_letter.isupper():
        raise ValueError("gold must be a single capital letter")
    return int(extract_option(predicted) == gold_letter)


def extract_expression(answer: str) -> str:
    marker = re.search(r"ANSWER\{([^{}]*)\}", answer)
    if marker:
        return marker.group(1)
    lines = [ln.strip() for ln in answer.strip().splitlines() if ln.strip()]
    return lines[-1] if lines else ""


def score_answer(task: TaskSpec, answer: str, sample: TaskSample) -> float:
    if task.metric == "exact-24":
        return float(game24_check(sample.target, extract_expression(answer)))
    if task.metric == "char-accuracy":
        grid = extract_grid(answer)
        return 0.0 if grid is None else crossword_accuracy(grid, sample.target)
    if task.metric == "option-accuracy":
        marker = re.search(r"ANSWER\{([^{}]*)\}", answer)
        return float(mcq_score(marker.group(1) if marker else answer, sample.target))
    raise ValueError(f"metric {task.metric!r} has no text-answer scorer")


# --- Datasets ----------------------------------------------------------------

def read_jsonl(path) -> list[TaskSample]:
    samples = []
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sample = TaskSample(str(obj["id"]), str(obj["query"]), obj.get("target"))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed sample ({exc})") from None
            if sample.id in ids:
                raise DatasetError(f"{path}:{lineno}: duplicate id {sample.id!r}")
            ids.add(sample.id)
            samples.append(sample)
    return samples


def write_jsonl(path, samples: Sequence[TaskSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def split_samples(samples: Sequence[TaskSample], ratios=(8, 1, 1), seed: int = 0):
    n = len(samples)
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_dev = n * ratios[1] // total
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [samples[i] for i in perm]
    return shuffled[:n_train], shuffled[n_train:n_train + n_dev], shuffled[n_train + n_dev:]


def load_split(path, ratios=(8, 1, 1), seed: int = 0):
    """Deterministic shuffled split: floor(0.8n) / floor(0.1n) / remainder."""
    return split_samples(read_jsonl(path), ratios, seed)


# --- Synthetic affinity task -------------------------------------------------

@dataclass(frozen=True)
class ScoreMatrix:
    values: np.ndarray  # [num_samples, K]
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != len(self.sample_ids):
            raise ValueError("score matrix shape does not match sample ids")
        if not np.all(np.isfinite(values)):
            raise ValueError("score matrix has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))

    @property
    def K(self) -> int:
        return self.values.shape[1]

    def row(self, sample_id: str) -> np.ndarray:
        return self.values[self.sample_ids.index(sample_id)]


_FILLER = (
    "alpha beta gamma delta omega river stone cloud ember frost meadow harbor "
    "signal vector lattice prism quartz cobalt amber violet copper silver "
    "falcon heron lynx otter maple cedar willow aspen orbit comet nebula pulse"
).split()
_BUCKET_WORDS = (
    "azure crimson jade saffron onyx ivory scarlet teal indigo umber ochre "
    "magenta cyan sepia mauve olive"
).split()


def bucket_words(K: int, ngram_buckets: int | None = None) -> tuple[list[str], list[str]]:
    """K bucket words with pairwise distinct token-hash buckets under the
    designer's feature hashing, and the filler words that avoid those buckets."""
    from .designer import FeatureExtractor, token_bucket

    nb = ngram_buckets or FeatureExtractor().ngram_buckets
    taken: dict[int, str] = {}
    for w in _BUCKET_WORDS:
        taken.setdefault(token_bucket(w, nb), w)
        if len(taken) == K:
            break
    else:
        raise ValueError(f"cannot find {K} hash-distinct bucket words")
    filler = [w for w in _FILLER if token_bucket(w, nb) not in taken]
    return list(taken.values()), filler


def synthetic_affinity_task(num_samples: int, K: int, seed: int = 0,
                            base: float = 0.3, bonus: float = 0.4, noise: float = 0.09,
                            balanced: bool = False, id_prefix: str = "syn"):
    """Samples whose query names one of K buckets; candidate b is best on bucket b.

    Scores are ``base + U(-noise, noise)`` plus ``bonus`` on the matching
    candidate, rounded to 0.01.  With ``noise < bonus / 2`` the matching
    candidate is strictly best, while column means stay close together.
    ``balanced`` gives every bucket the same count (up to rounding).
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    rng = np.random.default_rng(seed)
    words, filler_words = bucket_words(K)
    if balanced:
        buckets = rng.permutation(np.arange(num_samples) % K)
    else:
        buckets = rng.integers(0, K, size=num_samples)
    values = base + rng.uniform(-noise, noise, size=(num_samples, K))
    values[np.arange(num_samples), buckets] += bonus
    values = np.clip(np.round(values, 2), 0.0, 1.0)
    samples = []
    for i in range(num_samples):
        filler = rng.choice(filler_words, size=int(rng.integers(3, 9)))
        pos = int(rng.integers(0, len(filler) + 1))
        toks = list(filler[:pos]) + [words[buckets[i]]] + list(filler[pos:])
        samples.append(TaskSample(
            f"{id_prefix}-{i:05d}", " ".join(toks),
            {"bucket": int(buckets[i]), "scores": [float(v) for v in values[i]]},
        ))
    return samples, ScoreMatrix(values, [s.id for s in samples])


def synthetic_splits(num_samples: int, K: int, seed: int = 0, ratios=(8, 1, 1)):
    """Train/dev/test drawn separately with balanced buckets in each split, so
    per-column dev means differ only by noise.  Returns the three splits and
    one score matrix covering all of them."""
    total = sum(ratios)
    sizes = [num_samples * ratios[0] // total, num_samples * ratios[1] // total]
    sizes.append(num_samples - sum(sizes))
    splits, blocks, ids = [], [], []
    for part, (name, n) in enumerate(zip(("train", "dev", "test"), sizes)):
        samples, matrix = synthetic_affinity_task(n, K, seed * 3 + part, balanced=True, id_prefix=f"syn-{name}")
        splits.append(samples)
        blocks.append(matrix.values)
        ids.extend(matrix.sample_ids)
    return splits[0], splits[1], splits[2], ScoreMatrix(np.vstack(blocks), ids)
