from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphroute.tasks import (
    CROSSWORD,
    GAME24,
    MCQ,
    DatasetError,
    TaskSample,
    bucket_words,
    crossword_accuracy,
    extract_grid,
    extract_option,
    game24_check,
    game24_diagnose,
    game24_solve,
    load_split,
    mcq_score,
    read_jsonl,
    score_answer,
    split_samples,
    synthetic_affinity_task,
    write_jsonl,
)
from oracles import brute_force_24, exact_value, single_token_mutations


@pytest.mark.parametrize("numbers,expr,expected", [
    ((4, 9, 10, 13), "(10-4)*(13-9)", 1),
    ((1, 1, 1, 1), "1+1+1+1", 0),
    ((3, 3, 8, 8), "8/(3-8/3)", 1),
    ((4, 9, 10, 13), "(10-4)*(13-9) = 24", 1),
    ((4, 9, 10, 13), "(10-4)*(13-8)", 0),  # wrong operand
    ((4, 9, 10, 13), "(10-4)*4", 0),  # missing operand
    ((1, 2, 3, 4), "1/(2-2)*3*4", 0),
    ((1, 2, 3, 4), "((1+2", 0),
    ((1, 2, 3, 4), "import os", 0),
    ((2, 3, 4, 1), "2 × 3 × 4 × 1", 1),
])
def test_game24_check(numbers, expr, expected):
    assert game24_check(numbers, expr) == expected


def test_division_by_zero_diagnostic():
    assert game24_diagnose((1, 2, 3, 4), "4/(2-2)+1+3") == (0, "division by zero")


@pytest.mark.parametrize("numbers", [(4, 9, 10, 13), (6, 6, 6, 6), (3, 3, 8, 8), (1, 5, 5, 5)])
def test_solver_witness_accepted(numbers):
    witness = game24_solve(numbers)
    assert witness is not None and game24_check(numbers, witness) == 1


def test_solver_reports_unsolvable():
    assert game24_solve((1, 1, 1, 1)) is None
    assert brute_force_24((1, 1, 1, 1)) is None


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=4, max_size=4))
def test_solver_agrees_with_brute_force(numbers):
    witness = game24_solve(numbers)
    assert (witness is None) == (brute_force_24(numbers) is None)
    if witness:
        assert exact_value(witness) == 24
        assert game24_check(numbers, witness) == 1


def test_value_changing_mutations_rejected():
    numbers = (4, 9, 10, 13)
    witness = game24_solve(numbers)
    for m in single_token_mutations(witness):
        if exact_value(m) != 24:
            assert game24_check(numbers, m) == 0, m


GOLD = ["ABCDE", "FGHIJ", "KLMNO", "PQRST", "UVWXY"]


def test_crossword_accuracy():
    assert crossword_accuracy(GOLD, GOLD) == 1.0
    assert crossword_accuracy([r.lower() for r in GOLD], GOLD) == 1.0
    assert crossword_accuracy(["_____"] * 5, GOLD) == 0.0
    cells = list("".join(GOLD))
    for i in range(13, 25):
        cells[i] = "Z"
    assert crossword_accuracy("".join(cells), GOLD) == pytest.approx(0.52)
    with pytest.raises(ValueError):
        crossword_accuracy(["ABC"], GOLD)


def test_blank_cells_never_match():
    gold = ["_" * 5] * 5
    assert crossword_accuracy(gold, gold) == 0.0


def test_extract_grid():
    assert extract_grid("thinking...\nANSWER{ABCDE FGHIJ KLMNO PQRST UVWXY}") == GOLD
    assert extract_grid("\n".join(["noise"] + GOLD)) == [r for r in GOLD]
    assert extract_grid("nothing here") is None


@pytest.mark.parametrize("text,gold,expected", [
    ("The answer is B.", "B", 1),
    ("A) because it is", "C", 0),
    ("no letter here", "A", 0),
    ("(D) is right", "D", 1),
])
def test_mcq(text, gold, expected):
    assert mcq_score(text, gold) == expected


def test_extract_option_none():
    assert extract_option("lowercase only") is None


def test_score_answer_dispatch():
    g24 = TaskSample("g", "4 9 10 13", [4, 9, 10, 13])
    assert score_answer(GAME24, "so ANSWER{(10-4)*(13-9)}", g24) == 1.0
    cw = TaskSample("c", "clues", GOLD)
    assert score_answer(CROSSWORD, "ANSWER{" + "".join(GOLD) + "}", cw) == 1.0
    assert score_answer(MCQ, "ANSWER{C}", TaskSample("m", "q", "C")) == 1.0


@pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (1000, (800, 100, 100)), (15, (12, 1, 2))])
def test_split_sizes(n, sizes):
    data = [TaskSample(str(i), f"q{i}") for i in range(n)]
    parts = split_samples(data, seed=3)
    assert tuple(map(len, parts)) == sizes
    again = split_samples(data, seed=3)
    assert [[s.id for s in p] for p in parts] == [[s.id for s in p] for p in again]
    assert sorted(s.id for p in parts for s in p) == sorted(s.id for s in data)


def test_jsonl_roundtrip_and_errors(tmp_path):
    data = [TaskSample(str(i), f"q{i}", [i]) for i in range(20)]
    path = tmp_path / "d.jsonl"
    write_jsonl(path, data)
    assert read_jsonl(path) == data
    assert tuple(map(len, load_split(path))) == (16, 2, 2)
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a", "query": "x"}\n{"id": "b"\n')
    with pytest.raises(DatasetError, match=":2:"):
        read_jsonl(bad)


def test_synthetic_contract():
    samples, matrix = synthetic_affinity_task(1000, 4, seed=0)
    means = matrix.values.mean(axis=0)
    oracle = matrix.values.max(axis=1).mean()
    assert means.max() - means.min() < 0.05
    assert oracle > means.max() + 0.05
    best = Counter(int(np.argmax(row)) for row in matrix.values)
    assert all(abs(best[k] / 1000 - 0.25) < 0.05 for k in range(4))
    words, _ = bucket_words(4)
    for s in samples:
        assert words[s.target["bucket"]] in s.query.split()
        assert int(np.argmax(s.target["scores"])) == s.target["bucket"]
    again, m2 = synthetic_affinity_task(1000, 4, seed=0)
    assert again == samples and np.array_equal(m2.values, matrix.values)


def test_metrics_in_unit_interval():
    _, matrix = synthetic_affinity_task(200, 3, seed=1)
    assert matrix.values.min() >= 0.0 and matrix.values.max() <= 1.0


def test_synthetic_splits_are_balanced():
    from graphroute.tasks import synthetic_splits

    train, dev, test, matrix = synthetic_splits(1000, 4, seed=2)
    assert (len(train), len(dev), len(test)) == (800, 100, 100)
    for part in (train, dev, test):
        counts = Counter(s.target["bucket"] for s in part)
        assert max(counts.values()) - min(counts.values()) <= 1
    ids = [s.id for s in train + dev + test]
    assert len(set(ids)) == 1000 and list(matrix.sample_ids) == ids


def test_affinity_runner_offsets():
    from graphroute.graph import sample_structure, reference_params
    from graphroute.runners import AffinityRunner

    samples, matrix = synthetic_affinity_task(20, 4, seed=0)
    runner = AffinityRunner(matrix, quality_spread=0.05)
    for seed in range(20):
        g = sample_structure(reference_params(), seed)
        assert abs(runner.offset(g)) <= 0.05
        out = runner(g, samples[0])
        expected = matrix.values[0, runner.column(g)] + runner.offset(g)
        assert out.score == pytest.approx(min(1.0, max(0.0, expected)))
    flat = AffinityRunner(matrix, quality_spread=0.0)
    assert flat(g, samples[0]).score == matrix.values[0, flat.column(g)]
