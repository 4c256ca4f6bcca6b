import json
import statistics

import numpy as np
import pytest

from graphroute import cli, pipeline
from graphroute.fixtures import PILOT_CELLS, pilot_candidates, pilot_matrix, pilot_samples
from graphroute.optim import CandidateSet
from graphroute.pipeline import RunConfig, evaluate, parse_mode
from graphroute.runners import MatrixRunner

# per-row sums of the pilot score table worked out by hand: A 3.1, B 2.4, C 2.6, D 2.6
HAND_MEANS = [3.1 / 15, 2.4 / 15, 2.6 / 15, 2.6 / 15]
HAND_ORACLE = 4.5 / 15
GRAND_MEAN = 10.7 / 60

TINY = """
[task]
name = "synthetic"
num_samples = 120

[optim]
epochs = 1
checkpoint_every = 5

[designer]
eval_every = 5
max_epochs = 3

[run]
K = 3
seeds = [0, 1, 2]
output_dir = "{out}"
"""


def pilot_setup():
    graphs = pilot_candidates()
    return CandidateSet(graphs, [0.0] * 4, [0] * 4), pilot_samples(), MatrixRunner(pilot_matrix(), graphs)


def test_pilot_fixed_and_oracle_means():
    results = pipeline.pilot_modes()
    for i, expected in enumerate(HAND_MEANS):
        assert results[f"fixed-{i + 1}"].mean == pytest.approx(expected, abs=1e-9)
    assert results["oracle"].mean == pytest.approx(HAND_ORACLE, abs=1e-9)
    assert all(results["oracle"].mean >= results[f"fixed-{i}"].mean for i in range(1, 5))


def test_pilot_random_mode_tends_to_grand_mean():
    cands, samples, runner = pilot_setup()
    means = [evaluate("random", cands, samples, runner, seed=s).mean for s in range(400)]
    assert np.mean(means) == pytest.approx(GRAND_MEAN, abs=0.005)
    assert PILOT_CELLS.mean() == pytest.approx(GRAND_MEAN, abs=1e-12)


def test_pilot_report_flags_rows_b_to_d():
    report = pipeline.pilot_table_report()
    assert report.matrix.shape == (4, 15)
    assert np.allclose(report.averages, report.matrix.sum(axis=1) / 15, atol=1e-12)
    assert report.discrepancies() == [False, True, True, True]
    text = report.format()
    assert text.count("mismatch") == 3 and "0.199" in text and "0.1600" in text
    obj = report.to_json()
    assert obj["avg_mismatch"] == [False, True, True, True]
    assert obj["oracle_mean"] == pytest.approx(0.3)


def test_pilot_report_needs_two_candidates():
    cands, samples, runner = pilot_setup()
    with pytest.raises(ValueError):
        pipeline.pilot_report(cands.graphs[:1], samples, runner)


@pytest.mark.parametrize("text,parsed", [
    ("fixed-2", ("fixed", 2)), ("fixed:3", ("fixed", 3)),
    ("adaptive", ("adaptive", None)), ("oracle", ("oracle", None)), ("RANDOM", ("random", None)),
])
def test_parse_mode(text, parsed):
    assert parse_mode(text) == parsed


def test_bad_modes():
    cands, samples, runner = pilot_setup()
    with pytest.raises(ValueError):
        parse_mode("best")
    with pytest.raises(ValueError):
        evaluate("fixed-9", cands, samples, runner)
    with pytest.raises(ValueError):
        evaluate("adaptive", cands, samples, runner)


class ConstantScorer:
    def __init__(self):
        self.calls = 0

    def score(self, rendered_query, graph_text):
        self.calls += 1
        return 0.5


def test_adaptive_latency_overhead_is_k_scorer_calls():
    cands, samples, runner = pilot_setup()
    res = evaluate("adaptive", cands, samples, runner, ConstantScorer(), pipeline.BUILTIN_TASKS["crossword"],
                   scorer_seconds=0.25)
    fixed = evaluate("fixed-1", cands, samples, runner)
    assert res.choices == [1] * 15
    assert res.scorer_calls == [4] * 15
    assert np.allclose(np.array(res.latencies) - np.array(fixed.latencies), 4 * 0.25)


def test_failures_score_zero():
    cands, samples, _ = pilot_setup()

    def broken(structure, sample):
        raise RuntimeError("no")

    assert evaluate("fixed-1", cands, samples, broken).scores == [0.0] * 15


def test_median_over_five_seeds():
    cfg = RunConfig(seeds=[0, 1, 2, 3, 4])
    per_seed = {}
    values = [0.4, 0.1, 0.5, 0.3, 0.2]
    for s, v in zip(cfg.seeds, values):
        per_seed[s] = {"fixed-1": pipeline.ModeResult("fixed-1", [v], [1.0])}
    report = pipeline.build_report(cfg, per_seed)
    assert report["modes"]["fixed-1"]["median"] == sorted(values)[2] == statistics.median(values)


def test_config_loading(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TINY.format(out=(tmp_path / "out").as_posix()))
    cfg = pipeline.load_config(path)
    assert cfg.K == 3 and cfg.seeds == [0, 1, 2] and cfg.optim.epochs == 1
    assert cfg.designer.eval_every == 5 and cfg.task.num_samples == 120
    bad = tmp_path / "bad.toml"
    bad.write_text("[run]\nK = 0\n")
    with pytest.raises(ValueError):
        pipeline.load_config(bad)


def test_cli_pilot_without_config(capsys):
    assert cli.run(["pilot"]) == 0
    out = capsys.readouterr().out
    assert "Graph D" in out and "oracle" in out
    assert cli.run(["pilot", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["avg_mismatch"] == [False, True, True, True]


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.run(["optimize"]) == 2
    missing = tmp_path / "nope.toml"
    assert cli.run(["run-full", "--config", str(missing)]) == 2
    path = tmp_path / "run.toml"
    path.write_text(TINY.format(out=(tmp_path / "out").as_posix()))
    assert cli.run(["harvest", "--config", str(path), "--seed", "0"]) == 11
    assert cli.run(["train-designer", "--config", str(path), "--seed", "0"]) == 13


def test_cli_stages_then_run_full(tmp_path, capsys):
    out = tmp_path / "out"
    path = tmp_path / "run.toml"
    path.write_text(TINY.format(out=out.as_posix()))
    for stage in ("optimize", "harvest", "build-data", "train-designer"):
        assert cli.run([stage, "--config", str(path), "--seed", "1"]) == 0, stage
    assert cli.run(["evaluate", "--config", str(path), "--seed", "1", "--mode", "adaptive", "--mode", "oracle"]) == 0
    evals = json.loads((out / "seed_1" / "eval.json").read_text())
    assert set(evals) == {"adaptive", "oracle"}
    assert np.mean(evals["oracle"]["scores"]) >= np.mean(evals["adaptive"]["scores"])
    assert cli.run(["pilot", "--config", str(path), "--seed", "1"]) == 0

    assert cli.run(["run-full", "--config", str(path), "--k", "2"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["K"] == 2 and report["seeds"] == [0, 1, 2]
    modes = report["modes"]
    assert set(modes) == {"fixed-1", "fixed-2", "adaptive", "oracle", "random"}
    for m in ("fixed-1", "fixed-2", "adaptive"):
        for o, v in zip(modes["oracle"]["per_seed"], modes[m]["per_seed"]):
            assert o >= v - 1e-12
    assert (out / "report.txt").read_text().startswith("task: synthetic")


def test_real_task_needs_dataset(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(f'[task]\nname = "crossword"\n[run]\noutput_dir = "{tmp_path.as_posix()}"\n')
    assert cli.run(["optimize", "--config", str(path)]) == 2


def test_crossword_pipeline_with_mock_backend(tmp_path):
    """Real executor path end to end on a handful of samples."""
    from graphroute.tasks import TaskSample, write_jsonl

    gold = ["ABCDE", "FGHIJ", "KLMNO", "PQRST", "UVWXY"]
    data = [TaskSample(f"c{i}", f"clues {i} ANSWER{{{''.join(gold)}}}", gold) for i in range(10)]
    write_jsonl(tmp_path / "cw.jsonl", data)
    path = tmp_path / "run.toml"
    path.write_text(
        '[task]\nname = "crossword"\ndataset = "cw.jsonl"\n'
        "[optim]\nepochs = 1\nbatch_size = 4\ncheckpoint_every = 1\n"
        "[designer]\neval_every = 2\nmax_epochs = 1\n"
        f'[run]\nK = 2\nseeds = [0]\noutput_dir = "{(tmp_path / "out").as_posix()}"\n'
    )
    assert cli.run(["run-full", "--config", str(path)]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["metric"] == "char-accuracy"
    assert report["modes"]["oracle"]["median"] == pytest.approx(1.0)
