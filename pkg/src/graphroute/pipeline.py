"""End-to-end runs: optimize, harvest, build designer data, train, evaluate."""
from __future__ import annotations

import json
import logging
import shutil
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .designer import (
    DesignerHyper,
    FeatureScorer,
    RemoteScorer,
    ScorerParams,
    TrainHistory,
    build_designer_dataset,
    read_records,
    select_graph,
    train_scorer,
    write_records,
)
from .executor import MockBackend
from .fixtures import (
    PILOT_LABELS,
    PILOT_PRINTED_AVG,
    pilot_candidates,
    pilot_matrix,
    pilot_samples,
)
from .graph import GraphStructure, reference_params
from .optim import (
    CandidateSet,
    OptimConfig,
    harvest_candidates,
    load_checkpoints,
    optimize,
)
from .runners import (
    AffinityRunner,
    ExecutionRunner,
    MatrixRunner,
    Runner,
    safe_run,
)
from .tasks import (
    BUILTIN_TASKS,
    ScoreMatrix,
    TaskSample,
    TaskSpec,
    load_split,
    synthetic_splits,
)

log = logging.getLogger(__name__)

STAGES = ("optimize", "harvest", "build-data", "train-designer", "evaluate")
EXIT_CODES = {"config": 2, "optimize": 10, "harvest": 11, "build-data": 12,
              "train-designer": 13, "evaluate": 14, "pilot": 15}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.exit_code = EXIT_CODES.get(stage, 1)


# --- Configuration -----------------------------------------------------------

@dataclass
class TaskConfig:
    name: str = "synthetic"
    dataset: str | None = None
    num_samples: int = 200  # synthetic only
    synthetic_k: int = 4
    split_seed: int = 0
    intro: str | None = None

    def spec(self) -> TaskSpec:
        if self.name not in BUILTIN_TASKS:
            raise ValueError(f"unknown task {self.name!r}; choose from {sorted(BUILTIN_TASKS)}")
        spec = BUILTIN_TASKS[self.name]
        return replace(spec, intro=self.intro) if self.intro else spec


@dataclass
class BackendSection:
    kind: str = "mock"  # mock | http
    base_url: str = ""
    model_name: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_retries: int = 3
    timeout: float = 30.0
    call_seconds: float = 1.0  # mock latency per call


@dataclass
class DesignerSection:
    lr: float = 1e-4
    warmup_frac: float = 0.06
    eval_every: int = 50
    patience: int = 10
    max_epochs: int = 10
    uniform_pair_weight: bool = False
    printed_m_formula: bool = False
    select_highest: bool = False
    scorer: str = "feature"  # feature | remote
    remote_url: str = ""
    scorer_seconds: float = 0.01  # charged per scorer call under logical timing

    def hyper(self, seed: int) -> DesignerHyper:
        return DesignerHyper(lr=self.lr, warmup_frac=self.warmup_frac, eval_every=self.eval_every,
                             patience=self.patience, max_epochs=self.max_epochs,
                             uniform_pair_weight=self.uniform_pair_weight,
                             printed_m_formula=self.printed_m_formula, seed=seed)


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    backend: BackendSection = field(default_factory=BackendSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    designer: DesignerSection = field(default_factory=DesignerSection)
    K: int = 4
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs/default"
    workers: int = 1
    max_calls: int = 1000

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def logical_time(self) -> bool:
        return self.backend.kind == "mock"

    def seed_dir(self, seed: int) -> Path:
        return Path(self.output_dir) / f"seed_{seed}"


def config_from_dict(obj: dict) -> RunConfig:
    run = dict(obj.get("run", {}))
    optim = dict(obj.get("optim", {}))
    if "betas" in optim:
        optim["betas"] = tuple(optim["betas"])
    return RunConfig(
        task=TaskConfig(**obj.get("task", {})),
        backend=BackendSection(**obj.get("backend", {})),
        optim=OptimConfig(**optim),
        designer=DesignerSection(**obj.get("designer", {})),
        **run,
    )


def load_config(path) -> RunConfig:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        cfg = config_from_dict(tomllib.load(fh))
    if cfg.task.dataset and not Path(cfg.task.dataset).is_absolute():
        cfg.task.dataset = str((Path(path).parent / cfg.task.dataset).resolve())
    return cfg


# --- Data, runners, scorers --------------------------------------------------

@dataclass
class Data:
    task: TaskSpec
    train: list[TaskSample]
    dev: list[TaskSample]
    test: list[TaskSample]
    matrix: ScoreMatrix | None = None


def prepare_data(cfg: RunConfig) -> Data:
    task = cfg.task.spec()
    if task.metric == "synthetic":
        train, dev, test, matrix = synthetic_splits(cfg.task.num_samples, cfg.task.synthetic_k, cfg.task.split_seed)
        return Data(task, train, dev, test, matrix)
    if not cfg.task.dataset:
        raise ValueError(f"task {cfg.task.name!r} needs a dataset path")
    train, dev, test = load_split(cfg.task.dataset, seed=cfg.task.split_seed)
    return Data(task, train, dev, test)


def make_backend(cfg: RunConfig):
    b = cfg.backend
    if b.kind == "mock":
        return MockBackend(call_seconds=b.call_seconds)
    if b.kind == "http":
        from .llm_client import BackendConfig, HttpBackend

        return HttpBackend(BackendConfig(b.base_url, b.model_name, b.api_key_env, b.temperature,
                                         b.max_retries, b.timeout))
    raise ValueError(f"unknown backend kind {b.kind!r}")


def make_runner(cfg: RunConfig, data: Data, seed: int) -> Runner:
    if data.matrix is not None:
        return AffinityRunner(data.matrix, call_seconds=cfg.backend.call_seconds)
    return ExecutionRunner(make_backend(cfg), data.task, seed=seed, max_calls=cfg.max_calls,
                           timeout=cfg.backend.timeout)


def make_scorer(cfg: RunConfig, seed_dir: Path):
    if cfg.designer.scorer == "remote":
        return RemoteScorer(cfg.designer.remote_url)
    obj = json.loads((seed_dir / "scorer.json").read_text(encoding="utf-8"))
    return FeatureScorer(ScorerParams.from_json(obj))


def _pmap(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# --- Evaluation --------------------------------------------------------------

@dataclass
class ModeResult:
    mode: str
    scores: list[float]
    latencies: list[float]
    choices: list[int] = field(default_factory=list)
    scorer_calls: list[int] = field(default_factory=list)
    selection_seconds: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if self.scores else 0.0

    @property
    def mean_latency(self) -> float:
        return float(np.mean(self.latencies)) if self.latencies else 0.0


def parse_mode(mode: str) -> tuple[str, int | None]:
    mode = mode.strip().lower()
    if mode in ("adaptive", "oracle", "random"):
        return mode, None
    for sep in (":", "-", "="):
        if mode.startswith("fixed" + sep):
            return "fixed", int(mode[6:])
    raise ValueError(f"unknown mode {mode!r}")


def evaluate(mode: str, candidates: CandidateSet, test_set: Sequence[TaskSample], runner: Runner,
             scorer=None, task: TaskSpec | None = None, seed: int = 0, select_highest: bool = False,
             scorer_seconds: float | None = None, workers: int = 1) -> ModeResult:
    """Score one evaluation mode on the test set.

    ``fixed-i`` runs candidate i everywhere, ``adaptive`` runs the scorer's
    pick per sample, ``oracle`` runs every candidate and keeps the best,
    ``random`` picks uniformly per sample.  Latency per sample includes the
    selection cost in adaptive mode; with ``scorer_seconds`` set each scorer
    call is charged that fixed amount instead of measured wall time.
    """
    kind, index = parse_mode(mode)
    graphs = candidates.graphs
    name = f"fixed-{index}" if kind == "fixed" else kind
    result = ModeResult(name, [], [])
    if kind == "fixed":
        if not 1 <= (index or 0) <= len(graphs):
            raise ValueError(f"fixed index {index} outside 1..{len(graphs)}")
        outs = _pmap(lambda s: safe_run(runner, graphs[index - 1], s), test_set, workers)
        result.scores = [o.score for o in outs]
        result.latencies = [o.seconds for o in outs]
        result.choices = [index] * len(test_set)
    elif kind == "oracle":
        for sample in test_set:
            outs = [safe_run(runner, g, sample) for g in graphs]
            best = max(range(len(outs)), key=lambda k: (outs[k].score, -k))
            result.scores.append(outs[best].score)
            result.latencies.append(sum(o.seconds for o in outs))
            result.choices.append(best + 1)
    elif kind == "random":
        rng = np.random.default_rng(seed)
        picks = [int(k) + 1 for k in rng.integers(0, len(graphs), size=len(test_set))]
        outs = _pmap(lambda ks: safe_run(runner, graphs[ks[0] - 1], ks[1]), list(zip(picks, test_set)), workers)
        result.scores = [o.score for o in outs]
        result.latencies = [o.seconds for o in outs]
        result.choices = picks
    else:
        if scorer is None or task is None:
            raise ValueError("adaptive mode needs a scorer and a task spec")
        for sample in test_set:
            before = scorer.calls
            t0 = time.perf_counter()
            k = select_graph(scorer, sample.query, candidates, task, select_highest)
            wall = time.perf_counter() - t0
            calls = scorer.calls - before
            sel = calls * scorer_seconds if scorer_seconds is not None else wall
            out = safe_run(runner, graphs[k - 1], sample)
            result.scores.append(out.score)
            result.latencies.append(out.seconds + sel)
            result.choices.append(k)
            result.scorer_calls.append(calls)
            result.selection_seconds.append(sel)
    return result


def evaluate_all(candidates, test_set, runner, scorer, task, seed=0, select_highest=False,
                 scorer_seconds=None, workers=1) -> dict[str, ModeResult]:
    modes = [f"fixed-{i + 1}" for i in range(len(candidates))] + ["oracle", "random"]
    if scorer is not None:
        modes.insert(len(candidates), "adaptive")
    return {m: evaluate(m, candidates, test_set, runner, scorer, task, seed, select_highest,
                        scorer_seconds, workers) for m in modes}


# --- Stages ------------------------------------------------------------------

def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                log.error("stage %s failed: %s", name, exc)
                raise StageError(name, exc) from exc
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


@_stage("optimize")
def stage_optimize(cfg: RunConfig, seed: int, data: Data | None = None):
    data = data or prepare_data(cfg)
    sd = cfg.seed_dir(seed)
    shutil.rmtree(sd / "checkpoints", ignore_errors=True)
    runner = make_runner(cfg, data, seed)
    return optimize(reference_params(), data.train, runner, cfg.optim, np.random.default_rng(seed), sd)


@_stage("harvest")
def stage_harvest(cfg: RunConfig, seed: int, data: Data | None = None) -> CandidateSet:
    data = data or prepare_data(cfg)
    sd = cfg.seed_dir(seed)
    ckpts = load_checkpoints(sd)
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {sd}; run optimize first")
    cands = harvest_candidates(ckpts, data.dev, make_runner(cfg, data, seed), cfg.K, sd)
    _dump(sd / "candidates.json", cands.to_json())
    return cands


def load_candidates(cfg: RunConfig, seed: int) -> CandidateSet:
    path = cfg.seed_dir(seed) / "candidates.json"
    return CandidateSet.from_json(json.loads(path.read_text(encoding="utf-8"))).prefix(cfg.K)


@_stage("build-data")
def stage_build_data(cfg: RunConfig, seed: int, data: Data | None = None):
    data = data or prepare_data(cfg)
    sd = cfg.seed_dir(seed)
    cands = load_candidates(cfg, seed)
    runner = make_runner(cfg, data, seed)
    train = build_designer_dataset(data.train, cands, runner, data.task)
    dev = build_designer_dataset(data.dev, cands, runner, data.task)
    write_records(sd / "designer_train.jsonl", train)
    write_records(sd / "designer_dev.jsonl", dev)
    return train, dev


@_stage("train-designer")
def stage_train(cfg: RunConfig, seed: int) -> ScorerParams:
    sd = cfg.seed_dir(seed)
    train = read_records(sd / "designer_train.jsonl")
    dev = read_records(sd / "designer_dev.jsonl")
    history = TrainHistory()
    params = train_scorer(train, cfg.designer.hyper(seed), dev or None, history=history)
    _dump(sd / "scorer.json", params.to_json())
    _dump(sd / "train_history.json", {"evals": history.evals, "best_step": history.best_step,
                                      "stopped_early": history.stopped_early, "steps": history.steps})
    return params


@_stage("evaluate")
def stage_evaluate(cfg: RunConfig, seed: int, data: Data | None = None,
                   modes: Sequence[str] | None = None) -> dict[str, ModeResult]:
    data = data or prepare_data(cfg)
    sd = cfg.seed_dir(seed)
    cands = load_candidates(cfg, seed)
    runner = make_runner(cfg, data, seed)
    need_scorer = modes is None or any(parse_mode(m)[0] == "adaptive" for m in modes)
    scorer = make_scorer(cfg, sd) if need_scorer and len(cands) else None
    sec = cfg.designer.scorer_seconds if cfg.logical_time else None
    if modes is None:
        results = evaluate_all(cands, data.test, runner, scorer, data.task, seed,
                               cfg.designer.select_highest, sec, cfg.workers)
    else:
        results = {}
        for m in modes:
            r = evaluate(m, cands, data.test, runner, scorer, data.task, seed,
                         cfg.designer.select_highest, sec, cfg.workers)
            results[r.mode] = r
    _dump(sd / "eval.json", {m: asdict(r) for m, r in results.items()})
    return results


def run_seed(cfg: RunConfig, seed: int, data: Data | None = None) -> dict[str, ModeResult]:
    data = data or prepare_data(cfg)
    stage_optimize(cfg, seed, data)
    stage_harvest(cfg, seed, data)
    stage_build_data(cfg, seed, data)
    stage_train(cfg, seed)
    return stage_evaluate(cfg, seed, data)


# --- Reports -----------------------------------------------------------------

def build_report(cfg: RunConfig, per_seed: dict[int, dict[str, ModeResult]]) -> dict:
    seeds = list(per_seed)
    modes: list[str] = []
    for res in per_seed.values():
        modes += [m for m in res if m not in modes]
    report = {
        "task": cfg.task.name,
        "metric": cfg.task.spec().metric,
        "K": cfg.K,
        "seeds": seeds,
        "timing": "logical" if cfg.logical_time else "wall",
        "modes": {},
        "selection_log": {},
    }
    for m in modes:
        vals = [per_seed[s][m].mean if m in per_seed[s] else None for s in seeds]
        present = [v for v in vals if v is not None]
        lat = [per_seed[s][m].mean_latency for s in seeds if m in per_seed[s]]
        report["modes"][m] = {
            "per_seed": vals,
            "median": statistics.median(present) if present else None,
            "mean": float(np.mean(present)) if present else None,
            "mean_latency_s": float(np.mean(lat)) if lat else None,
        }
    for s in seeds:
        report["selection_log"][f"seed_{s}"] = {
            m: per_seed[s][m].choices for m in ("adaptive", "random") if m in per_seed[s]
        }
    return report


def format_report(report: dict) -> str:
    seeds = report["seeds"]
    head = ["mode", "median"] + [f"seed {s}" for s in seeds] + ["latency_s"]
    rows = []
    for m, r in report["modes"].items():
        rows.append([m, _f(r["median"])] + [_f(v) for v in r["per_seed"]] + [_f(r["mean_latency_s"], 3)])
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    lines = [f"task: {report['task']}  metric: {report['metric']}  K: {report['K']}  timing: {report['timing']}",
             "  ".join(h.ljust(w) for h, w in zip(head, widths)).rstrip()]
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def _f(v, digits: int = 4) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def write_report(cfg: RunConfig, report: dict) -> None:
    out = Path(cfg.output_dir)
    _dump(out / "report.json", report)
    (out / "report.txt").write_text(format_report(report), encoding="utf-8")


def run_full(cfg: RunConfig) -> dict:
    """All stages for every seed, then the aggregated report (median over seeds)."""
    try:
        data = prepare_data(cfg)
    except Exception as exc:
        raise StageError("config", exc) from exc
    per_seed = {seed: run_seed(cfg, seed, data) for seed in cfg.seeds}
    report = build_report(cfg, per_seed)
    write_report(cfg, report)
    return report


# --- Pilot table -------------------------------------------------------------

@dataclass
class PilotReport:
    labels: list[str]
    matrix: np.ndarray  # [candidates, samples]
    printed_avg: Sequence[float] | None = None
    tolerance: float = 0.005

    @property
    def averages(self) -> np.ndarray:
        return self.matrix.mean(axis=1)

    def discrepancies(self) -> list[bool]:
        if self.printed_avg is None:
            return [False] * len(self.labels)
        return [bool(abs(a - p) > self.tolerance) for a, p in zip(self.averages, self.printed_avg)]

    def to_json(self) -> dict:
        obj = {"labels": self.labels, "matrix": self.matrix.tolist(), "averages": self.averages.tolist(),
               "oracle_mean": float(self.matrix.max(axis=0).mean())}
        if self.printed_avg is not None:
            obj["printed_avg"] = list(self.printed_avg)
            obj["avg_mismatch"] = self.discrepancies()
        return obj

    def format(self) -> str:
        n = self.matrix.shape[1]
        head = ["Graph"] + [str(i + 1) for i in range(n)] + ["Avg"]
        if self.printed_avg is not None:
            head.append("Printed")
        rows = []
        for k, label in enumerate(self.labels):
            row = [label] + [f"{v:.1f}" if abs(v * 10 - round(v * 10)) < 1e-9 else f"{v:.2f}"
                             for v in self.matrix[k]] + [f"{self.averages[k]:.4f}"]
            if self.printed_avg is not None:
                flag = "  <- mismatch" if self.discrepancies()[k] else ""
                row.append(f"{self.printed_avg[k]:.3f}{flag}")
            rows.append(row)
        widths = [max(len(x) for x in col) for col in zip(head, *rows)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths)).rstrip()]
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        lines.append(f"oracle (per-sample max) mean: {self.matrix.max(axis=0).mean():.4f}")
        return "\n".join(lines) + "\n"


def pilot_report(candidates: Sequence[GraphStructure], samples: Sequence[TaskSample], runner: Runner,
                 labels: Sequence[str] | None = None) -> PilotReport:
    if len(candidates) < 2:
        raise ValueError("the pilot table needs at least two candidates")
    matrix = np.array([[safe_run(runner, g, s).score for s in samples] for g in candidates])
    labels = list(labels or [f"Graph {chr(65 + k)}" if k < 26 else f"Graph {k + 1}" for k in range(len(candidates))])
    return PilotReport(labels, matrix)


def pilot_table_report() -> PilotReport:
    graphs = pilot_candidates()
    report = pilot_report(graphs, pilot_samples(), MatrixRunner(pilot_matrix(), graphs), PILOT_LABELS)
    report.printed_avg = PILOT_PRINTED_AVG
    return report


def pilot_modes(seed: int = 0) -> dict[str, ModeResult]:
    """Fixed, oracle and random modes over the pilot score table."""
    graphs = pilot_candidates()
    cands = CandidateSet(graphs, [0.0] * 4, [0] * 4)
    return evaluate_all(cands, pilot_samples(), MatrixRunner(pilot_matrix(), graphs), None, None, seed)
