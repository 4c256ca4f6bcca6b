"""REINFORCE over edge logits, checkpoints, and top-K candidate harvesting."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import (
    GraphParams,
    GraphStructure,
    deserialize,
    log_prob_grad,
    realize_map,
    sample_mask,
    serialize,
)
from .runners import Runner, safe_run
from .tasks import TaskSample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.1
    epochs: int = 5
    batch_size: int = 4
    samples_per_step: int = 2
    checkpoint_every: int = 10
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "samples_per_step", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class AdamW:
    """Adam with decoupled weight decay, minimizing."""

    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        x = x * (1 - lr * self.weight_decay)
        return x - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(params: GraphParams, cfg: OptimConfig) -> AdamW:
    return AdamW(params.d, cfg.learning_rate, cfg.betas, cfg.eps, cfg.weight_decay)


@dataclass
class StepStats:
    rewards: list[float] = field(default_factory=list)
    baseline: float = 0.0
    gradient: np.ndarray = field(default_factory=lambda: np.zeros(0))
    failed: bool = False
    structures: list[str] = field(default_factory=list)


def policy_gradient(params: GraphParams, masks: Sequence[np.ndarray], rewards: Sequence[float]):
    """sum_G (R_G - mean R) * grad log p(G); returns (gradient, baseline)."""
    if params.d == 0 or not masks:
        return np.zeros(params.d), float(np.mean(rewards)) if rewards else 0.0
    baseline = float(np.mean(rewards))
    grad = np.zeros(params.d)
    for mask, r in zip(masks, rewards):
        grad += (r - baseline) * log_prob_grad(params, mask)
    return grad, baseline


def reinforce_step(params: GraphParams, batch: Sequence[TaskSample], runner: Runner, cfg: OptimConfig,
                   rng, optimizer: AdamW | None = None) -> tuple[GraphParams, StepStats]:
    """Sample ``samples_per_step`` structures, reward each by its batch-mean
    score, and take one optimizer step up the policy gradient."""
    if not batch:
        raise ValueError("batch must be non-empty")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    stats = StepStats()
    if params.d == 0:
        return params, stats
    optimizer = optimizer or make_optimizer(params, cfg)
    masks = [sample_mask(params, rng) for _ in range(cfg.samples_per_step)]
    try:
        for mask in masks:
            g = params.structure_from_mask(mask)
            stats.structures.append(serialize(g))
            stats.rewards.append(float(np.mean([runner(g, s).score for s in batch])))
    except Exception as exc:  # noqa: BLE001 - the step is abandoned, theta kept
        log.error("reinforce step aborted: %s", exc)
        stats.failed = True
        return params, stats
    stats.gradient, stats.baseline = policy_gradient(params, masks, stats.rewards)
    theta = optimizer.step(np.array(params.theta), -stats.gradient)
    return params.with_theta(theta), stats


@dataclass
class Checkpoint:
    step: int
    theta: np.ndarray
    realized: GraphStructure
    dev_score: float | None = None

    def to_json(self) -> dict:
        obj = {"step": self.step, "theta": [float(x) for x in self.theta], "graph": serialize(self.realized)}
        if self.dev_score is not None:
            obj["dev_score"] = self.dev_score
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "Checkpoint":
        return cls(int(obj["step"]), np.array(obj["theta"], dtype=np.float64),
                   deserialize(obj["graph"]), obj.get("dev_score"))


def checkpoint_path(run_dir, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:05d}.json"


def write_checkpoint(run_dir, ckpt: Checkpoint) -> Path:
    path = checkpoint_path(run_dir, ckpt.step)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(ckpt.to_json()) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_checkpoints(run_dir) -> list[Checkpoint]:
    files = sorted((Path(run_dir) / "checkpoints").glob("step_*.json"))
    return [Checkpoint.from_json(json.loads(p.read_text(encoding="utf-8"))) for p in files]


def total_steps(n_train: int, cfg: OptimConfig) -> int:
    return cfg.epochs * math.ceil(n_train / cfg.batch_size)


def optimize(params0: GraphParams, train_set: Sequence[TaskSample], runner: Runner, cfg: OptimConfig,
             rng, run_dir=None) -> list[Checkpoint]:
    """Run ``epochs * ceil(n / batch_size)`` REINFORCE steps, checkpointing every
    ``checkpoint_every`` steps and at the last step."""
    if not train_set:
        raise ValueError("train_set must be non-empty")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = params0
    optimizer = make_optimizer(params, cfg)
    per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    last = cfg.epochs * per_epoch
    checkpoints = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        for b in range(per_epoch):
            batch = [train_set[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            params, stats = reinforce_step(params, batch, runner, cfg, rng, optimizer)
            step += 1
            log.debug("step %d rewards %s", step, stats.rewards)
            if step % cfg.checkpoint_every == 0 or step == last:
                ckpt = Checkpoint(step, np.array(params.theta), realize_map(params))
                if run_dir is not None:
                    write_checkpoint(run_dir, ckpt)
                checkpoints.append(ckpt)
    log.info("optimization finished: %d steps, %d checkpoints", step, len(checkpoints))
    return checkpoints


@dataclass
class CandidateSet:
    graphs: list[GraphStructure]
    dev_scores: list[float]
    steps: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def K(self) -> int:
        return len(self.graphs)

    def texts(self) -> list[str]:
        return [serialize(g) for g in self.graphs]

    def prefix(self, k: int) -> "CandidateSet":
        return CandidateSet(self.graphs[:k], self.dev_scores[:k], self.steps[:k])

    def to_json(self) -> dict:
        return {"candidates": [
            {"index": i + 1, "step": st, "dev_score": sc, "graph": serialize(g)}
            for i, (g, sc, st) in enumerate(zip(self.graphs, self.dev_scores, self.steps or [None] * len(self)))
        ]}

    @classmethod
    def from_json(cls, obj: dict) -> "CandidateSet":
        items = obj["candidates"]
        return cls([deserialize(c["graph"]) for c in items], [c["dev_score"] for c in items],
                   [c["step"] for c in items])


def harvest_candidates(checkpoints: Sequence[Checkpoint], dev_set: Sequence[TaskSample], runner: Runner,
                       K: int, run_dir=None) -> CandidateSet:
    """Score each distinct realized structure on the dev set and keep the top K
    (score descending, earlier checkpoint first on ties)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not dev_set:
        raise ValueError("dev_set must be non-empty")
    ordered = sorted(checkpoints, key=lambda c: c.step)
    scored: dict[str, tuple[float, int, GraphStructure]] = {}
    for ckpt in ordered:
        text = serialize(ckpt.realized)
        if text not in scored:
            score = float(np.mean([safe_run(runner, ckpt.realized, s).score for s in dev_set]))
            scored[text] = (score, ckpt.step, ckpt.realized)
        ckpt.dev_score = scored[text][0]
        if run_dir is not None:
            write_checkpoint(run_dir, ckpt)
    ranked = sorted(scored.values(), key=lambda t: (-t[0], t[1]))[:K]
    if len(ranked) < K:
        log.warning("only %d distinct structures available, fewer than K=%d", len(ranked), K)
    return CandidateSet([g for _, _, g in ranked], [s for s, _, _ in ranked], [st for _, st, _ in ranked])
