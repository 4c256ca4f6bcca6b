"""Pilot-study score table: four graphs (A-D) on fifteen Crossword samples."""
from __future__ import annotations

import numpy as np

from .graph import GraphStructure, reference_nodes
from .tasks import ScoreMatrix, TaskSample

PILOT_LABELS = ("Graph A", "Graph B", "Graph C", "Graph D")

# rows: graphs A-D, columns: samples 1-15
PILOT_CELLS = np.array([
    [0.2, 0.2, 0.1, 0.2, 0.3, 0.4, 0.1, 0.1, 0.2, 0.3, 0.2, 0.3, 0.1, 0.1, 0.3],
    [0.1, 0.1, 0.2, 0.2, 0.2, 0.2, 0.3, 0.1, 0.1, 0.0, 0.2, 0.1, 0.2, 0.2, 0.2],
    [0.1, 0.1, 0.1, 0.1, 0.1, 0.3, 0.0, 0.0, 0.2, 0.2, 0.3, 0.2, 0.5, 0.1, 0.3],
    [0.0, 0.1, 0.2, 0.0, 0.3, 0.1, 0.1, 0.3, 0.2, 0.2, 0.6, 0.2, 0.2, 0.0, 0.1],
])

# the "Avg" column as printed, which does not equal the row means for B-D
PILOT_PRINTED_AVG = (0.208, 0.199, 0.199, 0.192)


def pilot_samples() -> list[TaskSample]:
    return [TaskSample(f"pilot-{i + 1:02d}", f"Crossword pilot sample {i + 1}") for i in range(15)]


def pilot_matrix() -> ScoreMatrix:
    """Samples as rows, graphs as columns."""
    return ScoreMatrix(PILOT_CELLS.T.copy(), [s.id for s in pilot_samples()])


def pilot_candidates() -> list[GraphStructure]:
    """Four distinct stand-in structures for graphs A-D."""
    nodes = reference_nodes()
    edge_sets = ([(0, 11)], [(1, 11)], [(0, 11), (1, 11)], [(0, 1), (1, 11)])
    return [GraphStructure(nodes, tuple(e)) for e in edge_sets]
