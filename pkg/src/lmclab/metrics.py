"""Continual-learning metrics over lower-triangular accuracy matrices.

``matrix[i, j]`` is the test accuracy on task j after training through
task i (j <= i); entries above the diagonal are NaN.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ContractError


def _check_matrix(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ContractError(f"accuracy matrix must be square, got {matrix.shape}")
    return matrix


def average_accuracy(matrix: np.ndarray) -> float:
    """Mean accuracy over all tasks after the final task."""
    matrix = _check_matrix(matrix)
    final = matrix[-1]
    if np.isnan(final).any():
        raise ContractError("final row of the accuracy matrix is incomplete")
    return float(final.mean())


def forgetting(matrix: np.ndarray) -> Optional[float]:
    """Mean end-of-run accuracy change relative to accuracy right after each
    task was learned, over the first T-1 tasks; positive values mean the
    model improved on old tasks. Undefined for a single task."""
    matrix = _check_matrix(matrix)
    n = matrix.shape[0]
    if n < 2:
        return None
    deltas = [matrix[-1, t] - matrix[t, t] for t in range(n - 1)]
    return float(np.sum(deltas) / (n - 1))


def transfer(cl_last_task_acc: float, expert_last_task_acc: float) -> float:
    """Last-task accuracy of the continual learner minus an isolated expert's."""
    return float(cl_last_task_acc - expert_last_task_acc)


def module_counts(record) -> list:
    """Cumulative trunk module count after each task (heads excluded)."""
    return list(record.module_counts)


def summarize(acc_aware: np.ndarray, acc_agnostic: Optional[np.ndarray],
              module_count_seq: list) -> dict:
    out = {
        "A_aware": average_accuracy(acc_aware),
        "F_aware": forgetting(acc_aware),
        "M_final": module_count_seq[-1] if module_count_seq else None,
    }
    if acc_agnostic is not None and not np.isnan(acc_agnostic[-1]).any():
        out["A_agnostic"] = average_accuracy(acc_agnostic)
        out["F_agnostic"] = forgetting(acc_agnostic)
    return out
