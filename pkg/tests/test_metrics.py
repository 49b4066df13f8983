import numpy as np
import pytest

from lmclab.errors import ContractError
from lmclab.metrics import average_accuracy, forgetting, transfer

NAN = np.nan

# three fixed matrices with hand-computed metric values
FIXTURES = [
    # (matrix, A, F)
    (np.array([[0.9, NAN, NAN],
               [0.8, 0.7, NAN],
               [0.85, 0.65, 0.6]]),
     (0.85 + 0.65 + 0.6) / 3,          # 0.7
     ((0.85 - 0.9) + (0.65 - 0.7)) / 2),  # -0.05
    (np.array([[1.0, NAN, NAN],
               [1.0, 0.5, NAN],
               [1.0, 0.5, 0.25]]),
     1.75 / 3,
     0.0),
    (np.array([[0.5, NAN, NAN],
               [0.6, 0.7, NAN],
               [0.8, 0.9, 0.95]]),
     (0.8 + 0.9 + 0.95) / 3,
     ((0.8 - 0.5) + (0.9 - 0.7)) / 2),  # +0.25, positive backward transfer
]


@pytest.mark.parametrize("matrix,want_a,want_f", FIXTURES)
def test_fixture_matrices_match_hand_values(matrix, want_a, want_f):
    assert abs(average_accuracy(matrix) - want_a) < 1e-12
    assert abs(forgetting(matrix) - want_f) < 1e-12


def test_average_accuracy_simple_rows():
    m = np.array([[1.0, NAN], [1.0, 0.5]])
    assert average_accuracy(m) == 0.75


def test_single_task_average_is_its_accuracy():
    m = np.array([[0.61]])
    assert average_accuracy(m) == 0.61
    assert forgetting(m) is None


def test_forgetting_spec_examples():
    assert forgetting(np.array([[0.9, NAN], [0.9, 0.8]])) == 0.0
    assert abs(forgetting(np.array([[0.9, NAN], [0.7, 0.8]])) - (-0.2)) < 1e-12


def test_frozen_expert_matrix_zero_forgetting():
    m = np.array([[0.8, NAN, NAN],
                  [0.8, 0.7, NAN],
                  [0.8, 0.7, 0.9]])
    assert forgetting(m) == 0.0


def test_transfer_values():
    assert abs(transfer(0.70, 0.60) - 0.10) < 1e-15
    assert transfer(0.5, 0.5) == 0.0


def test_incomplete_final_row_rejected():
    m = np.array([[0.9, NAN], [NAN, 0.8]])
    with pytest.raises(ContractError):
        average_accuracy(m)


def test_permutation_covariance():
    # relabeling earlier tasks (the last one stays last: its final-row and
    # diagonal entries are the same cell) leaves both metrics unchanged
    rng = np.random.default_rng(0)
    n = 5
    m = np.full((n, n), NAN)
    for i in range(n):
        m[i, : i + 1] = rng.random(i + 1)
    perm = list(rng.permutation(n - 1)) + [n - 1]
    permuted = np.full((n, n), NAN)
    for new_j, old_j in enumerate(perm):
        permuted[n - 1, new_j] = m[n - 1, old_j]
        permuted[new_j, new_j] = m[old_j, old_j]
    assert abs(average_accuracy(permuted) - average_accuracy(m)) < 1e-12
    assert abs(forgetting(permuted) - forgetting(m)) < 1e-12


def test_uniform_final_row_scale():
    m = np.full((6, 6), NAN)
    for i in range(6):
        m[i, : i + 1] = 0.672
    assert abs(average_accuracy(m) - 0.672) < 1e-12
