import numpy as np

from lmclab.records import RunRecord


def make_record():
    record = RunRecord.empty(learner="lmc", stream_kind="s_minus", n_tasks=3, seed=7)
    for i in range(3):
        for j in range(i + 1):
            record.acc_aware[i, j] = 0.5 + 0.1 * i + 0.01 * j
            record.acc_agnostic[i, j] = 0.4 + 0.1 * i + 0.01 * j
    record.module_counts = [4, 5, 6]
    record.task_names = ["a", "b", "c"]
    record.events = [{"kind": "expansion", "layer": 0, "cells": 2, "task": 1, "epoch": 0},
                     {"kind": "freeze", "scope": "structural", "task": 1}]
    record.selection_maps_train = {0: np.array([[1.0], [1.0]])}
    record.selection_maps_final = {0: np.array([[0.6, 0.4], [1.0, 0.0]])}
    record.head_selection_final = {0: 1.0, 1: 0.75, 2: 0.5}
    record.config_echo = {"learner.kind": "lmc-agnostic", "train.epochs": "5"}
    record.wall_clock = 1.25
    return record


def test_save_load_round_trip(tmp_path):
    record = make_record()
    record.save(tmp_path / "run")
    back = RunRecord.load(tmp_path / "run")
    np.testing.assert_allclose(back.acc_aware[2], record.acc_aware[2], atol=1e-6)
    assert np.isnan(back.acc_aware[0, 1])
    assert back.module_counts == [4, 5, 6]
    assert back.events[0]["kind"] == "expansion"
    np.testing.assert_array_equal(back.selection_maps_final[0], record.selection_maps_final[0])
    assert back.head_selection_final[1] == 0.75
    assert back.config_echo["learner.kind"] == "lmc-agnostic"
    assert back.learner == "lmc" and back.seed == 7


def test_summary_contains_metrics(tmp_path):
    record = make_record()
    s = record.summary()
    assert abs(s["A_aware"] - np.mean(record.acc_aware[2])) < 1e-12
    assert s["M_final"] == 6
    assert s["expansions"] == 1
    record.save(tmp_path / "run")
    text = (tmp_path / "run" / "summary.txt").read_text()
    assert "A_aware" in text and "M_final" in text


def test_csv_files_have_headers(tmp_path):
    record = make_record()
    record.save(tmp_path / "run")
    aware = (tmp_path / "run" / "acc_matrix_aware.csv").read_text().splitlines()
    assert aware[0] == "after_task,a,b,c"
    counts = (tmp_path / "run" / "module_counts.csv").read_text().splitlines()
    assert counts[0] == "after_task,modules"
