import numpy as np
import pytest

from lmclab.errors import ContractError
from lmclab.modules import make_conv_cell
from lmclab.network import LmcNetwork
from lmclab.optim import Adam
from lmclab.taskgen import TaskSpec, TaskStream, gen_task
from lmclab.tensor import Tensor, cross_entropy
from lmclab.training import (
    PhaseState,
    TrainConfig,
    assemble_loss,
    evaluate,
    run_stream,
    train_task,
)


def quick_cfg(**kw):
    kw.setdefault("epochs", 8)
    kw.setdefault("projection_epochs", min(3, kw["epochs"] - 1))
    kw.setdefault("batch_size", 32)
    return TrainConfig(**kw)


def quick_net(seed=0, **kw):
    kw.setdefault("width", 8)
    kw.setdefault("stats_cfg", {"warmup": 4})
    return LmcNetwork(seed=seed, **kw)


def quick_task(seed=0, classes=2, n=96, family=0, fg="red", bg="black"):
    return gen_task(TaskSpec(seed=seed, classes=classes, n_train=n, n_val=32,
                             n_test=64, shape_family=family, fg=fg, bg=bg))


# --- phase state -----------------------------------------------------------------

def test_phase_state_window():
    ph = PhaseState()
    assert not ph.in_projection(0, 5)
    ph.note_addition(2)
    assert ph.in_projection(2, 5)
    assert ph.in_projection(6, 5)
    assert not ph.in_projection(7, 5)


def test_phase_state_k_zero_never_projects():
    ph = PhaseState()
    ph.note_addition(0)
    assert not ph.in_projection(0, 0)


def test_config_rejects_k_not_smaller_than_epochs():
    with pytest.raises(ContractError):
        TrainConfig(epochs=5, projection_epochs=5).validate()


# --- loss assembly -----------------------------------------------------------------

def make_trace_and_logits(net, task):
    x = Tensor(task.x_train[:16])
    logits, trace = net.forward(x, task_id=0)
    return logits, trace, task.y_train[:16]


def test_projection_loss_is_structural_only_when_configured():
    net = quick_net()
    net.add_head(0, 2)
    task = quick_task()
    logits, trace, y = make_trace_and_logits(net, task)
    loss = assemble_loss(trace, logits, y, in_projection=True, functional_in_projection=False)
    assert abs(loss.item() - trace.structural_loss.item() / 16) < 1e-12


def test_accumulation_loss_adds_cross_entropy():
    net = quick_net()
    net.add_head(0, 2)
    task = quick_task()
    logits, trace, y = make_trace_and_logits(net, task)
    loss = assemble_loss(trace, logits, y, in_projection=False, functional_in_projection=True)
    want = cross_entropy(logits, y).item() + trace.structural_loss.item() / 16
    assert abs(loss.item() - want) < 1e-12


def test_structural_loss_matches_trace_recompute_during_training():
    net = quick_net()
    net.add_head(0, 2)
    task = quick_task()
    _, trace, _ = make_trace_and_logits(net, task)
    assert abs(trace.structural_loss.item() - trace.recompute_structural_loss()) < 1e-10


def test_structural_term_reaches_no_head_linear_weight():
    net = quick_net()
    net.add_head(0, 2)
    task = quick_task()
    logits, trace, y = make_trace_and_logits(net, task)
    trace.structural_loss.backward()
    head = net.heads[0]
    assert head.functional.weight.grad is None  # logits are not on the structural path
    assert head.structural.s1_weight.grad is not None


def test_task_loss_reaches_no_structural_parameter():
    # routing weights are constants in the backward pass, so the task loss
    # cannot leak into any structural scorer
    net = quick_net()
    net.add_head(0, 2)
    task = quick_task()
    logits, trace, y = make_trace_and_logits(net, task)
    cross_entropy(logits, y).backward()
    for layer in net.layers:
        for cell in layer.cells:
            for name, p in cell.named_params():
                if name.startswith("structural."):
                    assert p.grad is None, name
            assert cell.functional.weight.grad is not None
    assert net.heads[0].structural.s1_weight.grad is None
    assert net.heads[0].functional.weight.grad is not None


# --- train_task ----------------------------------------------------------------------

def test_separable_task_reaches_high_train_accuracy():
    net = quick_net(seed=1, width=12)
    task = quick_task(seed=5, n=128)
    report = train_task(net, task, 0, quick_cfg(epochs=15), np.random.default_rng(0))
    assert report.train_accuracy >= 0.95


def test_k_zero_disables_projection_and_keeps_functional_loss():
    net = quick_net(seed=2, width=12)
    task = quick_task(seed=6)
    cfg = quick_cfg(epochs=12, projection_epochs=0)
    report = train_task(net, task, 0, cfg, np.random.default_rng(0))
    assert report.train_accuracy > 0.6  # functional loss was active throughout


def test_earlier_parameters_bit_identical_after_later_task():
    net = quick_net(seed=3)
    rng = np.random.default_rng(1)
    cfg = quick_cfg(epochs=5)
    train_task(net, quick_task(seed=7), 0, cfg, rng)
    snap = {}
    for l, layer in enumerate(net.layers):
        for m, cell in enumerate(layer.cells):
            for n, p in cell.named_params():
                snap[(l, m, n)] = p.data.copy()
    head_snap = {n: p.data.copy() for n, p in net.heads[0].named_params()}
    bn_snap = {(l, m, n): b.copy() for l, layer in enumerate(net.layers)
               for m, cell in enumerate(layer.cells) for n, b in cell.named_buffers()}
    train_task(net, quick_task(seed=8, family=4, fg="blue"), 1, cfg, rng)
    for (l, m, n), want in snap.items():
        got = dict(net.layers[l].cells[m].named_params())[n].data
        np.testing.assert_array_equal(want, got)
    for n, want in head_snap.items():
        np.testing.assert_array_equal(want, dict(net.heads[0].named_params())[n].data)
    for (l, m, n), want in bn_snap.items():
        np.testing.assert_array_equal(want, dict(net.layers[l].cells[m].named_buffers())[n])


def test_structural_frozen_for_all_cells_after_task():
    net = quick_net(seed=4)
    train_task(net, quick_task(seed=9), 0, quick_cfg(epochs=3), np.random.default_rng(0))
    assert all(c.frozen_structural for c in net.all_cells())


def test_no_expansion_events_during_projection():
    net = quick_net(seed=5)
    rng = np.random.default_rng(2)
    cfg = quick_cfg(epochs=10, projection_epochs=6)
    events = []
    train_task(net, quick_task(seed=10), 0, cfg, rng, events=events)
    train_task(net, quick_task(seed=11, family=4, fg="green"), 1, cfg, rng, events=events)
    expansions = [e for e in events if e["kind"] == "expansion"]
    if len(expansions) >= 2:
        # any two additions in one task must be separated by the projection window
        by_task = {}
        for e in expansions:
            by_task.setdefault(e["task"], []).append(e["epoch"])
        for epochs in by_task.values():
            for a, b in zip(epochs, epochs[1:]):
                assert b - a >= cfg.projection_epochs


def test_training_loss_decreases():
    net = quick_net(seed=6, width=12)
    cfg = quick_cfg(epochs=20)
    report = train_task(net, quick_task(seed=12, n=128), 0, cfg, np.random.default_rng(3))
    k = max(2, len(report.epoch_losses) // 10)
    first = np.median(report.epoch_losses[:k])
    last = np.median(report.epoch_losses[-k:])
    assert last < first


def test_empty_dataset_rejected():
    net = quick_net()
    task = quick_task()
    task.x_train = task.x_train[:0]
    task.y_train = task.y_train[:0]
    with pytest.raises(ContractError, match="empty"):
        train_task(net, task, 0, quick_cfg(), np.random.default_rng(0))


# --- projection signal --------------------------------------------------------------

def test_compatible_new_module_gets_weaker_structural_push():
    # lower cell A feeds frozen upper cell B whose scorer fits A's output
    # distribution; a copy of A then receives a weaker structural gradient
    # from B than a randomly initialized module does
    rng = np.random.default_rng(0)
    lower = make_conv_cell(3, 8, 0, np.random.default_rng(1))
    upper = make_conv_cell(8, 8, 0, np.random.default_rng(2))
    opt = Adam(lr=2e-3)
    base = np.zeros((16, 3, 16, 16))
    base[:, 0] = 0.8
    for _ in range(80):
        x = Tensor(np.clip(base + 0.05 * rng.standard_normal(base.shape), 0, 1))
        s_lo, f_lo = lower.relatedness(x, training=True)
        s_up, _ = upper.relatedness(f_lo, training=True)
        ((-s_lo).sum() + (-s_up).sum()).backward()
        params = lower.trainable_params() + upper.trainable_params()
        opt.step(params)
        opt.zero_grad(params)
    upper.freeze("both")
    lower.freeze("both")

    def upstream_grad_norm(cell):
        x = Tensor(np.clip(base + 0.05 * np.random.default_rng(9).standard_normal(base.shape), 0, 1))
        out = cell.functional.forward(x, training=True)
        score, _ = upper.relatedness(out, training=False)
        (-score).sum().backward()
        total = 0.0
        for _, p in cell.functional.named_params():
            if p.grad is not None:
                total += float((p.grad**2).sum())
        return np.sqrt(total)

    compatible = make_conv_cell(3, 8, 1, np.random.default_rng(3))
    for (_, p), (_, q) in zip(compatible.named_params(), lower.named_params()):
        p.data[...] = q.data
    for n, b in compatible.named_buffers():
        b[...] = dict(lower.named_buffers())[n]
    random_cell = make_conv_cell(3, 8, 1, np.random.default_rng(4))
    assert upstream_grad_norm(compatible) < upstream_grad_norm(random_cell)


# --- evaluate ------------------------------------------------------------------------

def test_memorized_task_full_accuracy():
    net = quick_net(seed=7, width=12)
    task = quick_task(seed=13, n=10)
    cfg = quick_cfg(epochs=100, batch_size=10)
    train_task(net, task, 0, cfg, np.random.default_rng(0))
    assert evaluate(net, task.x_train, task.y_train, task_id=0) == 1.0


def test_random_predictor_near_chance():
    net = quick_net(seed=8)
    net.add_head(0, 5)
    rng = np.random.default_rng(0)
    x = rng.random((500, 3, 16, 16))
    y = rng.integers(0, 5, 500)
    acc = evaluate(net, x, y, task_id=0)
    assert abs(acc - 0.2) <= 0.1


def test_aware_and_agnostic_agree_with_single_head():
    net = quick_net(seed=9)
    task = quick_task(seed=14)
    train_task(net, task, 0, quick_cfg(epochs=3), np.random.default_rng(0))
    aware = evaluate(net, task.x_test, task.y_test, task_id=0)
    agnostic = evaluate(net, task.x_test, task.y_test, task_id=None)
    assert aware == agnostic


# --- run_stream -----------------------------------------------------------------------

def test_single_task_stream_record_shape():
    stream = TaskStream("custom", 0, [TaskSpec(seed=1, classes=2, n_train=48,
                                               n_val=16, n_test=32)])
    net = quick_net(seed=10)
    record = run_stream(net, stream, quick_cfg(epochs=3))
    assert record.acc_aware.shape == (1, 1)
    assert not np.isnan(record.acc_aware[0, 0])
    assert record.module_counts == [4]


def test_repeated_identical_distribution_no_expansion():
    specs = [TaskSpec(name="a", seed=21, classes=2, n_train=96, n_val=24, n_test=32),
             TaskSpec(name="b", seed=22, classes=2, n_train=96, n_val=24, n_test=32)]
    stream = TaskStream("custom", 0, specs)
    net = quick_net(seed=11)
    record = run_stream(net, stream, quick_cfg(epochs=8))
    assert sum(1 for e in record.events if e["kind"] == "expansion") == 0
    assert record.module_counts == [4, 4]


def test_six_task_stream_respects_expansion_bound():
    specs = [TaskSpec(name=f"t{i}", seed=30 + i, classes=2, n_train=64, n_val=16,
                      n_test=32, shape_family=2 * (i % 5),
                      fg=["red", "green", "blue", "yellow", "magenta", "red"][i],
                      bg="black")
             for i in range(6)]
    stream = TaskStream("custom", 0, specs)
    net = quick_net(seed=12)
    record = run_stream(net, stream, quick_cfg(epochs=6, projection_epochs=2))
    assert record.module_counts[-1] <= 4 * 7
    assert all(b >= a for a, b in zip(record.module_counts, record.module_counts[1:]))
