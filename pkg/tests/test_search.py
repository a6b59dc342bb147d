import json

import numpy as np
import pytest

from dfakd import tensor as T
from dfakd.data import load_dataset
from dfakd.losses import AggregationWeights, LossWeights
from dfakd.networks import GroupSpec, build_network
from dfakd.search import (
    SearchDivergedError,
    SearchSchedule,
    TrainSchedule,
    baseline_weights,
    init_arch,
    load_weights,
    new_search_state,
    run_distill,
    run_search,
    save_weights,
    search_group,
    stage_time_probe,
    train_plain,
)

TEACHER = [GroupSpec(2, 8, 8), GroupSpec(2, 16, 4)]
STUDENT = [GroupSpec(1, 4, 8), GroupSpec(1, 8, 4)]
SCHED = SearchSchedule(epochs_per_group=1, batch_size=16, arch_lr=0.05, crop_pad=1, iters_per_epoch=3)
DIST = TrainSchedule(epochs=2, batch_size=16, milestones=(1,), crop_pad=1)


@pytest.fixture(scope="module")
def splits():
    desc = {"kind": "synthetic", "classes": 5, "image_size": 8, "samples_per_class": 16, "test_per_class": 4, "seed": 3}
    return load_dataset(desc, 0.7, seed=0)


@pytest.fixture
def pair():
    teacher = build_network(TEACHER, 5, seed=0)
    teacher.set_requires_grad(False)
    return teacher, build_network(STUDENT, 5, seed=1)


# ---------------------------------------------------------------- weights


def test_init_arch_examples():
    a = init_arch([3, 1, 4]).alphas()
    np.testing.assert_allclose(a[0], [0.001, 0.001, 0.998], atol=5e-4)
    np.testing.assert_array_equal(a[1], [1.0])
    assert a[2][-1] >= 0.99
    np.testing.assert_allclose(init_arch([4], last_bias=0).alphas()[0], 0.25)


def test_baseline_weights():
    np.testing.assert_array_equal(baseline_weights("average", [4]).alphas()[0], [0.25] * 4)
    np.testing.assert_array_equal(baseline_weights("last", [3]).alphas()[0], [0, 0, 1])
    r1, r2 = baseline_weights("random", [3, 5], seed=4), baseline_weights("random", [3, 5], seed=4)
    for a, b in zip(r1.alphas(), r2.alphas()):
        np.testing.assert_array_equal(a, b)
        assert abs(a.sum() - 1) <= 1e-12 and np.all(a >= 0)
    assert not np.array_equal(baseline_weights("random", [3], seed=5).alphas()[0], r1.alphas()[0])
    with pytest.raises(ValueError):
        baseline_weights("best", [3])


def test_weights_file_round_trip(tmp_path):
    w = AggregationWeights(betas=[np.array([0.1, -2.5, 1 / 3]), np.array([7.0])])
    save_weights(tmp_path / "a.weights", w, seed=9, config_hash="abc")
    back, doc = load_weights(tmp_path / "a.weights")
    assert doc["seed"] == 9 and doc["config_hash"] == "abc" and doc["group_sizes"] == [3, 1]
    for a, b in zip(w.betas, back.betas):
        assert a.data.tobytes() == b.data.tobytes()
    fixed = baseline_weights("random", [3, 2], seed=1)
    save_weights(tmp_path / "f.weights", fixed, seed=1)
    back, doc = load_weights(tmp_path / "f.weights")
    assert doc["beta"] is None
    for a, b in zip(fixed.alphas(), back.alphas()):
        assert a.tobytes() == b.tobytes()


def test_weights_file_schema_checked(tmp_path):
    path = tmp_path / "a.weights"
    save_weights(path, init_arch([2]), seed=0)
    doc = json.loads(path.read_text())
    doc["schema_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="schema"):
        load_weights(path)


# ---------------------------------------------------------------- search


def test_search_invariants(pair, splits):
    teacher, student = pair
    train, val, _ = splits
    snaps = []

    def on_step(kind, state):
        snaps.append((kind, state.groups_done,
                      T.parameters_checksum(state.student.parameters() + [b for _, b in state.student.named_buffers()]),
                      [b.data.tobytes() for b in state.arch.betas], [a.sum() for a in state.arch.alphas()]))

    arch, state = run_search(teacher, student, SCHED, train, val, LossWeights(), seed=0, on_step=on_step)
    assert len(snaps) == 2 * 3 * 2
    prev_w, prev_b = None, None
    for kind, cursor, w_sum, betas, sums in snaps:
        assert all(abs(s - 1) <= 1e-10 for s in sums)
        if prev_w is not None:
            if kind == "arch":
                assert w_sum == prev_w
            else:
                assert betas == prev_b
            for j, (b, pb) in enumerate(zip(betas, prev_b)):
                if j != cursor:
                    assert b == pb
        prev_w, prev_b = w_sum, betas
    assert state.groups_done == 2 and arch.group_sizes == [2, 2]
    assert all(not np.array_equal(a, init_arch([2, 2]).alphas()[i]) for i, a in enumerate(arch.alphas()))


def test_search_deterministic(splits):
    train, val, _ = splits
    out = []
    for _ in range(2):
        teacher, student = build_network(TEACHER, 5, seed=0), build_network(STUDENT, 5, seed=1)
        arch, state = run_search(teacher, student, SCHED, train, val, LossWeights(), seed=3)
        out.append(([b.data.tobytes() for b in arch.betas], T.parameters_checksum(student.parameters())))
    assert out[0] == out[1]


def test_group_cursor_enforced(pair, splits):
    teacher, student = pair
    train, val, _ = splits
    state = new_search_state(init_arch(teacher.group_sizes), student, SCHED)
    with pytest.raises(ValueError, match="cursor"):
        search_group(1, state, teacher, SCHED, train, val, LossWeights(), np.random.default_rng(0))


def test_empty_split_rejected(pair, splits):
    teacher, student = pair
    train, val, _ = splits
    state = new_search_state(init_arch(teacher.group_sizes), student, SCHED)
    with pytest.raises(ValueError, match="non-empty"):
        search_group(0, state, teacher, SCHED, train, val.subset(np.array([], dtype=int)), LossWeights(),
                     np.random.default_rng(0))


def test_divergence_reports_betas(pair, splits):
    teacher, student = pair
    train, val, _ = splits
    teacher.stem.weight.data[:] = 1e308
    with np.errstate(all="ignore"), pytest.raises(SearchDivergedError, match="betas="):
        run_search(teacher, student, SCHED, train, val, LossWeights(), seed=0)


def test_singleton_groups_trivial(splits):
    train, val, _ = splits
    teacher = build_network([GroupSpec(1, 8, 8), GroupSpec(1, 16, 4)], 5, seed=0)
    arch, _ = run_search(teacher, build_network(STUDENT, 5, seed=1), SCHED, train, val, LossWeights(), seed=0)
    assert [a.tolist() for a in arch.alphas()] == [[1.0], [1.0]]


def test_warm_start_continuity(pair, splits):
    teacher, student = pair
    train, val, _ = splits
    marks = {}

    def on_epoch(group, epoch, alphas, parts):
        key = "start" if epoch == 0 else "end"
        marks[(group, key)] = T.parameters_checksum(student.parameters())

    run_search(teacher, student, SCHED, train, val, LossWeights(), seed=0, on_epoch=on_epoch)
    assert marks[(0, "end")] == marks[(1, "start")]


def test_schedule_validation():
    with pytest.raises(ValueError):
        SearchSchedule(epochs_per_group=0)
    with pytest.raises(ValueError):
        TrainSchedule(epochs=0)


def test_cifar100_distill_schedule_preset():
    s = TrainSchedule()
    assert (s.epochs, s.batch_size, s.lr, s.milestones, s.lr_decay) == (200, 128, 0.1, (60, 120, 160), 0.2)
    assert s.lr_at(159) == pytest.approx(0.004) and s.lr_at(160) == pytest.approx(0.0008)


# ---------------------------------------------------------------- distillation


def test_one_hot_distill_equals_last_bit_identically(pair, splits):
    teacher, _ = pair
    train, _, test = splits
    runs = []
    for mode in ("aggregated", "last"):
        student = build_network(STUDENT, 5, seed=2)
        res = run_distill(teacher, student, baseline_weights("last", [2, 2]), DIST, train, test,
                          LossWeights(gamma_fd=1e-2), seed=1, mode=mode)
        runs.append((T.parameters_checksum(student.parameters()),
                     [(r["l_ce"], r["l_fd"], r["test_acc"]) for r in res.history]))
    assert runs[0] == runs[1]


def test_gamma_fd_zero_is_plain_training(pair, splits):
    teacher, _ = pair
    train, _, test = splits
    a, b = build_network(STUDENT, 5, seed=2), build_network(STUDENT, 5, seed=2)
    run_distill(teacher, a, baseline_weights("average", [2, 2]), DIST, train, test, LossWeights(gamma_fd=0.0), seed=1)
    train_plain(b, DIST, train, test, seed=1)
    assert T.parameters_checksum(a.parameters()) == T.parameters_checksum(b.parameters())


def test_distill_history_fields(pair, splits):
    teacher, student = pair
    train, _, test = splits
    res = run_distill(teacher, student, baseline_weights("average", [2, 2]), DIST, train, test, LossWeights(gamma_fd=1e-2))
    assert [r["epoch"] for r in res.history] == [1, 2]
    assert 0 <= res.final_accuracy <= 1 and res.history[0]["l_fd"] > 0
    assert res.history[1]["lr"] == pytest.approx(DIST.lr * DIST.lr_decay)


def test_distill_rejects_mismatched_weights(pair, splits):
    teacher, student = pair
    train, _, test = splits
    with pytest.raises(ValueError, match="groups"):
        run_distill(teacher, student, baseline_weights("last", [3, 2]), DIST, train, test, LossWeights())


def test_stage_time_probe_keys(pair, splits):
    teacher, student = pair
    train = splits[0]
    with T.precision("fp32"):
        teacher32, student32 = build_network(TEACHER, 5, seed=0), build_network(STUDENT, 5, seed=1)
        out = stage_time_probe(teacher32, student32, train.images[:8].astype(np.float32), train.labels[:8], iters=3)
    assert set(out) == {"t1", "t1_per_group", "t2", "t_last", "t_teacher", "t_student"}
    assert len(out["t1_per_group"]) == 2 and all(v > 0 for k, v in out.items() if k != "t1_per_group")
