import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfakd import tensor as T
from dfakd.losses import (
    AggregationWeights,
    LossWeights,
    aggregate,
    beta_regularizer,
    bridge_loss,
    cross_entropy,
    feature_distill_loss,
    l2_distance,
    st_loss,
    student_loss,
    ts_loss,
)
from dfakd.gradcheck import REL_TOL, check_gradients
from dfakd.networks import ST, TS, Connector, GroupSpec, build_network, make_connector
from dfakd.search import baseline_weights
from dfakd.tensor import NumericOverflowError, ShapeError, Tensor

TEACHER = [GroupSpec(3, 8, 8), GroupSpec(2, 16, 4)]
STUDENT = [GroupSpec(1, 4, 8), GroupSpec(1, 8, 4)]


@pytest.fixture
def pair():
    return build_network(TEACHER, 5, seed=0), build_network(STUDENT, 5, seed=1)


def _grad(p):
    return np.zeros_like(p.data) if p.grad is None else p.grad.copy()


def _batch(rng, n=4):
    return rng.standard_normal((n, 3, 8, 8)), rng.integers(0, 5, n)


# ---------------------------------------------------------------- cross-entropy


@pytest.mark.parametrize("classes", [2, 10, 100])
def test_cross_entropy_uniform_is_log_c(classes):
    loss = cross_entropy(Tensor(np.zeros((3, classes))), [0, 1, 1])
    assert abs(loss.item() - math.log(classes)) <= 1e-12


def test_cross_entropy_example():
    assert cross_entropy(Tensor([[1.0, 2.0, 3.0]]), [2]).item() == pytest.approx(0.40760596, abs=1e-8)


def test_cross_entropy_confident_limit():
    assert cross_entropy(Tensor([[0.0, 200.0]]), [1]).item() < 1e-80


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="labels"):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


# ---------------------------------------------------------------- aggregation


def test_aggregate_one_hot_last_exact(rng):
    taps = [Tensor(rng.standard_normal((2, 3, 4, 4))) for _ in range(3)]
    np.testing.assert_array_equal(aggregate(taps, np.array([0.0, 0.0, 1.0])).data, taps[-1].data)


def test_aggregate_identical_taps_fixed_point(rng):
    t = rng.standard_normal((2, 3))
    np.testing.assert_allclose(aggregate([Tensor(t), Tensor(t)], np.array([0.3, 0.7])).data, t, atol=1e-15)


def test_aggregate_example():
    out = aggregate([Tensor(np.ones((2, 2))), Tensor(2 * np.ones((2, 2)))], np.array([1 / 3, 2 / 3]))
    np.testing.assert_allclose(out.data, 5 / 3)


def test_aggregate_length_mismatch():
    with pytest.raises(ShapeError):
        aggregate([Tensor(np.ones(2))] * 2, np.array([1.0]))


def test_aggregation_weights_simplex_and_fixed_validation():
    w = AggregationWeights(betas=[np.array([0.0, 10.0, -3.0]), np.array([5.0])])
    for a in w.alphas():
        assert abs(a.sum() - 1) <= 1e-12 and np.all(a > 0)
    with pytest.raises(ValueError):
        AggregationWeights(fixed=[np.array([0.5, 0.6])])
    with pytest.raises(ValueError):
        AggregationWeights()


# ---------------------------------------------------------------- feature distillation


def test_l2_distance_example():
    assert l2_distance(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 2, 2)))).item() == 8.0


def test_fd_loss_example_single_group():
    t = [[Tensor(np.ones((1, 2, 2, 2)))]]
    s = [Tensor(np.zeros((1, 2, 2, 2)))]
    assert feature_distill_loss(t, s, [Connector.identity(ST, 0, 2)], mode="last").item() == 8.0


def test_fd_loss_identical_is_zero(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    loss = feature_distill_loss([[Tensor(x)]], [Tensor(x)], [Connector.identity(ST, 0, 3)], mode="last")
    assert loss.item() == 0.0


def test_fd_one_hot_last_bit_identical_to_last(pair, rng):
    teacher, student = pair
    x, _ = _batch(rng)
    _, t_taps = teacher.forward_with_taps(Tensor(x))
    conns = [make_connector(ST, teacher, student, i, seed=i) for i in range(2)]
    grads = {}
    values = {}
    for mode in ("aggregated", "last"):
        _, s_taps = student.forward_with_taps(Tensor(x), training=True, update_stats=False)
        loss = feature_distill_loss(t_taps, [g[-1] for g in s_taps], conns, baseline_weights("last", [3, 2]), mode=mode)
        T.backward(loss)
        values[mode] = loss.data.copy()
        grads[mode] = [_grad(p) for p in student.parameters() + conns[0].parameters() + conns[1].parameters()]
        for p in student.parameters() + conns[0].parameters() + conns[1].parameters():
            p.grad = None
    assert values["aggregated"].tobytes() == values["last"].tobytes()
    for a, b in zip(grads["aggregated"], grads["last"]):
        assert a.tobytes() == b.tobytes()


def test_fd_shape_mismatch_after_connector(rng):
    with pytest.raises(ShapeError):
        feature_distill_loss([[Tensor(np.ones((1, 2, 2, 2)))]], [Tensor(np.ones((1, 3, 2, 2)))],
                             [Connector.identity(ST, 0, 3)], mode="last")


def test_fd_modes_validated():
    with pytest.raises(ValueError):
        feature_distill_loss([], [], [], mode="middle")
    with pytest.raises(ValueError):
        feature_distill_loss([], [], [], weights=None, mode="aggregated")


# ---------------------------------------------------------------- ST loss


def test_st_loss_self_is_zero_and_antipodal_is_four(rng):
    a = rng.standard_normal((3, 2, 2, 2))
    ident = Connector.identity(ST, 0, 2)
    assert st_loss(Tensor(a), ident, Tensor(a)).item() == pytest.approx(0.0, abs=1e-14)
    assert st_loss(Tensor(a), ident, Tensor(-a)).item() == pytest.approx(4.0, abs=1e-12)


def test_st_loss_orthogonal_is_two():
    u = np.zeros((1, 1, 1, 2))
    v = np.zeros((1, 1, 1, 2))
    u[..., 0], v[..., 1] = 1.0, 1.0
    assert st_loss(Tensor(u), Connector.identity(ST, 0, 1), Tensor(v)).item() == pytest.approx(2.0)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_st_loss_scale_invariant_and_bounded(seed, su, sv):
    r = np.random.default_rng(seed)
    u, v = r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3, 2, 2))
    ident = Connector.identity(ST, 0, 3)
    base = st_loss(Tensor(u), ident, Tensor(v)).item()
    assert 0.0 <= base <= 4.0
    assert st_loss(Tensor(su * u), ident, Tensor(sv * v)).item() == pytest.approx(base, rel=1e-9, abs=1e-12)


def test_st_loss_zero_norm_raises():
    with pytest.raises(NumericOverflowError):
        st_loss(Tensor(np.zeros((1, 1, 2, 2))), Connector.identity(ST, 0, 1), Tensor(np.ones((1, 1, 2, 2))))


# ---------------------------------------------------------------- TS loss and bridge


def test_ts_loss_last_group_identity(pair, rng):
    _, student = pair
    x, y = _batch(rng)
    out, _ = student.forward_to_group(x, 1, training=False)
    ts = ts_loss(out, Connector.identity(TS, 1, 8), student, 1, y, training=False)
    assert ts.item() == cross_entropy(student.forward(x, training=False), y).item()


def test_ts_loss_uniform_injection_gives_log_c(pair):
    _, student = pair
    student.fc_weight.data[:] = 0
    ts = ts_loss(Tensor(np.zeros((2, 4, 8, 8))), Connector.identity(TS, 0, 4), student, 0, [0, 3], training=False)
    assert ts.item() == pytest.approx(math.log(5), abs=1e-12)


def test_ts_loss_gradient_wrt_beta(pair, rng):
    teacher, student = pair
    x, y = _batch(rng, 2)
    _, t_taps = teacher.forward_with_taps(Tensor(x))
    conn = make_connector(TS, teacher, student, 0, seed=0)

    def fn(beta):
        return ts_loss(aggregate(t_taps[0], T.softmax(beta)), conn, student, 0, y, training=True, update_stats=False)

    assert check_gradients(fn, [rng.standard_normal(3)]) <= REL_TOL


def test_bridge_loss_weighting(pair, rng):
    teacher, student = pair
    x, y = _batch(rng)
    w = AggregationWeights(betas=[rng.standard_normal(3), rng.standard_normal(2)])
    st_c, ts_c = make_connector(ST, teacher, student, 0, 1), make_connector(TS, teacher, student, 0, 2)
    kwargs = dict(training=True, update_stats=False)
    total, parts = bridge_loss(0, w, teacher, student, st_c, ts_c, x, y, LossWeights(gamma_st=0.5, gamma_ts=2.0), **kwargs)
    assert total.item() == pytest.approx(0.5 * parts["l_st"] + 2.0 * parts["l_ts"], rel=1e-12)
    only_ts, p2 = bridge_loss(0, w, teacher, student, st_c, ts_c, x, y, LossWeights(gamma_st=0.0, gamma_ts=1.0), **kwargs)
    assert only_ts.item() == p2["l_ts"]
    assert 0 <= parts["l_st"] <= 4


def test_bridge_loss_teacher_untouched(pair, rng):
    teacher, student = pair
    x, y = _batch(rng)
    before = T.parameters_checksum(teacher.parameters() + [b for _, b in teacher.named_buffers()])
    w = AggregationWeights(betas=[np.zeros(3), np.zeros(2)])
    loss, _ = bridge_loss(1, w, teacher, student, make_connector(ST, teacher, student, 1, 1),
                          make_connector(TS, teacher, student, 1, 2), x, y, LossWeights())
    T.backward(loss)
    assert all(p.grad is None for p in teacher.parameters())
    assert T.parameters_checksum(teacher.parameters() + [b for _, b in teacher.named_buffers()]) == before


# ---------------------------------------------------------------- student loss: gradient of beta flows only through L_fd


def test_student_loss_arithmetic():
    logits = Tensor(np.zeros((1, 10)))
    fd = Tensor(0.5)
    ce = math.log(10)
    assert student_loss(logits, [0], fd, 1.0).item() == pytest.approx(ce + 0.5)
    assert student_loss(logits, [0], fd, 0.0).item() == pytest.approx(ce)


@pytest.mark.parametrize("gamma_fd", [1.0, 0.37, 0.0])
def test_eq9_gradient_identity(pair, rng, gamma_fd):
    teacher, student = pair
    x, y = _batch(rng)
    _, t_taps = teacher.forward_with_taps(Tensor(x))
    conns = [make_connector(ST, teacher, student, i, seed=i) for i in range(2)]
    w = AggregationWeights(betas=[rng.standard_normal(3), rng.standard_normal(2)])

    logits, s_taps = student.forward_with_taps(Tensor(x), training=True, update_stats=False)
    fd = feature_distill_loss(t_taps, [g[-1] for g in s_taps], conns, w)
    T.backward(student_loss(logits, y, fd, gamma_fd))
    total_grads = [_grad(b) for b in w.betas]
    for b in w.betas:
        b.grad = None

    _, s_taps = student.forward_with_taps(Tensor(x), training=True, update_stats=False)
    T.backward(feature_distill_loss(t_taps, [g[-1] for g in s_taps], conns, w))
    for g_total, b in zip(total_grads, w.betas):
        np.testing.assert_allclose(g_total, gamma_fd * b.grad, rtol=0, atol=1e-10)
        if gamma_fd == 0:
            np.testing.assert_array_equal(g_total, 0)


def test_beta_regularizer():
    betas = [Tensor([1.0, 2.0], requires_grad=True), Tensor([3.0], requires_grad=True)]
    reg = beta_regularizer(betas, 1e-3)
    assert reg.item() == pytest.approx(14e-3)
    T.backward(reg)
    np.testing.assert_allclose(betas[0].grad, [2e-3, 4e-3])


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(gamma_fd=-1)
    with pytest.raises(ValueError):
        LossWeights(lambda_reg=float("nan"))
