"""Scalar objectives for feature distillation and aggregation search."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .networks import Connector, GroupedNetwork
from .tensor import NumericOverflowError, ShapeError, Tensor


@dataclass
class LossWeights:
    gamma_fd: float = 1.0
    gamma_st: float = 1e-3
    gamma_ts: float = 1.0
    lambda_reg: float = 1e-3

    def __post_init__(self):
        for key, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{key} must be finite and nonnegative, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


class AggregationWeights:
    """Per-group aggregation weights.

    Either searchable logits ``betas`` (``alpha = softmax(beta)``) or exact
    ``fixed`` simplex vectors, which may contain exact zeros and carry no
    gradient.
    """

    def __init__(self, betas: Sequence | None = None, fixed: Sequence | None = None):
        if (betas is None) == (fixed is None):
            raise ValueError("give exactly one of betas or fixed")
        self.betas: list[Tensor] | None = None
        self.fixed: list[np.ndarray] | None = None
        if betas is not None:
            self.betas = [
                b if isinstance(b, Tensor) else Tensor(b, requires_grad=True, name=f"beta{i}")
                for i, b in enumerate(betas)
            ]
            for i, b in enumerate(self.betas):
                b.name = b.name or f"beta{i}"
        else:
            self.fixed = [np.asarray(a, dtype=np.float64) for a in fixed]
            for a in self.fixed:
                if a.ndim != 1 or np.any(a < 0) or abs(a.sum() - 1) > 1e-9:
                    raise ValueError(f"fixed weights must lie on the simplex, got {a}")

    @property
    def searchable(self) -> bool:
        return self.betas is not None

    @property
    def group_sizes(self) -> list[int]:
        vecs = self.betas if self.betas is not None else self.fixed
        return [int(v.shape[0]) for v in vecs]

    def __len__(self) -> int:
        return len(self.group_sizes)

    def alpha(self, group: int) -> Tensor:
        """Weights of ``group`` as a tensor (on the tape when beta requires grad)."""
        if self.betas is not None:
            return T.softmax(self.betas[group])
        return Tensor(self.fixed[group], dtype=T.default_dtype())

    def alpha_numpy(self, group: int) -> np.ndarray:
        if self.betas is not None:
            b = self.betas[group].data.astype(np.float64)
            e = np.exp(b - b.max())
            return e / e.sum()
        return self.fixed[group].copy()

    def alphas(self) -> list[np.ndarray]:
        return [self.alpha_numpy(i) for i in range(len(self))]

    def frozen(self) -> "AggregationWeights":
        """Exact-weight copy holding the current alphas."""
        return AggregationWeights(fixed=self.alphas())


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return T.scale(T.sum(T.log_softmax(logits, axis=1) * onehot), -1.0 / n)


def aggregate(taps: Sequence[Tensor], alpha) -> Tensor:
    """Weighted sum ``sum_j alpha[j] * taps[j]``."""
    alpha = T._as_tensor(alpha)
    if alpha.ndim != 1 or alpha.shape[0] != len(taps):
        raise ShapeError(f"aggregate: {len(taps)} taps but weights of shape {alpha.shape}")
    shape = taps[0].shape
    out = None
    for j, tap in enumerate(taps):
        if tap.shape != shape:
            raise ShapeError(f"aggregate: tap {j} has shape {tap.shape}, expected {shape}")
        term = alpha[j] * tap
        out = term if out is None else out + term
    return out


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of squared differences over all non-batch axes, averaged over the batch."""
    if a.shape != b.shape:
        raise ShapeError(f"l2 distance: shapes {a.shape} and {b.shape} differ")
    return T.scale(T.sum_squares(a - b), 1.0 / a.shape[0])


def feature_distill_loss(
    teacher_taps: Sequence[Sequence[Tensor]],
    student_taps: Sequence[Tensor],
    st_connectors: Sequence[Connector],
    weights: AggregationWeights | None = None,
    mode: str = "aggregated",
    teacher_transforms: Sequence[Connector] | None = None,
) -> Tensor:
    """Distillation loss summed over groups.

    ``student_taps[i]`` is the student's last tap of group i.  In mode
    ``"aggregated"`` the target is the weighted aggregation of all teacher
    taps of the group; in mode ``"last"`` it is the teacher's last tap.
    ``teacher_transforms`` default to the identity.
    """
    if mode not in ("aggregated", "last"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "aggregated" and weights is None:
        raise ValueError("aggregated mode needs aggregation weights")
    if not (len(teacher_taps) == len(student_taps) == len(st_connectors)):
        raise ShapeError("feature_distill_loss: group counts of teacher taps, student taps and connectors differ")
    total = None
    for i, (t_taps, s_tap, conn) in enumerate(zip(teacher_taps, student_taps, st_connectors)):
        target = aggregate(t_taps, weights.alpha(i)) if mode == "aggregated" else t_taps[-1]
        if teacher_transforms is not None:
            target = teacher_transforms[i](target)
        mapped = conn(s_tap)
        if mapped.shape != target.shape:
            raise ShapeError(f"feature_distill_loss: group {i} student {mapped.shape} vs teacher {target.shape}")
        term = l2_distance(target, mapped)
        total = term if total is None else total + term
    return total


def ts_loss(aggregation: Tensor, ts_connector: Connector, student: GroupedNetwork, group: int, labels,
            training: bool = True, update_stats: bool | None = None) -> Tensor:
    """Cross-entropy of the student's downstream groups fed with the mapped aggregation."""
    logits = student.forward_from_group(ts_connector(aggregation), group + 1, training, update_stats)
    return cross_entropy(logits, labels)


def st_loss(student_tap: Tensor, st_connector: Connector, aggregation: Tensor) -> Tensor:
    """Squared distance between per-sample unit-normalized mapped student tap and aggregation."""
    u = st_connector(student_tap)
    if u.shape != aggregation.shape:
        raise ShapeError(f"st_loss: mapped student {u.shape} vs aggregation {aggregation.shape}")
    n = u.shape[0]
    u = u.reshape(n, -1)
    v = aggregation.reshape(n, -1)
    for label, t in (("student", u), ("aggregation", v)):
        if np.any(np.einsum("ij,ij->i", t.data, t.data) == 0):
            raise NumericOverflowError(f"st_loss: zero-norm {label} feature, normalization undefined")
    u = u / T.sqrt(T.sum_squares(u, axis=1, keepdims=True))
    v = v / T.sqrt(T.sum_squares(v, axis=1, keepdims=True))
    return T.scale(T.sum_squares(u - v), 1.0 / n)


def bridge_loss(
    group: int,
    weights: AggregationWeights,
    teacher: GroupedNetwork,
    student: GroupedNetwork,
    st_connector: Connector,
    ts_connector: Connector,
    x,
    labels,
    loss_weights: LossWeights,
    training: bool = True,
    update_stats: bool | None = None,
    teacher_taps=None,
) -> tuple[Tensor, dict]:
    """``gamma_st * L_ST + gamma_ts * L_TS`` for one group; returns ``(loss, parts)``.

    The teacher runs in eval mode without recording gradients.  Pass
    precomputed ``teacher_taps`` of the group to skip the teacher forward.
    """
    if teacher_taps is None:
        with T.no_grad():
            _, taps = teacher.forward_to_group(x, group, training=False)
        teacher_taps = taps[group]
    agg = aggregate(teacher_taps, weights.alpha(group))
    _, s_taps = student.forward_to_group(x, group, training, update_stats)
    l_st = st_loss(s_taps[group][-1], st_connector, agg)
    l_ts = ts_loss(agg, ts_connector, student, group, labels, training, update_stats)
    if loss_weights.gamma_st == 0:
        total = T.scale(l_ts, loss_weights.gamma_ts)
    elif loss_weights.gamma_ts == 0:
        total = T.scale(l_st, loss_weights.gamma_st)
    else:
        total = T.scale(l_st, loss_weights.gamma_st) + T.scale(l_ts, loss_weights.gamma_ts)
    return total, {"l_st": l_st.item(), "l_ts": l_ts.item()}


def student_loss(logits: Tensor, labels, fd, gamma_fd: float) -> Tensor:
    """``L_ce + gamma_fd * L_fd``."""
    ce = cross_entropy(logits, labels)
    if gamma_fd == 0 or fd is None:
        return ce
    return ce + T.scale(fd, gamma_fd)


def beta_regularizer(betas: Sequence[Tensor], lambda_reg: float) -> Tensor:
    """``lambda_reg * sum_i ||beta_i||^2``."""
    total = None
    for b in betas:
        term = T.sum_squares(b)
        total = term if total is None else total + term
    return T.scale(total, lambda_reg)
