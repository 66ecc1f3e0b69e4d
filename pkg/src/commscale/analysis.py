"""Inspection of a learned communication protocol.

The protocol of a trained model is the map from each label to the message its
encoder emits. Because a receiver sees only the average of the other agents'
messages, what matters is whether the midpoints of every pair of messages stay
apart. The two informative coordinates are then described by an
exponential/logarithmic parametric curve ``x = a * 2**tau + b``,
``y = c * ln(tau + 1) + d`` fitted by ordinary least squares.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations_with_replacement

import numpy as np

from .env import one_hot
from .model import encode_obs


@dataclass
class MeanPointSet:
    pairs: list[tuple[int, int]]
    points: np.ndarray  # [len(pairs), M]

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class RegressionResult:
    a: float
    b: float
    c: float
    d: float
    r2_x: float
    r2_y: float
    tau_order: list[int]
    dims: tuple[int, int]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dims"] = list(self.dims)
        return out


def extract_comm_policy(params, n_labels: int | None = None) -> np.ndarray:
    """``[L, M]`` table whose row ``i`` is the message sent for label ``i``."""
    L = params["encoder.weight"].shape[0]
    if n_labels is not None and n_labels != L:
        raise ValueError(f"parameters encode {L} labels, not {n_labels}")
    return encode_obs(one_hot(np.arange(L), L), params).data.copy()


def pairwise_means(table) -> MeanPointSet:
    """Midpoints of every unordered pair of rows, self-pairs included."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 1:
        raise ValueError("table must be a non-empty 2-D array")
    pairs = list(combinations_with_replacement(range(table.shape[0]), 2))
    idx = np.array(pairs)
    points = 0.5 * (table[idx[:, 0]] + table[idx[:, 1]])
    return MeanPointSet(pairs, points)


def separability(points: MeanPointSet):
    """Smallest Euclidean distance between two mean points, with the pairs achieving it."""
    if len(points) < 2:
        raise ValueError("need at least two mean points")
    x = points.points
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    iu = np.triu_indices(len(points), k=1)
    k = int(np.argmin(dist[iu]))
    i, j = int(iu[0][k]), int(iu[1][k])
    return float(dist[i, j]), (points.pairs[i], points.pairs[j])


def r_squared(actual, predicted) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``.

    A constant target has ``SS_tot = 0``; it scores 1 when reproduced (up to
    round-off relative to its magnitude) and ``-inf`` otherwise.
    """
    y = np.asarray(actual, dtype=np.float64)
    yhat = np.asarray(predicted, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size < 2:
        raise ValueError("need at least two values")
    ss_res = float(((y - yhat) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        tol = y.size * (1e-12 * max(1.0, abs(float(y[0])))) ** 2
        return 1.0 if ss_res <= tol else -np.inf
    return 1.0 - ss_res / ss_tot


def _lstsq_line(feature: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    basis = np.column_stack([feature, np.ones_like(feature)])
    if np.linalg.matrix_rank(basis) < 2:
        raise ValueError("degenerate regression basis: need at least two distinct tau values")
    (slope, intercept), *_ = np.linalg.lstsq(basis, target, rcond=None)
    return float(slope), float(intercept)


def default_dims(table) -> tuple[int, int]:
    """The two highest-variance columns, in ascending column order."""
    var = np.asarray(table).var(axis=0)
    top = np.argsort(-var, kind="stable")[:2]
    return tuple(sorted(int(i) for i in top))


def fit_parametric(table, dims: tuple[int, int] | None = None,
                   tau_order=None) -> RegressionResult:
    """Fit ``x = a 2^tau + b`` on column ``dims[0]`` and ``y = c ln(tau+1) + d`` on ``dims[1]``.

    Unless ``tau_order`` is given, labels are ranked by ascending ``y``
    (stable on ties) and the rank is used as ``tau``. ``tau_order[t]`` is the
    label placed at ``tau = t``.
    """
    table = np.asarray(table, dtype=np.float64)
    L = table.shape[0]
    if L < 3:
        raise ValueError("need at least 3 labels to fit the parametric curve")
    if dims is None:
        dims = default_dims(table)
    xs, ys = table[:, dims[0]], table[:, dims[1]]
    if tau_order is None:
        tau_order = np.argsort(ys, kind="stable")
    tau_order = [int(i) for i in tau_order]
    if sorted(tau_order) != list(range(L)):
        raise ValueError("tau_order must be a permutation of the labels")
    tau = np.arange(L, dtype=np.float64)
    x = xs[tau_order]
    y = ys[tau_order]
    fx, fy = 2.0**tau, np.log(tau + 1.0)
    a, b = _lstsq_line(fx, x)
    c, d = _lstsq_line(fy, y)
    return RegressionResult(
        a=a, b=b, c=c, d=d,
        r2_x=r_squared(x, a * fx + b),
        r2_y=r_squared(y, c * fy + d),
        tau_order=tau_order,
        dims=(int(dims[0]), int(dims[1])),
    )


def parametric_table(a: float, b: float, c: float, d: float, n_labels: int) -> np.ndarray:
    """Two-column table generated exactly by the parametric curve at ``tau = 0..L-1``."""
    tau = np.arange(n_labels, dtype=np.float64)
    return np.column_stack([a * 2.0**tau + b, c * np.log(tau + 1.0) + d])


def analyze(params, dims=None) -> dict:
    """Full report: policy table, mean points, separability and curve fit."""
    table = extract_comm_policy(params)
    means = pairwise_means(table)
    min_dist, closest = separability(means) if len(means) >= 2 else (float("nan"), None)
    report = {
        "policy_table": table.tolist(),
        "mean_points": [
            {"pair": list(pair), "point": point.tolist()} for pair, point in zip(means.pairs, means.points)
        ],
        "min_distance": min_dist,
        "closest_pairs": [list(p) for p in closest] if closest else None,
    }
    try:
        report["fit"] = fit_parametric(table, dims).to_dict()
    except ValueError as exc:
        report["fit"] = None
        report["fit_error"] = str(exc)
    return report
