"""Decision boundaries, projections, counterfactual explanations and importance.

All explanations are computed on a single sample against one pair of
classes ``(i, j)``.  In feature space the boundary between them is the
hyperplane ``<t, w> + c = 0`` with ``w = w_i - w_j`` and ``c = b_i - b_j``;
the margin ``<t, w> + c`` is positive when class ``i`` wins.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ModeError


class DegenerateBoundaryError(ValueError):
    """The two class rows coincide, so no boundary exists."""


NORMAL_FLOOR = 1e-8


@dataclass
class BoundarySpec:
    class_i: int
    class_j: int
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if np.linalg.norm(self.normal) <= NORMAL_FLOOR:
            raise DegenerateBoundaryError(
                f"classes {self.class_i} and {self.class_j} have identical weight rows")

    def margin(self, t):
        return np.asarray(t, dtype=np.float64) @ self.normal + self.offset

    def swapped(self):
        return BoundarySpec(self.class_j, self.class_i, -self.normal, -self.offset)


@dataclass
class ProjectionResult:
    t: np.ndarray
    t_proj: np.ndarray
    margin: float


@dataclass
class ExplanationReport:
    x: np.ndarray
    x_proj: np.ndarray
    t: np.ndarray
    t_proj: np.ndarray
    feature_explanation: np.ndarray
    input_explanation: np.ndarray
    class_pair: tuple
    margin: float
    tie_broken: bool = False

    def to_rows(self):
        """Per-dimension rows for text/CSV output."""
        rows = []
        for k, (a, b, e) in enumerate(zip(self.x.ravel(), self.x_proj.ravel(), self.input_explanation.ravel())):
            rows.append({"domain": "input", "index": k, "value": float(a), "projection": float(b),
                         "explanation": float(e)})
        for k, (a, b, e) in enumerate(zip(self.t, self.t_proj, self.feature_explanation)):
            rows.append({"domain": "feature", "index": k, "value": float(a), "projection": float(b),
                         "explanation": float(e)})
        return rows


@dataclass
class ImportanceVector:
    """``values = |gradient * displacement|`` where ``displacement = x - x_p``."""

    values: np.ndarray
    gradient: np.ndarray
    reference: np.ndarray
    displacement: np.ndarray
    class_pair: tuple
    margin: float

    def to_rows(self):
        return [{"index": k, "importance": float(v), "gradient": float(g), "displacement": float(d)}
                for k, (v, g, d) in enumerate(zip(self.values.ravel(), self.gradient.ravel(),
                                                  self.displacement.ravel()))]


@dataclass
class TaylorCheck:
    slope: float | None
    exactly_linear: bool
    alphas: np.ndarray
    distances: np.ndarray
    residuals: np.ndarray


@dataclass
class BoundaryTrace:
    feature_points: np.ndarray
    input_points: np.ndarray


def _require_eval(net):
    if net.training:
        raise ModeError("explanations need an eval-mode net with frozen batchnorm statistics")


def _single(net, x):
    x = np.asarray(x, dtype=net.dtype)
    shape = tuple(net.spec.input_shape)
    if x.shape == shape:
        return x[None]
    if x.shape == (1,) + shape:
        return x
    raise ad.ShapeError(f"expected one sample of shape {shape}, got {x.shape}")


def boundary_between(net, i, j) -> BoundarySpec:
    """Feature-space hyperplane where classes ``i`` and ``j`` tie."""
    K = net.spec.class_count
    if i == j:
        raise ValueError("boundary needs two distinct classes")
    if not (0 <= i < K and 0 <= j < K):
        raise ValueError(f"class indices must lie in [0, {K})")
    W = net.head.W.astype(np.float64)
    b = net.head.bias.astype(np.float64)
    return BoundarySpec(int(i), int(j), W[i] - W[j], float(b[i] - b[j]))


def project_to_boundary(t, spec: BoundarySpec) -> ProjectionResult:
    """Nearest point on the hyperplane: ``t - (m / |w|^2) w``."""
    t = np.asarray(t, dtype=np.float64)
    w = spec.normal
    m = float(t @ w + spec.offset)
    return ProjectionResult(t, t - (m / (w @ w)) * w, m)


def top_two(probabilities):
    """Indices of the two most probable classes, ties toward the lower index."""
    p = np.asarray(probabilities)
    order = np.argsort(-p, kind="stable")
    return (int(order[0]), int(order[1])), bool(p[order[0]] == p[order[1]])


def _class_pair(net, x1, class_pair):
    if class_pair is not None:
        return tuple(int(c) for c in class_pair), False
    return top_two(net.predict_proba(x1)[0])


def explain_decision(net, x, class_pair=None) -> ExplanationReport:
    """Project ``T(x)`` onto the boundary and map the projection back to input space."""
    _require_eval(net)
    x1 = _single(net, x)
    pair, tie = _class_pair(net, x1, class_pair)
    spec = boundary_between(net, *pair)
    t = net.forward_features(x1).data[0]
    proj = project_to_boundary(t, spec)
    both = np.stack([t, proj.t_proj]).astype(net.dtype)
    back = net.inverse_features(both).data
    return ExplanationReport(
        x=x1[0].copy(), x_proj=back[1], t=proj.t, t_proj=proj.t_proj,
        feature_explanation=proj.t - proj.t_proj,
        input_explanation=back[0] - back[1],
        class_pair=pair, margin=proj.margin, tie_broken=tie)


def interpolate_path(net, x, steps, class_pair=None):
    """Inputs along the straight feature-space path from ``T(x)`` to its projection.

    Returns ``steps`` arrays for ``alpha = k / (steps - 1)``.
    """
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    _require_eval(net)
    x1 = _single(net, x)
    pair, _ = _class_pair(net, x1, class_pair)
    spec = boundary_between(net, *pair)
    t = net.forward_features(x1).data[0].astype(np.float64)
    t_proj = project_to_boundary(t, spec).t_proj
    alphas = np.arange(steps) / (steps - 1)
    path = (1.0 - alphas)[:, None] * t + alphas[:, None] * t_proj
    frames = net.inverse_features(path.astype(net.dtype)).data
    return [f.copy() for f in frames]


def margin_gradient(net, u, spec: BoundarySpec):
    """Gradient of ``f(u) = <T(u), w> + c`` at the single input ``u``."""
    u = Tensor(_single(net, u), requires_grad=True, dtype=net.dtype)
    t = net.forward_features(u)
    f = ad.matmul(t, Tensor(spec.normal[:, None], dtype=net.dtype))
    ad.backward(f)
    return u.grad[0].astype(np.float64), float(f.data[0, 0]) + spec.offset


def feature_importance(net, x, class_pair=None) -> ImportanceVector:
    """Per-input-dimension ``|grad f(x_p) * (x - x_p)|`` for the margin ``f``.

    ``x - x_p`` is taken as ``T^-1(T(x)) - T^-1(X_p)``, so a zero margin
    yields an exactly zero vector.
    """
    _require_eval(net)
    rep = explain_decision(net, x, class_pair)
    spec = boundary_between(net, *rep.class_pair)
    grad, _ = margin_gradient(net, rep.x_proj, spec)
    disp = rep.input_explanation.astype(np.float64)
    return ImportanceVector(np.abs(grad * disp), grad, rep.x_proj, disp, rep.class_pair, rep.margin)


def _float64(net):
    return net if net.dtype == np.float64 else net.copy().astype(np.float64)


def taylor_residual_check(net, x, class_pair=None, exponents=range(1, 7)) -> TaylorCheck:
    """Log-log slope of the first-order Taylor residual around ``x_p``.

    Residuals ``|f(x_a) - f(x_p) - grad f(x_p) . (x_a - x_p)|`` are taken at
    ``x_a = x_p + a (x - x_p)`` for ``a = 2^-1 .. 2^-6`` in 64-bit.
    Residuals under the floating-point noise floor are clamped to it; when
    all of them are, the margin is reported as exactly linear.
    """
    _require_eval(net)
    net64 = _float64(net)
    rep = explain_decision(net64, np.asarray(x, dtype=np.float64), class_pair)
    if rep.margin == 0.0:
        raise ValueError("Taylor check needs a sample off the boundary")
    spec = boundary_between(net64, *rep.class_pair)
    xp = rep.x_proj
    grad, f_p = margin_gradient(net64, xp, spec)
    alphas = np.array([2.0 ** -k for k in exponents])
    d = rep.x - xp
    pts = xp[None] + alphas.reshape((-1,) + (1,) * d.ndim) * d[None]
    f = spec.margin(net64.forward_features(pts).data)
    lin = alphas * float(np.sum(grad * d))
    resid = np.abs(f - f_p - lin)
    eps = np.finfo(np.float64).eps
    floor = 64 * eps * (np.abs(f) + abs(f_p) + alphas * float(np.sum(np.abs(grad * d))) + 1.0)
    dist = alphas * float(np.linalg.norm(d))
    if np.all(resid <= floor):
        return TaylorCheck(None, True, alphas, dist, resid)
    slope = float(np.polyfit(np.log(dist), np.log(np.maximum(resid, floor)), 1)[0])
    return TaylorCheck(slope, False, alphas, dist, resid)


def _line_frame(spec: BoundarySpec):
    w = spec.normal
    if w.shape != (2,):
        raise ad.ShapeError(f"boundary tracing needs a 2-dimensional feature space, got {w.shape}")
    n = np.linalg.norm(w)
    direction = np.array([w[1], -w[0]]) / n
    if direction[0] < 0 or (direction[0] == 0 and direction[1] < 0):
        direction = -direction
    base = -spec.offset * w / (n * n)
    return base, direction


def trace_range(spec: BoundarySpec, features, pad=0.25):
    """Arclength interval covering the projections of ``features`` onto the boundary line."""
    base, direction = _line_frame(spec)
    s = (np.asarray(features, dtype=np.float64) - base) @ direction
    span = s.max() - s.min()
    return float(s.min() - pad * span), float(s.max() + pad * span)


def boundary_trace_2d(net, spec: BoundarySpec, feature_range, n_points) -> BoundaryTrace:
    """Sample the feature-space boundary line and invert every sample."""
    _require_eval(net)
    if net.feature_dim != 2:
        raise ad.ShapeError("boundary tracing needs a 2-dimensional feature space")
    if n_points < 2:
        raise ValueError("need at least 2 points")
    base, direction = _line_frame(spec)
    s = np.linspace(feature_range[0], feature_range[1], n_points)
    feats = base[None] + s[:, None] * direction[None]
    inputs = net.inverse_features(feats.astype(net.dtype)).data.astype(np.float64)
    return BoundaryTrace(feats, inputs)


def polyline_side(points, polyline):
    """Sign of the cross product against each point's nearest polyline segment."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    a, b = polyline[:-1], polyline[1:]
    ab = b - a
    ap = p[:, None, :] - a[None]
    u = np.clip(np.einsum("nmk,mk->nm", ap, ab) / np.maximum(np.sum(ab * ab, axis=1), 1e-300), 0.0, 1.0)
    closest = a[None] + u[..., None] * ab[None]
    nearest = np.argmin(np.sum((p[:, None] - closest) ** 2, axis=2), axis=1)
    rows = np.arange(len(p))
    seg, rel = ab[nearest], ap[rows, nearest]
    return np.sign(seg[:, 0] * rel[:, 1] - seg[:, 1] * rel[:, 0])


def side_consistency(net, spec: BoundarySpec, trace: BoundaryTrace, X):
    """Fraction of ``X`` whose side of the traced input curve agrees with the margin sign.

    The curve's orientation is fixed by inverting a feature point nudged
    off the middle of the traced line toward positive margin.
    """
    mid = trace.feature_points[len(trace.feature_points) // 2]
    span = np.linalg.norm(trace.feature_points[-1] - trace.feature_points[0])
    nudge = mid + 1e-3 * span * spec.normal / np.linalg.norm(spec.normal)
    probe = net.inverse_features(nudge[None].astype(net.dtype)).data.astype(np.float64)
    orient = polyline_side(probe, trace.input_points)[0]
    if orient == 0:
        raise ValueError("cannot orient the traced boundary")
    curve_side = polyline_side(X, trace.input_points) * orient
    margin_side = np.sign(spec.margin(net.forward_features(X).data))
    return float(np.mean(curve_side == margin_side))
