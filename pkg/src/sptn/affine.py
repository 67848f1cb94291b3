"""Invertible affine layers in SVD form with elementwise nonlinearities.

A layer computes y = sigma(W x + b) with W = U diag(d) V^T, where U and V
are parametrized rotations (Givens angles or Householder vectors, always
the same kind for both). The factored form keeps the log-det of the
Jacobian cheap:

    log|det J(x)| = sum_i log|d_i| + sum_i log sigma'(o_i),  o = W x + b

and the inverse closed-form: x = V diag(1/d) U^T (sigma^{-1}(y) - b).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import unitary
from .errors import (
    DimensionMismatchError,
    NonInvertibleError,
    NotTractableError,
    OutsideRangeError,
)

DIAG_FLOOR = 1e-6  # invertibility floor for |d_i|

SELU_LAMBDA = 1.0507
SELU_ALPHA = 1.6733


@dataclass(frozen=True)
class Nonlinearity:
    """Strictly monotone elementwise map with closed-form inverse/derivative.

    Variants: identity; leaky-relu (slope alpha < 1 on the negative side);
    selu. Note selu maps R onto (-lambda*alpha, inf), not onto all of R:
    its inverse raises OutsideRangeError below that bound. A density routed
    through a selu transform therefore integrates to the child's mass on
    that range (slightly below one); sampling redraws the unreachable tail.
    """

    tag: str
    alpha: float = 0.0

    @staticmethod
    def identity() -> "Nonlinearity":
        return Nonlinearity("identity")

    @staticmethod
    def leaky_relu(alpha: float = 0.01) -> "Nonlinearity":
        if not 0.0 < alpha:
            raise ValueError(f"leaky-relu slope must be positive, got {alpha}")
        return Nonlinearity("leaky_relu", alpha)

    @staticmethod
    def selu() -> "Nonlinearity":
        return Nonlinearity("selu")

    @property
    def is_identity(self) -> bool:
        return self.tag == "identity"

    def value(self, o: np.ndarray) -> np.ndarray:
        if self.tag == "identity":
            return o
        if self.tag == "leaky_relu":
            return np.where(o >= 0.0, o, self.alpha * o)
        return np.where(
            o > 0.0, SELU_LAMBDA * o, SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(o, 0.0))
        )

    def deriv(self, o: np.ndarray) -> np.ndarray:
        if self.tag == "identity":
            return np.ones_like(o)
        if self.tag == "leaky_relu":
            return np.where(o >= 0.0, 1.0, self.alpha)
        return np.where(o > 0.0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(o, 0.0)))

    def log_deriv(self, o: np.ndarray) -> np.ndarray:
        if self.tag == "identity":
            return np.zeros_like(o)
        if self.tag == "leaky_relu":
            return np.where(o >= 0.0, 0.0, np.log(self.alpha))
        return np.where(
            o > 0.0, np.log(SELU_LAMBDA), np.log(SELU_LAMBDA * SELU_ALPHA) + np.minimum(o, 0.0)
        )

    def curvature_ratio(self, o: np.ndarray) -> np.ndarray:
        """sigma''(o)/sigma'(o), the log-det's dependence on o."""
        if self.tag == "selu":
            return np.where(o > 0.0, 0.0, 1.0)
        return np.zeros_like(o)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        if self.tag == "identity":
            return z
        if self.tag == "leaky_relu":
            return np.where(z >= 0.0, z, z / self.alpha)
        lo = -SELU_LAMBDA * SELU_ALPHA
        if np.any(z <= lo):
            raise OutsideRangeError(
                f"selu inverse undefined at or below {lo:.6f} (got min {np.min(z):.6f})"
            )
        pos = z > 0.0
        return np.where(pos, z / SELU_LAMBDA, np.log1p(np.minimum(z, 0.0) / (SELU_LAMBDA * SELU_ALPHA)))

    def in_range(self, z: np.ndarray) -> np.ndarray:
        """Boolean mask of values the inverse is defined at."""
        if self.tag == "selu":
            return z > -SELU_LAMBDA * SELU_ALPHA
        return np.ones(np.shape(z), dtype=bool)

    def to_dict(self) -> dict:
        d = {"tag": self.tag}
        if self.tag == "leaky_relu":
            d["alpha"] = self.alpha
        return d

    @staticmethod
    def from_dict(d: dict) -> "Nonlinearity":
        tag = d["tag"]
        if tag == "identity":
            return Nonlinearity.identity()
        if tag == "leaky_relu":
            return Nonlinearity.leaky_relu(float(d["alpha"]))
        if tag == "selu":
            return Nonlinearity.selu()
        raise ValueError(f"unknown nonlinearity tag {tag!r}")


@dataclass
class SvdAffine:
    dim: int
    u_param: object  # GivensParam | HouseholderParam
    v_param: object  # same kind as u_param
    diag: np.ndarray
    bias: np.ndarray
    nonlinearity: Nonlinearity

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=np.float64).reshape(-1)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.u_param.kind != self.v_param.kind:
            raise ValueError("u_param and v_param must use the same parametrization")
        for name, got in (("u_param", self.u_param.dim), ("v_param", self.v_param.dim),
                          ("diag", self.diag.shape[0]), ("bias", self.bias.shape[0])):
            if got != self.dim:
                raise DimensionMismatchError(self.dim, got, name)
        small = np.abs(self.diag) < DIAG_FLOOR
        if np.any(small):
            i = int(np.argmax(small))
            raise NonInvertibleError(
                f"|diag[{i}]| = {abs(self.diag[i]):.3e} below floor {DIAG_FLOOR}"
            )

    @property
    def kind(self) -> str:
        return self.u_param.kind

    def copy(self) -> "SvdAffine":
        if self.kind == "givens":
            u = unitary.GivensParam(self.dim, self.u_param.theta.copy())
            v = unitary.GivensParam(self.dim, self.v_param.theta.copy())
        else:
            u = unitary.HouseholderParam(self.dim, self.u_param.vectors.copy())
            v = unitary.HouseholderParam(self.dim, self.v_param.vectors.copy())
        return SvdAffine(self.dim, u, v, self.diag.copy(), self.bias.copy(), self.nonlinearity)


def identity_layer(dim: int, nonlinearity: Nonlinearity | None = None,
                   kind: str = "givens") -> SvdAffine:
    """Layer computing sigma(x): unit diagonal, zero bias, identity rotations.

    Only the Givens kind can represent the identity rotation exactly; a
    Householder product of d reflections is never the identity matrix, so
    kind="householder" is rejected here.
    """
    if kind != "givens":
        raise ValueError("exact identity layers require the givens parametrization")
    u = unitary.GivensParam(dim, np.zeros(unitary.theta_size(dim)))
    v = unitary.GivensParam(dim, np.zeros(unitary.theta_size(dim)))
    return SvdAffine(dim, u, v, np.ones(dim), np.zeros(dim),
                     nonlinearity or Nonlinearity.identity())


def random_layer(dim: int, rng: np.random.Generator, kind: str = "givens",
                 nonlinearity: Nonlinearity | None = None, angle_std: float = 0.01,
                 bias_std: float = 0.0) -> SvdAffine:
    """Near-identity random layer: unit diagonal, small rotation noise.

    With Householder vectors the rotations are not near the identity matrix,
    but U D V^T still is in distribution terms: at D = I the layer is a pure
    rotation, which leaves the N(0, I) leaves this package uses invariant.
    """
    if kind == "givens":
        u = unitary.random_givens(dim, rng, angle_std)
        v = unitary.random_givens(dim, rng, angle_std)
    elif kind == "householder":
        u = unitary.random_householder(dim, rng, angle_std)
        v = unitary.random_householder(dim, rng, angle_std)
    else:
        raise ValueError(f"unknown parametrization kind {kind!r}")
    bias = rng.normal(0.0, bias_std, size=dim) if bias_std > 0 else np.zeros(dim)
    return SvdAffine(dim, u, v, np.ones(dim), bias, nonlinearity or Nonlinearity.identity())


# ---------------------------------------------------------------------------
# stacked kernels over I layers at once (the circuit evaluator's hot path)


@dataclass
class LayerStack:
    kind: str
    nonlinearity: Nonlinearity
    u: np.ndarray      # (I, K) or (I, d, d)
    v: np.ndarray
    diag: np.ndarray   # (I, d)
    bias: np.ndarray   # (I, d)


def stack_layers(layers: list[SvdAffine]) -> LayerStack:
    kind = layers[0].kind
    nl = layers[0].nonlinearity
    return LayerStack(
        kind,
        nl,
        np.stack([unitary.param_arrays(l.u_param) for l in layers]),
        np.stack([unitary.param_arrays(l.v_param) for l in layers]),
        np.stack([l.diag for l in layers]),
        np.stack([l.bias for l in layers]),
    )


def forward_stacked(stack: LayerStack, x: np.ndarray):
    """x: (I, B, d) -> (v, o, y, logdet) with logdet shaped (I, B).

    For the identity nonlinearity logdet is a read-only broadcast view.
    """
    v = unitary.apply_stacked(stack.kind, stack.v, x, transpose=True)
    w = v * stack.diag[:, None, :]
    o = unitary.apply_stacked(stack.kind, stack.u, w, transpose=False)
    o += stack.bias[:, None, :]
    nl = stack.nonlinearity
    y = nl.value(o)
    diag_ld = np.log(np.abs(stack.diag)).sum(axis=1)[:, None]
    if nl.is_identity:
        logdet = np.broadcast_to(diag_ld, o.shape[:2])
    else:
        logdet = diag_ld + nl.log_deriv(o).sum(axis=2)
    return v, o, y, logdet


def backward_stacked(stack: LayerStack, v: np.ndarray, o: np.ndarray,
                     g_y: np.ndarray, g_logdet: np.ndarray):
    """Reverse pass; returns (g_u, g_v, g_diag, g_bias, g_x).

    g_y is the cotangent on y = sigma(o), g_logdet the per-row cotangent on
    the layer's log-det term. Parameter gradients are summed over the batch
    axis; g_x is per row.
    """
    nl = stack.nonlinearity
    if nl.is_identity:
        g_o = g_y.copy()
    else:
        g_o = g_y * nl.deriv(o) + g_logdet[:, :, None] * nl.curvature_ratio(o)
    g_bias = g_o.sum(axis=1)
    u_out = o - stack.bias[:, None, :]
    g_u, g_w, _ = unitary.backward_stacked(stack.kind, stack.u, u_out, g_o, transpose=False)
    g_diag = (g_w * v).sum(axis=1) + g_logdet.sum(axis=1)[:, None] / stack.diag
    g_vvec = g_w * stack.diag[:, None, :]
    g_v, g_x, _ = unitary.backward_stacked(stack.kind, stack.v, v, g_vvec, transpose=True)
    return g_u, g_v, g_diag, g_bias, g_x


# ---------------------------------------------------------------------------
# materialized form
#
# Row convention: y_row = sigma(x_row @ full + bias). Each unitary stage's
# right-multiplier matrix is obtained by pushing an identity batch through the
# rotation kernels, and the same kernels run backward on that identity batch to
# turn matrix cotangents into parameter gradients. This replaces many
# elementwise passes over (rows, d) data with one batched matmul, which is the
# cheaper route when one layer serves many rows.


@dataclass
class MatStack:
    kind: str
    nonlinearity: Nonlinearity
    u: np.ndarray        # parameter arrays, as in LayerStack
    v: np.ndarray
    diag: np.ndarray     # (N, d)
    bias: np.ndarray     # (N, d)
    right_v: np.ndarray  # (N, d, d) right matrix of the V^T stage
    right_u: np.ndarray  # (N, d, d) right matrix of the U stage
    full: np.ndarray     # (N, d, d) = (right_v * diag) @ right_u


def materialize_stack(stack: LayerStack) -> MatStack:
    n, d = stack.diag.shape
    eye = np.broadcast_to(np.eye(d), (n, d, d))
    rv = unitary.apply_stacked(stack.kind, stack.v, eye, transpose=True)
    ru = unitary.apply_stacked(stack.kind, stack.u, eye, transpose=False)
    full = (rv * stack.diag[:, None, :]) @ ru
    return MatStack(stack.kind, stack.nonlinearity, stack.u, stack.v,
                    stack.diag, stack.bias, rv, ru, full)


def forward_matstack(mat: MatStack, x: np.ndarray):
    """x: (N, R, d) rows grouped by layer -> (o, y, logdet).

    logdet comes back as (N, 1) when the nonlinearity is the identity (the
    per-row term is constant within a layer) and (N, R) otherwise.
    """
    o = x @ mat.full
    o += mat.bias[:, None, :]
    nl = mat.nonlinearity
    y = nl.value(o)
    diag_ld = np.log(np.abs(mat.diag)).sum(axis=1)[:, None]
    if nl.is_identity:
        return o, y, diag_ld
    return o, y, diag_ld + nl.log_deriv(o).sum(axis=2)


def backward_matstack(mat: MatStack, x: np.ndarray, o: np.ndarray,
                      g_y: np.ndarray, g_logdet: np.ndarray):
    """Reverse pass; returns (g_u, g_v, g_diag, g_bias, g_x).

    Parameter gradients are per layer (summed over that layer's rows); g_x is
    per row. g_y may be aliased, none of the inputs are written.
    """
    nl = mat.nonlinearity
    if nl.is_identity:
        g_o = g_y
    else:
        g_o = g_y * nl.deriv(o) + g_logdet[:, :, None] * nl.curvature_ratio(o)
    g_bias = g_o.sum(axis=1)
    g_full = x.transpose(0, 2, 1) @ g_o
    g_x = g_o @ mat.full.transpose(0, 2, 1)
    scaled_rv_t = (mat.right_v * mat.diag[:, None, :]).transpose(0, 2, 1)
    g_ru = scaled_rv_t @ g_full
    g_a = g_full @ mat.right_u.transpose(0, 2, 1)
    g_rv = g_a * mat.diag[:, None, :]
    g_diag = (g_a * mat.right_v).sum(axis=1) + g_logdet.sum(axis=1)[:, None] / mat.diag
    g_u = unitary.backward_stacked(mat.kind, mat.u, mat.right_u, g_ru, transpose=False)[0]
    g_v = unitary.backward_stacked(mat.kind, mat.v, mat.right_v, g_rv, transpose=True)[0]
    return g_u, g_v, g_diag, g_bias, g_x


# ---------------------------------------------------------------------------
# single-layer operations


def _batch(layer: SvdAffine, x: np.ndarray, what: str = "input"):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != layer.dim:
        raise DimensionMismatchError((None, layer.dim), np.shape(x), what)
    return x, squeeze


def forward(layer: SvdAffine, x: np.ndarray):
    """Returns (o, y): pre-activations and outputs, one row per input row."""
    xb, squeeze = _batch(layer, x)
    stack = stack_layers([layer])
    _, o, y, _ = forward_stacked(stack, xb[None])
    if squeeze:
        return o[0, 0], y[0, 0]
    return o[0], y[0]


def logdet(layer: SvdAffine, o: np.ndarray) -> np.ndarray:
    """log|det J| per row, evaluated at pre-activations o."""
    ob, squeeze = _batch(layer, o, "pre-activations")
    base = np.log(np.abs(layer.diag)).sum()
    ld = base + layer.nonlinearity.log_deriv(ob).sum(axis=1)
    return ld[0] if squeeze else ld


def inverse(layer: SvdAffine, y: np.ndarray) -> np.ndarray:
    """x with forward(layer, x) == y; errors if y is outside sigma's range."""
    yb, squeeze = _batch(layer, y, "output")
    z = layer.nonlinearity.inverse(yb) - layer.bias
    t = unitary.apply(layer.u_param, z, transpose=True)
    t /= layer.diag
    x = unitary.apply(layer.v_param, t, transpose=False)
    return x[0] if squeeze else x


@dataclass
class LayerGrads:
    u: np.ndarray
    v: np.ndarray
    diag: np.ndarray
    bias: np.ndarray


def grad(layer: SvdAffine, x: np.ndarray, upstream_y: np.ndarray,
         upstream_logdet: np.ndarray):
    """Gradients of L = sum(upstream_y * y) + sum(upstream_logdet * logdet).

    Returns (LayerGrads, x_grad); parameter gradients are batch sums.
    """
    xb, squeeze = _batch(layer, x)
    uy, _ = _batch(layer, upstream_y, "upstream_y")
    uld = np.asarray(upstream_logdet, dtype=np.float64).reshape(-1)
    if uld.shape[0] != xb.shape[0]:
        raise DimensionMismatchError(xb.shape[0], uld.shape[0], "upstream_logdet")
    stack = stack_layers([layer])
    v, o, _, _ = forward_stacked(stack, xb[None])
    g_u, g_v, g_diag, g_bias, g_x = backward_stacked(stack, v, o, uy[None], uld[None])
    grads = LayerGrads(g_u[0], g_v[0], g_diag[0], g_bias[0])
    return grads, (g_x[0, 0] if squeeze else g_x[0])


# ---------------------------------------------------------------------------
# explicit affine maps (Gaussian pulling-down support)


def forward_matrix(layer: SvdAffine) -> np.ndarray:
    """W = U diag(d) V^T as an explicit matrix."""
    u = unitary.materialize(layer.u_param)
    v = unitary.materialize(layer.v_param)
    return (u * layer.diag[None, :]) @ v.T


def inverse_affine(layer: SvdAffine) -> tuple[np.ndarray, np.ndarray]:
    """The inverse map x = W~ z + b~ with W~ = V diag(1/d) U^T, b~ = -W~ b.

    Only meaningful for identity nonlinearity (the map must be affine).
    """
    if not layer.nonlinearity.is_identity:
        raise NotTractableError(
            f"inverse of a {layer.nonlinearity.tag} layer is not affine"
        )
    u = unitary.materialize(layer.u_param)
    v = unitary.materialize(layer.v_param)
    wtil = (v / layer.diag[None, :]) @ u.T
    btil = -wtil @ layer.bias
    return wtil, btil


def transform_gaussian(layer: SvdAffine, mean: np.ndarray, cov: np.ndarray):
    """Push N(mean, cov) through the layer's affine map (Gaussian closure).

    Requires identity nonlinearity; the result is N(W mean + b, W cov W^T).
    """
    if not layer.nonlinearity.is_identity:
        raise NotTractableError(
            f"transform node with {layer.nonlinearity.tag} nonlinearity has no "
            "Gaussian pushforward", None
        )
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    cov = np.asarray(cov, dtype=np.float64)
    if mean.shape[0] != layer.dim or cov.shape != (layer.dim, layer.dim):
        raise DimensionMismatchError(layer.dim, (mean.shape, cov.shape), "gaussian moments")
    w = forward_matrix(layer)
    mean2 = w @ mean + layer.bias
    cov2 = w @ cov @ w.T
    return mean2, 0.5 * (cov2 + cov2.T)


def project_diag(diag: np.ndarray) -> np.ndarray:
    """Push |d_i| back to the invertibility floor, preserving sign (0 -> +floor)."""
    sign = np.where(diag >= 0.0, 1.0, -1.0)
    return np.where(np.abs(diag) < DIAG_FLOOR, sign * DIAG_FLOOR, diag)
