"""Parametrized rotation matrices and their gradients.

Two parametrizations of the special orthogonal group are provided:

* Givens: theta in R^{d(d-1)/2}, one angle per coordinate pair (r, s),
  1 <= r < s <= d, applied as a fixed sequence of planar rotations.
  theta = 0 is exactly the identity.
* Householder: d reflection vectors y_i, U = P_d ... P_1 with
  P_i = I - 2 y_i y_i^T / ||y_i||^2. Overparametrized (d^2 numbers);
  reflections are scale-invariant in each y_i.

Applying a parametrized matrix to a batch of vectors never materializes
the matrix: Givens costs 2d(d-1) multiplications per vector, Householder
2d^2. Gradients walk the operation sequence backwards, recomputing the
intermediate states from the output, so memory stays O(d) per vector
instead of O(d^2).

Internally every kernel is "stacked": it takes I independent parameter
sets applied to I inputs of shape (B, d) at once, which is what the
circuit evaluator batches over. The public functions wrap the I=1 case.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateReflectionError, DimensionMismatchError, NotOrthogonalError

NORM_FLOOR = 1e-12  # minimum Householder vector norm

# ---------------------------------------------------------------------------
# instrumented operation counting (multiplications/additions per kernel call)

@dataclass
class OpCount:
    mults: int = 0
    adds: int = 0


_COUNTERS: list[OpCount] = []


@contextmanager
def count_ops():
    """Count floating-point multiplications/additions of apply kernels.

    Parameter-side precomputation (cos/sin of angles, scaled reflection
    vectors) is not counted; the tally is the per-vector inference cost.
    """
    c = OpCount()
    _COUNTERS.append(c)
    try:
        yield c
    finally:
        _COUNTERS.remove(c)


def _tally(mults: int, adds: int) -> None:
    if _COUNTERS:
        for c in _COUNTERS:
            c.mults += mults
            c.adds += adds


# ---------------------------------------------------------------------------
# parameter containers

def canonical_pairs(dim: int) -> list[tuple[int, int]]:
    """Coordinate pairs (r, s) in canonical order: s ascending, then r."""
    return [(r, s) for s in range(1, dim) for r in range(s)]


def theta_size(dim: int) -> int:
    return dim * (dim - 1) // 2


@dataclass
class GivensParam:
    dim: int
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.theta.shape[0] != theta_size(self.dim):
            raise DimensionMismatchError(theta_size(self.dim), self.theta.shape[0], "theta")

    @property
    def kind(self) -> str:
        return "givens"


@dataclass
class HouseholderParam:
    dim: int
    vectors: np.ndarray  # row i is the i-th reflection vector

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64).reshape(self.dim, self.dim)
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        norms = np.sqrt((self.vectors**2).sum(axis=1))
        if np.any(norms < NORM_FLOOR):
            bad = int(np.argmin(norms))
            raise DegenerateReflectionError(
                f"reflection vector {bad} has norm {norms[bad]:.3e} < {NORM_FLOOR}"
            )

    @property
    def kind(self) -> str:
        return "householder"


def random_givens(dim: int, rng: np.random.Generator, std: float = 0.01) -> GivensParam:
    """Near-identity draw: small angles around theta = 0."""
    return GivensParam(dim, rng.normal(0.0, std, size=theta_size(dim)))


def random_householder(dim: int, rng: np.random.Generator, std: float = 0.01) -> HouseholderParam:
    for _ in range(100):
        vecs = rng.normal(0.0, std, size=(dim, dim))
        if np.all(np.sqrt((vecs**2).sum(axis=1)) >= NORM_FLOOR):
            return HouseholderParam(dim, vecs)
    raise DegenerateReflectionError("could not draw reflection vectors above the norm floor")


# ---------------------------------------------------------------------------
# stacked Givens kernels
#
# theta: (I, K); x: (I, B, d). The rotation for pair (r, s) with angle t maps
#   x_r <- cos(t) x_r + sin(t) x_s
#   x_s <- -sin(t) x_r + cos(t) x_s
# transpose=True applies U(theta)^T: reversed pair order, negated angles.


def _givens_schedule(dim: int, transpose: bool):
    pairs = canonical_pairs(dim)
    sched = [(k, r, s, 1.0) for k, (r, s) in enumerate(pairs)]
    if transpose:
        sched = [(k, r, s, -1.0) for (k, r, s, _) in reversed(sched)]
    return sched


def _givens_apply_stacked(theta: np.ndarray, x: np.ndarray, transpose: bool) -> np.ndarray:
    inst, batch, dim = x.shape
    out = x.copy()
    if dim == 1:
        return out
    cos = np.cos(theta)
    sin = np.sin(theta)
    rows = inst * batch
    for k, r, s, sign in _givens_schedule(dim, transpose):
        c = cos[:, k, None]
        s_ = sign * sin[:, k, None]
        _rotate_pair(out, r, s, c, s_)
        _tally(4 * rows, 2 * rows)
    return out


def _rotate_pair(buf: np.ndarray, r: int, s: int, c: np.ndarray, s_: np.ndarray) -> None:
    # both new values must be formed before writing back (slices are views)
    vr = buf[:, :, r]
    vs = buf[:, :, s]
    nr = c * vr + s_ * vs
    ns = c * vs - s_ * vr
    buf[:, :, r] = nr
    buf[:, :, s] = ns


def _givens_backward_stacked(
    theta: np.ndarray, out: np.ndarray, cotangent: np.ndarray, transpose: bool
):
    """Reverse pass from the output state; returns (theta_grad, x_cot, x).

    At each stage the current state is the rotation's output, so the angle
    gradient needs no stored forward tape: d/dphi = g_r * out_s - g_s * out_r,
    after which both state and cotangent are rotated back by -phi.
    """
    inst, batch, dim = out.shape
    tgrad = np.zeros_like(theta)
    cur = out.copy()
    cot = cotangent.copy()
    if dim == 1:
        return tgrad, cot, cur
    cos = np.cos(theta)
    sin = np.sin(theta)
    for k, r, s, sign in reversed(_givens_schedule(dim, transpose)):
        dphi = (cot[:, :, r] * cur[:, :, s] - cot[:, :, s] * cur[:, :, r]).sum(axis=1)
        tgrad[:, k] += sign * dphi
        c = cos[:, k, None]
        ns = -sign * sin[:, k, None]  # rotate back by -phi
        _rotate_pair(cur, r, s, c, ns)
        _rotate_pair(cot, r, s, c, ns)
    return tgrad, cot, cur


# ---------------------------------------------------------------------------
# stacked Householder kernels
#
# vectors: (I, d, d); x: (I, B, d). U x applies P_1 first, then P_2, ...
# (U = P_d ... P_1); U^T x applies them in reverse. Each P is symmetric and
# involutive, which the backward pass uses to recover inputs from outputs.


def _hh_order(dim: int, transpose: bool):
    order = range(dim)
    return list(reversed(order)) if transpose else list(order)


def _hh_scaled(vectors: np.ndarray):
    """Per-reflection scale t_i = 2/||y_i||^2 and scaled vectors t_i y_i."""
    nrm2 = (vectors**2).sum(axis=2)  # (I, d)
    if np.any(nrm2 < NORM_FLOOR**2):
        raise DegenerateReflectionError("reflection vector norm below 1e-12 during apply")
    t = 2.0 / nrm2
    return t, t[:, :, None] * vectors


def _householder_apply_stacked(vectors: np.ndarray, x: np.ndarray, transpose: bool) -> np.ndarray:
    inst, batch, dim = x.shape
    out = x.copy()
    _, scaled = _hh_scaled(vectors)
    rows = inst * batch
    for i in _hh_order(dim, transpose):
        y = vectors[:, i, :]
        a = np.einsum("ibd,id->ib", out, y)
        out -= a[:, :, None] * scaled[:, i, None, :]
        _tally(2 * dim * rows, (2 * dim - 1) * rows)
    return out


def _householder_backward_stacked(
    vectors: np.ndarray, out: np.ndarray, cotangent: np.ndarray, transpose: bool
):
    """Reverse pass from the output; returns (vector_grads, x_cot, x).

    Inputs are recovered by re-applying each reflection to its own output
    (P_i is an involution), so nothing from the forward pass is stored.
    """
    inst, batch, dim = out.shape
    vgrad = np.zeros_like(vectors)
    t_all, scaled = _hh_scaled(vectors)
    cur = out.copy()
    cot = cotangent.copy()
    for i in reversed(_hh_order(dim, transpose)):
        y = vectors[:, i, :]
        ty = scaled[:, i, :]
        t = t_all[:, i]
        # recover the reflection's input
        a_out = np.einsum("ibd,id->ib", cur, y)
        xin = cur - a_out[:, :, None] * ty[:, None, :]
        a = np.einsum("ibd,id->ib", xin, y)      # y^T x per row
        gy = np.einsum("ibd,id->ib", cot, y)     # g^T y per row
        # dL/dy = sum_B [ t^2 (y^T x)(g^T y) y - t (g^T y) x - t (y^T x) g ]
        coef = (a * gy).sum(axis=1)
        vgrad[:, i, :] += (t**2 * coef)[:, None] * y
        vgrad[:, i, :] -= t[:, None] * np.einsum("ib,ibd->id", gy, xin)
        vgrad[:, i, :] -= t[:, None] * np.einsum("ib,ibd->id", a, cot)
        # propagate cotangent through the symmetric P_i
        gdot = np.einsum("ibd,id->ib", cot, y)
        cot = cot - gdot[:, :, None] * ty[:, None, :]
        cur = xin
    return vgrad, cot, cur


# ---------------------------------------------------------------------------
# dispatch over the two parametrizations (used by the affine layer)


def param_arrays(param) -> np.ndarray:
    return param.theta if param.kind == "givens" else param.vectors


def set_param_array(param, arr: np.ndarray) -> None:
    """Rebind the parameter storage (used to alias layers into shared buffers)."""
    if param.kind == "givens":
        param.theta = arr
    else:
        param.vectors = arr


def apply_stacked(kind: str, params: np.ndarray, x: np.ndarray, transpose: bool = False):
    if kind == "givens":
        return _givens_apply_stacked(params, x, transpose)
    return _householder_apply_stacked(params, x, transpose)


def backward_stacked(kind: str, params: np.ndarray, out: np.ndarray, cot: np.ndarray,
                     transpose: bool = False):
    if kind == "givens":
        return _givens_backward_stacked(params, out, cot, transpose)
    return _householder_backward_stacked(params, out, cot, transpose)


# ---------------------------------------------------------------------------
# public single-parameter operations


def _as_batch(x: np.ndarray, dim: int):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionMismatchError((None, dim), x.shape, "vector batch")
    return x, squeeze


def givens_apply(param: GivensParam, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    """U(theta) @ x for each row of x (U(theta)^T with transpose=True)."""
    xb, squeeze = _as_batch(x, param.dim)
    out = _givens_apply_stacked(param.theta[None, :], xb[None], transpose)[0]
    return out[0] if squeeze else out


def householder_apply(param: HouseholderParam, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    xb, squeeze = _as_batch(x, param.dim)
    out = _householder_apply_stacked(param.vectors[None], xb[None], transpose)[0]
    return out[0] if squeeze else out


def apply(param, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    if param.kind == "givens":
        return givens_apply(param, x, transpose)
    return householder_apply(param, x, transpose)


def givens_materialize(param: GivensParam) -> np.ndarray:
    """Explicit d x d rotation matrix (columns are U e_j)."""
    eye = np.eye(param.dim)
    return givens_apply(param, eye).T


def householder_materialize(param: HouseholderParam) -> np.ndarray:
    eye = np.eye(param.dim)
    return householder_apply(param, eye).T


def materialize(param) -> np.ndarray:
    if param.kind == "givens":
        return givens_materialize(param)
    return householder_materialize(param)


def givens_grad(param: GivensParam, x: np.ndarray, upstream: np.ndarray,
                transpose: bool = False):
    """Gradients of L = sum(upstream * (U x)) w.r.t. theta and x.

    theta gradients are summed over the batch; x gradients are per row.
    """
    xb, squeeze = _as_batch(x, param.dim)
    up, _ = _as_batch(upstream, param.dim)
    if up.shape != xb.shape:
        raise DimensionMismatchError(xb.shape, up.shape, "upstream")
    out = _givens_apply_stacked(param.theta[None, :], xb[None], transpose)
    tgrad, xcot, _ = _givens_backward_stacked(param.theta[None, :], out, up[None], transpose)
    xg = xcot[0]
    return tgrad[0], (xg[0] if squeeze else xg)


def householder_grad(param: HouseholderParam, x: np.ndarray, upstream: np.ndarray,
                     transpose: bool = False):
    """Gradients of L = sum(upstream * (U x)) w.r.t. the reflection vectors and x."""
    xb, squeeze = _as_batch(x, param.dim)
    up, _ = _as_batch(upstream, param.dim)
    if up.shape != xb.shape:
        raise DimensionMismatchError(xb.shape, up.shape, "upstream")
    out = _householder_apply_stacked(param.vectors[None], xb[None], transpose)
    vgrad, xcot, _ = _householder_backward_stacked(param.vectors[None], out, up[None], transpose)
    xg = xcot[0]
    return vgrad[0], (xg[0] if squeeze else xg)


def grad(param, x, upstream, transpose: bool = False):
    if param.kind == "givens":
        return givens_grad(param, x, upstream, transpose)
    return householder_grad(param, x, upstream, transpose)


# ---------------------------------------------------------------------------
# Givens decomposition (rotation matrix -> canonical angles)


def givens_decompose(matrix: np.ndarray, tol: float = 1e-8) -> GivensParam:
    """Recover canonical angles with givens_materialize(result) == matrix.

    Works column by column from the last: the trailing column of the
    current block is a unit vector whose spherical coordinates give the
    angles theta_{., s}; rotating by their inverses reduces the block to
    size s. Requires an orthogonal input with determinant +1.
    """
    u = np.asarray(matrix, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise DimensionMismatchError("square matrix", u.shape, "matrix")
    dim = u.shape[0]
    err = np.abs(u.T @ u - np.eye(dim)).max()
    if err > tol:
        raise NotOrthogonalError(f"max |U^T U - I| = {err:.3e} exceeds {tol:.1e}")
    if np.linalg.det(u) <= 0:
        raise NotOrthogonalError("determinant is not positive; not a rotation")

    theta = np.zeros(theta_size(dim))
    pairs = canonical_pairs(dim)
    index = {p: k for k, p in enumerate(pairs)}
    m = u.copy()
    for s in range(dim - 1, 0, -1):
        col = m[: s + 1, s]
        # spherical coordinates: col_r = sin(t_r) prod_{j<r} cos(t_j),
        # col_s = prod_{j<s} cos(t_j); the last angle carries the sign.
        angles = np.zeros(s)
        for r in range(s - 1):
            tail = np.sqrt((col[r + 1 :] ** 2).sum())
            angles[r] = np.arctan2(col[r], tail)
        angles[s - 1] = np.arctan2(col[s - 1], col[s])
        for r in range(s):
            theta[index[(r, s)]] = angles[r]
        # undo this column's rotations: rows (r, s) by -angles[r], r descending
        for r in range(s - 1, -1, -1):
            c = np.cos(angles[r])
            s_ = np.sin(angles[r])
            row_r = m[r, :].copy()
            row_s = m[s, :].copy()
            m[r, :] = c * row_r - s_ * row_s
            m[s, :] = s_ * row_r + c * row_s
    return GivensParam(dim, theta)
