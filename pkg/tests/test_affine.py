import numpy as np
import pytest

from conftest import central_diff, rel_err
from sptn import affine, unitary
from sptn.affine import Nonlinearity
from sptn.errors import (
    DimensionMismatchError,
    NonInvertibleError,
    NotTractableError,
    OutsideRangeError,
)

NLS = [Nonlinearity.identity(), Nonlinearity.leaky_relu(0.01), Nonlinearity.selu()]


def sample_layer(dim, rng, kind="givens", nl=None, spread=True):
    layer = affine.random_layer(dim, rng, kind=kind, nonlinearity=nl,
                                angle_std=0.8 if spread else 0.01, bias_std=1.0)
    layer.diag[:] = rng.uniform(0.5, 2.0, size=dim) * rng.choice([-1.0, 1.0], size=dim)
    return layer


@pytest.mark.parametrize("kind", ["givens", "householder"])
@pytest.mark.parametrize("nl", NLS, ids=[n.tag for n in NLS])
def test_forward_inverse_round_trip(kind, nl, rng):
    layer = sample_layer(4, rng, kind=kind, nl=nl)
    x = rng.normal(size=(50, 4))
    _, y = affine.forward(layer, x)
    back = affine.inverse(layer, y)
    assert np.abs(back - x).max() < 1e-10


def test_forward_matches_explicit_matrix(rng):
    layer = sample_layer(3, rng)
    w = affine.forward_matrix(layer)
    x = rng.normal(size=(8, 3))
    o, y = affine.forward(layer, x)
    assert np.abs(o - (x @ w.T + layer.bias)).max() < 1e-12
    assert np.abs(y - o).max() == 0.0  # identity nonlinearity


@pytest.mark.parametrize("nl", NLS, ids=[n.tag for n in NLS])
def test_logdet_matches_numerical_jacobian(nl, rng):
    dim = 3
    layer = sample_layer(dim, rng, nl=nl)
    for _ in range(5):
        x = rng.normal(size=dim)
        jac = np.empty((dim, dim))
        eps = 1e-6
        for j in range(dim):
            hi = x.copy()
            lo = x.copy()
            hi[j] += eps
            lo[j] -= eps
            jac[:, j] = (affine.forward(layer, hi)[1] - affine.forward(layer, lo)[1]) / (2 * eps)
        o, _ = affine.forward(layer, x)
        ld = affine.logdet(layer, o)
        assert abs(np.log(abs(np.linalg.det(jac))) - float(ld)) < 1e-5


@pytest.mark.parametrize("kind", ["givens", "householder"])
@pytest.mark.parametrize("nl", NLS, ids=[n.tag for n in NLS])
def test_grad_matches_finite_differences(kind, nl, rng):
    dim = 3
    # unit-scale parameters keep the finite-difference oracle well conditioned
    layer = sample_layer(dim, rng, kind=kind, nl=nl, spread=True)
    x = rng.normal(size=(6, dim)) * 0.7
    uy = rng.normal(size=(6, dim))
    uld = rng.normal(size=6)
    grads, gx = affine.grad(layer, x, uy, uld)

    def pack():
        return np.concatenate([
            unitary.param_arrays(layer.u_param).ravel(),
            unitary.param_arrays(layer.v_param).ravel(),
            layer.diag, layer.bias, x.ravel()])

    def loss(flat):
        sizes = [unitary.param_arrays(layer.u_param).size,
                 unitary.param_arrays(layer.v_param).size, dim, dim]
        pieces = np.split(flat, np.cumsum(sizes))
        lay = layer.copy()
        unitary.param_arrays(lay.u_param)[...] = pieces[0].reshape(
            unitary.param_arrays(lay.u_param).shape)
        unitary.param_arrays(lay.v_param)[...] = pieces[1].reshape(
            unitary.param_arrays(lay.v_param).shape)
        lay.diag[:] = pieces[2]
        lay.bias[:] = pieces[3]
        xx = pieces[4].reshape(x.shape)
        o, y = affine.forward(lay, xx)
        return float((uy * y).sum() + (uld * affine.logdet(lay, o)).sum())

    got = np.concatenate([grads.u.ravel(), grads.v.ravel(), grads.diag,
                          grads.bias, gx.ravel()])
    assert rel_err(got, central_diff(loss, pack())) < 1e-4


def test_stacked_matches_single_layer(rng):
    dim, n, batch = 3, 4, 7
    layers = [sample_layer(dim, rng, nl=Nonlinearity.selu()) for _ in range(n)]
    stack = affine.stack_layers(layers)
    x = rng.normal(size=(n, batch, dim))
    v, o, y, ld = affine.forward_stacked(stack, x)
    for i, layer in enumerate(layers):
        oi, yi = affine.forward(layer, x[i])
        assert np.abs(o[i] - oi).max() < 1e-12
        assert np.abs(y[i] - yi).max() < 1e-12
        assert np.abs(ld[i] - affine.logdet(layer, oi)).max() < 1e-12


@pytest.mark.parametrize("kind", ["givens", "householder"])
@pytest.mark.parametrize("nl", NLS, ids=[n.tag for n in NLS])
def test_materialized_path_matches_elementwise_path(kind, nl, rng):
    """The batched-matmul route must agree with the rotation-kernel route."""
    dim, n, rows = 3, 4, 11
    layers = [sample_layer(dim, rng, kind=kind, nl=nl) for _ in range(n)]
    stack = affine.stack_layers(layers)
    x = rng.normal(size=(n, rows, dim))
    v, o, y, ld = affine.forward_stacked(stack, x)
    mat = affine.materialize_stack(stack)
    o2, y2, ld2 = affine.forward_matstack(mat, x)
    assert np.abs(o2 - o).max() < 1e-12
    assert np.abs(y2 - y).max() < 1e-12
    assert np.abs(np.broadcast_to(ld2, ld.shape) - ld).max() < 1e-12

    g_y = rng.normal(size=y.shape)
    g_ld = rng.normal(size=ld.shape)
    ref = affine.backward_stacked(stack, v, o, g_y, g_ld)
    got = affine.backward_matstack(mat, x, o2, g_y, np.ascontiguousarray(g_ld))
    for a, b in zip(got, ref):
        assert rel_err(a, b) < 1e-10


def test_inverse_affine_is_the_matrix_inverse(rng):
    layer = sample_layer(4, rng)
    w = affine.forward_matrix(layer)
    wtil, btil = affine.inverse_affine(layer)
    assert np.abs(wtil @ w - np.eye(4)).max() < 1e-10
    assert np.abs(wtil @ layer.bias + btil).max() < 1e-12
    with pytest.raises(NotTractableError):
        affine.inverse_affine(sample_layer(4, rng, nl=Nonlinearity.selu()))


def test_transform_gaussian_matches_basis_probe(rng):
    # recover W by probing basis vectors, then push the moments through it
    dim = 3
    layer = sample_layer(dim, rng)
    w = np.stack([affine.forward(layer, e)[1] - layer.bias for e in np.eye(dim)], axis=1)
    mean = rng.normal(size=dim)
    cov_half = rng.normal(size=(dim, dim))
    cov = cov_half @ cov_half.T + np.eye(dim)
    m2, c2 = affine.transform_gaussian(layer, mean, cov)
    assert np.abs(m2 - (w @ mean + layer.bias)).max() < 1e-10
    assert np.abs(c2 - w @ cov @ w.T).max() < 1e-9
    assert np.abs(c2 - c2.T).max() == 0.0


def test_selu_inverse_range_error(rng):
    layer = affine.identity_layer(2, Nonlinearity.selu())
    lo = -affine.SELU_LAMBDA * affine.SELU_ALPHA
    with pytest.raises(OutsideRangeError):
        affine.inverse(layer, np.array([[0.0, lo - 0.5]]))
    assert not Nonlinearity.selu().in_range(np.array([lo - 0.5]))[0]


def test_selu_constants():
    nl = Nonlinearity.selu()
    assert nl.value(np.array([1.0]))[0] == pytest.approx(1.0507)
    assert nl.value(np.array([-30.0]))[0] == pytest.approx(-1.0507 * 1.6733, rel=1e-6)


def test_leaky_relu_needs_positive_slope():
    with pytest.raises(ValueError):
        Nonlinearity.leaky_relu(0.0)
    nl = Nonlinearity.leaky_relu(0.2)
    assert nl.value(np.array([-2.0]))[0] == pytest.approx(-0.4)


def test_noninvertible_diag_rejected(rng):
    u = unitary.random_givens(2, rng)
    v = unitary.random_givens(2, rng)
    with pytest.raises(NonInvertibleError):
        affine.SvdAffine(2, u, v, np.array([1.0, 1e-7]), np.zeros(2),
                         Nonlinearity.identity())


def test_project_diag():
    d = np.array([2.0, 1e-9, -1e-9, -3.0, 0.0])
    out = affine.project_diag(d)
    assert out[0] == 2.0 and out[3] == -3.0
    assert out[1] == affine.DIAG_FLOOR
    assert out[2] == -affine.DIAG_FLOOR
    assert out[4] == affine.DIAG_FLOOR  # zero gets the positive floor


def test_identity_layer_requires_givens():
    layer = affine.identity_layer(3)
    x = np.arange(3.0)
    assert np.abs(affine.forward(layer, x)[1] - x).max() == 0.0
    with pytest.raises(ValueError):
        affine.identity_layer(3, kind="householder")
    with pytest.raises(ValueError):
        affine.random_layer(3, np.random.default_rng(0), kind="fourier")


def test_layer_shape_validation(rng):
    layer = sample_layer(3, rng)
    with pytest.raises(DimensionMismatchError):
        affine.forward(layer, np.zeros((2, 4)))
    with pytest.raises(DimensionMismatchError):
        affine.SvdAffine(3, unitary.random_givens(3, rng), unitary.random_givens(3, rng),
                         np.ones(2), np.zeros(3), Nonlinearity.identity())


def test_nonlinearity_dict_round_trip():
    for nl in NLS:
        assert Nonlinearity.from_dict(nl.to_dict()) == nl
