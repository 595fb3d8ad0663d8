import dataclasses

import numpy as np
import pytest

from blockquant.container import load_dataset, load_model
from blockquant.hessian import (EPSILONS, FlatParams, OracleBatch, fim_diag_preact, full_hessian_fd, gn_matrix,
                                gn_quadratic, hessian_from_grad, jacobian, loss_and_grad, monotone_decrease,
                                output_hessian, output_residual, verify_quadratic_forms)
from blockquant.model import LayerSpec, NetworkModel, forward
from blockquant.pipeline import oracle_batch
from blockquant.tensor import cross_entropy, finite_diff_grad, rel_error, softmax
from blockquant.utils import PreconditionError, ScaleError


def test_hessian_of_a_quadratic(rng):
    a = rng.normal(size=(6, 6))
    a = a @ a.T
    np.testing.assert_allclose(hessian_from_grad(lambda t: a @ t, rng.normal(size=6)), a, atol=1e-8)


def test_hessian_dimension_cap():
    with pytest.raises(ScaleError):
        hessian_from_grad(lambda t: t, np.zeros(201))


def test_loss_gradient_matches_finite_differences(mlp, rng):
    x = rng.normal(size=(8, 4))
    batch = OracleBatch(x, rng.integers(3, size=8))
    flat = FlatParams.from_model(mlp)
    assert flat.dim == 184
    _, grad = loss_and_grad(mlp, batch, flat=flat)
    numeric = finite_diff_grad(lambda t: loss_and_grad(mlp, batch, t, flat)[0], flat.theta)
    assert rel_error(grad, numeric) < 1e-5


def test_output_hessian_of_cross_entropy(mlp, rng):
    batch = OracleBatch(rng.normal(size=(5, 4)), rng.integers(3, size=5))
    hz = output_hessian(mlp, batch)
    assert hz.shape == (5, 3, 3)
    np.testing.assert_allclose(hz.sum(axis=2), 0.0, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(hz) > -1e-12)


def linear_regression(rng, n_in=4, n_out=2, count=16):
    layer = LayerSpec('fc', 'linear', rng.normal(size=(n_out, n_in)), np.zeros(n_out), activation='none')
    model = NetworkModel((layer,), input_shape=(n_in,), name='regression').validate()
    x = rng.normal(size=(count, n_in))
    return model, OracleBatch(x, rng.normal(size=(count, n_out)), loss='mse')


def test_gauss_newton_is_exact_for_linear_regression(rng):
    model, batch = linear_regression(rng)
    hess = full_hessian_fd(model, batch)
    np.testing.assert_allclose(gn_matrix(model, batch), hess, atol=1e-6)
    # closed form: mean of x xᵀ for each output row
    expected = np.kron(np.eye(2), batch.x.T @ batch.x / len(batch))
    np.testing.assert_allclose(hess, expected, atol=1e-6)


def test_jacobian_of_a_linear_layer(rng):
    model, batch = linear_regression(rng, count=3)
    jac = jacobian(model, batch.x)
    assert jac.shape == (3, 2, 8)
    np.testing.assert_allclose(jac[1, 0, :4], batch.x[1])
    np.testing.assert_allclose(jac[1, 0, 4:], 0.0)


def null_space_step(rng, batch, n_out=2):
    """ΔW whose rows are orthogonal to every input, so J·Δθ = 0."""
    _, _, vt = np.linalg.svd(batch.x)
    null = vt[-1]
    return np.concatenate([rng.normal() * null for _ in range(n_out)])


def test_gn_quadratic_matches_the_assembled_matrix(mlp, rng):
    batch = OracleBatch(rng.normal(size=(6, 4)), rng.integers(3, size=6))
    gn = gn_matrix(mlp, batch)
    for _ in range(5):
        d = rng.normal(size=gn.shape[0])
        assert rel_error(gn_quadratic(mlp, batch, d), d @ gn @ d) < 1e-8
    assert gn_quadratic(mlp, batch, np.zeros(gn.shape[0])) == 0.0


def test_gn_quadratic_vanishes_on_the_null_space(rng):
    model, batch = linear_regression(rng, count=3)
    d = null_space_step(rng, batch)
    assert np.linalg.norm(d) > 0.1
    assert abs(gn_quadratic(model, batch, d)) < 1e-12
    ce = OracleBatch(batch.x, rng.integers(2, size=3))
    assert abs(gn_quadratic(model, ce, d)) < 1e-12


def test_gn_quadratic_is_nonnegative(mlp, rng):
    batch = OracleBatch(rng.normal(size=(6, 4)), rng.integers(3, size=6))
    for _ in range(20):
        assert gn_quadratic(mlp, batch, rng.normal(size=184)) >= -1e-10


def test_fim_diagonal_at_the_output_layer(mlp, rng):
    x = rng.normal(size=(7, 4))
    labels = rng.integers(3, size=7)
    logits = forward(mlp, x).output.data
    onehot = np.eye(3)[labels]
    expected = np.mean(((softmax(logits) - onehot) / 7) ** 2, axis=0)
    np.testing.assert_allclose(fim_diag_preact(mlp, OracleBatch(x, labels), 'head'), expected, atol=1e-15)


def test_fim_diagonal_inside_the_network(mlp, rng):
    x, labels = rng.normal(size=(5, 4)), rng.integers(3, size=5)
    diag = fim_diag_preact(mlp, OracleBatch(x, labels), 'fc2')
    layer = mlp.layer('fc2')

    def sample_loss(bias, n):
        model = mlp.replace_layers([dataclasses.replace(other, bias=bias) if other.id == 'fc2' else other
                                    for other in mlp.layers])
        return cross_entropy(forward(model, x[n:n + 1]).output, labels[n:n + 1]).item()

    # a bias shift moves one sample's pre-activation one for one; the batch mean scales it by 1/N
    per_sample = np.stack([finite_diff_grad(lambda b, n=n: sample_loss(b, n), layer.bias) for n in range(5)]) / 5
    assert rel_error(diag, np.mean(per_sample ** 2, axis=0)) < 1e-5


def test_output_residual_sums_rows_of_one_input():
    x = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 1.0]])
    g = np.array([[0.5, -0.5], [-0.5, 0.25], [0.1, -0.1]])
    assert output_residual(x, g) == pytest.approx(0.25)


@pytest.fixture(scope="module")
def converged(fixture_dir):
    model, _ = load_model(fixture_dir / "tiny-mlp")
    data = load_dataset(fixture_dir / "data" / "mlp-oracle.bqtd")
    return model, oracle_batch(model, data)


def test_oracle_set_sits_at_a_minimum(converged, fixture_dir):
    model, batch = converged
    # every row clears the kinks, five rows per point
    assert len(batch) == len(load_dataset(fixture_dir / "data" / "mlp-oracle.bqtd"))
    assert len(batch) % 5 == 0
    _, grad = loss_and_grad(model, batch)
    assert np.max(np.abs(grad)) < 1e-4


def test_quadratic_forms_agree_at_a_minimum(converged):
    model, batch = converged
    reports = verify_quadratic_forms(model, batch, EPSILONS, seed=0)
    assert [r.epsilon for r in reports] == list(EPSILONS)
    assert monotone_decrease(reports)
    assert reports[-1].rel_linearization < 1e-2
    assert reports[0].grad_norm < 1e-4
    assert reports[0].residual_grad < 1e-3


def test_gauss_newton_matches_the_full_hessian(converged):
    model, batch = converged
    hess = full_hessian_fd(model, batch)
    gn = gn_matrix(model, batch)
    rng = np.random.default_rng(1)
    scale = np.linalg.norm(hess)
    for _ in range(20):
        d = rng.normal(size=hess.shape[0])
        d /= np.linalg.norm(d)
        assert abs(d @ hess @ d - d @ gn @ d) <= 1e-3 * scale


def test_trained_model_is_not_at_a_minimum_of_its_test_set(fixture_dir):
    model, _ = load_model(fixture_dir / "tiny-mlp")
    batch = oracle_batch(model, load_dataset(fixture_dir / "data" / "mlp-test.bqtd"))
    with pytest.raises(PreconditionError):
        verify_quadratic_forms(model, batch)


def test_unconverged_model_fails_the_precondition(fixture_dir):
    model, _ = load_model(fixture_dir / "tiny-mlp-unconverged")
    data = load_dataset(fixture_dir / "data" / "mlp-test.bqtd")
    batch = oracle_batch(model, data, margin=0.0, samples=32)
    with pytest.raises(PreconditionError) as raised:
        verify_quadratic_forms(model, batch)
    assert raised.value.grad_norm >= 1e-4
    assert raised.value.exit_code == 5
