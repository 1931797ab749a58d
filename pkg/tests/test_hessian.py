import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import trained_mlp
from hawqkit import tensor as T
from hawqkit.errors import ConvergenceError, ShapeError
from hawqkit.hessian import (BlockHessian, EigenEstimate, ProbeConfig, dense_hessian_oracle,
                             hessian_matvec, hvp, power_iteration, power_iteration_op,
                             probe_all, probe_subset, second_eigenpair, second_eigenpair_op)
from hawqkit.models import ModelSpec, build_model, forward_loss
from hawqkit.data import synth_blobs


def _quadratic(diag):
    w = T.Tensor(np.ones(len(diag)), requires_grad=True)
    d = T.Tensor(np.asarray(diag, dtype=float))
    return (lambda: T.scale(T.tsum(T.mul(d, T.mul(w, w))), 0.5)), [w]


def _op(matrix):
    return lambda v: matrix @ v


def test_quadratic_toy_hvp():
    f, params = _quadratic([2.0, 4.0])
    assert np.allclose(hvp(f, params, np.array([1.0, 0.0])), [2.0, 0.0])
    assert np.allclose(hvp(f, params, np.zeros(2)), 0.0)


def test_matvec_matches_dense_oracle(small_mlp):
    model, part, batch = small_mlp
    rng = np.random.default_rng(0)
    for b in part.names:
        H = dense_hessian_oracle(model, b, batch)
        assert np.allclose(H, H.T, atol=1e-10)
        for _ in range(3):
            v = rng.standard_normal(H.shape[0])
            hv = hessian_matvec(model, b, v, batch)
            assert np.max(np.abs(hv - H @ v)) <= 1e-8 * max(1.0, np.max(np.abs(H @ v)))


def test_matvec_matches_gradient_differences(small_mlp):
    model, part, (x, y) = small_mlp
    v = np.random.default_rng(1).standard_normal(part.block("fc0").size)
    v /= np.linalg.norm(v)
    base = model.get_flat("fc0")

    def grad_at(w):
        model.set_flat("fc0", w)
        ps = model.block_params("fc0")
        return np.concatenate([g.data.ravel() for g in T.grad(forward_loss(model, x, y), ps)])

    h = 1e-4
    fd = (grad_at(base + h * v) - grad_at(base - h * v)) / (2 * h)
    model.set_flat("fc0", base)
    hv = hessian_matvec(model, "fc0", v, (x, y))
    assert np.max(np.abs(fd - hv)) / np.max(np.abs(hv)) < 1e-4


def test_matvec_errors(small_mlp):
    model, _, batch = small_mlp
    with pytest.raises(ShapeError):
        hessian_matvec(model, "fc0", np.zeros(3), batch)
    with pytest.raises(ValueError):
        hessian_matvec(model, "fc1", np.full(27, np.nan), batch)


def test_matvec_ignores_quantizers(small_mlp):
    from hawqkit.quant import Quantizer

    model, _, batch = small_mlp
    v = np.ones(40)
    ref = hessian_matvec(model, "fc0", v, batch)
    model.weight_quant["fc0"] = Quantizer(2, 0.1)
    assert np.array_equal(hessian_matvec(model, "fc0", v, batch), ref)


def test_backprop_count(small_mlp):
    model, _, batch = small_mlp
    op = BlockHessian(model, "fc1", batch)
    est = power_iteration(model, "fc1", ProbeConfig(max_iters=5, rel_tol=1e-9), batch)
    op(np.ones(op.n))
    assert op.backprops == 2
    assert est.backprops == 2 * est.iterations


def test_power_iteration_diag():
    est = power_iteration_op(_op(np.diag([3.0, 1.0])), 2, ProbeConfig(max_iters=60, rel_tol=1e-12))
    assert est.lam == pytest.approx(3.0, abs=1e-9)
    assert abs(abs(est.eigenvector[0]) - 1) < 1e-6
    assert np.linalg.norm(est.eigenvector) == pytest.approx(1.0, abs=1e-10)


def test_power_iteration_isotropic_one_step():
    est = power_iteration_op(_op(5 * np.eye(4)), 4, ProbeConfig())
    assert est.lam == pytest.approx(5.0) and est.iterations == 1 and est.converged


def test_degenerate_block_reports_zero():
    est = power_iteration_op(_op(np.zeros((3, 3))), 3, ProbeConfig())
    assert est.degenerate and est.lam == 0.0
    with pytest.raises(ConvergenceError):
        second_eigenpair_op(_op(np.zeros((3, 3))), est, ProbeConfig())


def test_negative_dominant_eigenvalue_is_signed():
    est = power_iteration_op(_op(np.diag([-4.0, 1.0])), 2, ProbeConfig(max_iters=80, rel_tol=1e-12))
    assert est.lam == pytest.approx(-4.0, abs=1e-8)


def test_second_eigenpair_diag_and_isotropic():
    cfg = ProbeConfig(max_iters=80, rel_tol=1e-12)
    top = power_iteration_op(_op(np.diag([3.0, 1.0])), 2, cfg)
    sec = second_eigenpair_op(_op(np.diag([3.0, 1.0])), top, cfg)
    assert sec.lam == pytest.approx(1.0, abs=1e-8)
    assert abs(abs(sec.eigenvector[1]) - 1) < 1e-6
    iso = _op(5 * np.eye(3))
    top = power_iteration_op(iso, 3, cfg)
    sec = second_eigenpair_op(iso, top, cfg)
    assert sec.lam == pytest.approx(5.0)
    assert abs(top.eigenvector @ sec.eigenvector) < 1e-6


def test_second_eigenpair_requires_converged_top():
    top = EigenEstimate("b", 2.0, np.array([1.0, 0.0]), 20, residual=0.5)
    with pytest.raises(ConvergenceError):
        second_eigenpair_op(_op(np.eye(2)), top, ProbeConfig())


@given(st.integers(0, 10_000))
def test_power_iteration_on_random_spd(seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    spec = np.sort(rng.uniform(0.1, 1.0, 8))[::-1]
    spec[0] = 3.0
    A = (q * spec) @ q.T
    est = power_iteration_op(_op(A), 8, ProbeConfig(max_iters=200, rel_tol=1e-12), rng=rng)
    assert est.lam == pytest.approx(3.0, rel=1e-6)
    assert est.residual >= 0
    sec = second_eigenpair_op(_op(A), est, ProbeConfig(max_iters=400, rel_tol=1e-12), rng=rng)
    assert abs(est.eigenvector @ sec.eigenvector) < 1e-6
    assert sec.lam == pytest.approx(spec[1], rel=1e-2)


def test_trained_mlp_eigenvalues_match_oracle():
    model, ds = trained_mlp(0)
    for b in model.partition.names:
        w = np.linalg.eigvalsh(dense_hessian_oracle(model, b, ds))
        order = np.argsort(-np.abs(w))
        top = power_iteration(model, b, ProbeConfig(max_iters=50), ds)
        assert abs(top.lam - w[order[0]]) <= 5e-3 * abs(w[order[0]])
        fine = power_iteration(model, b, ProbeConfig(max_iters=500, rel_tol=1e-10), ds)
        sec = second_eigenpair(model, b, fine, ProbeConfig(max_iters=500, rel_tol=1e-10), ds)
        assert abs(sec.lam - w[order[1]]) <= 2e-2 * abs(w[order[1]])
        assert abs(sec.eigenvector @ fine.eigenvector) < 1e-6


def test_probe_subset_is_seeded_and_ordered():
    ds = synth_blobs(50, 2, 3, 0)
    a = probe_subset(ds, ProbeConfig(seed=4, probe_batch=10))
    b = probe_subset(ds, ProbeConfig(seed=4, probe_batch=10))
    assert np.array_equal(a.features, b.features) and len(a) == 10
    assert probe_subset(ds, ProbeConfig(probe_batch=500)) is ds


def test_probe_all_deterministic(small_mlp):
    model, _, _ = small_mlp
    ds = synth_blobs(60, 3, 4, 1)
    r1 = probe_all(model, ds, ProbeConfig(seed=2))
    r2 = probe_all(model, ds, ProbeConfig(seed=2))
    assert [e.lam for e in r1] == [e.lam for e in r2]
    assert [e.block for e in r1] == ["fc0", "fc1"]


def test_probe_config_validation():
    for kw in ({"max_iters": 0}, {"rel_tol": 0}, {"rel_tol": 1}, {"probe_batch": 0}):
        with pytest.raises(ValueError):
            ProbeConfig(**kw)


def test_dense_oracle_size_limit(tiny_resnet):
    model, _ = build_model(ModelSpec("mlp", [30, 20, 3]))
    with pytest.raises(ValueError):
        dense_hessian_oracle(model, "fc0", (np.zeros((2, 30)), np.zeros(2, int)))
