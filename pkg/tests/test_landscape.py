import numpy as np
import pytest

from conftest import trained_mlp
from hawqkit.hessian import ProbeConfig, power_iteration, second_eigenpair
from hawqkit.landscape import (DEFAULT_GRID, curvature_along, landscape_1d, landscape_2d,
                               to_csv)
from hawqkit.models import ModelSpec, build_model, forward_loss


def _snapshot(model):
    return {k: v.data.copy() for k, v in model.params.items()}


def test_zero_perturbation_is_baseline_loss(small_mlp):
    model, _, (x, y) = small_mlp
    base = forward_loss(model, x, y).item()
    v = np.random.default_rng(0).standard_normal(40)
    (s,) = landscape_1d(model, "fc0", v, (x, y), [0.0])
    assert s.loss == base and s.eps2 == 0.0
    u = np.zeros(40)
    u[0], v2 = 1.0, np.zeros(40)
    v2[1] = 1.0
    out = landscape_2d(model, "fc0", u, v2, (x, y), [-0.1, 0.0, 0.1])
    assert [r.loss for r in out if r.eps1 == 0 and r.eps2 == 0] == [base]
    assert len(out) == 9 and (out[1].eps1, out[1].eps2) == (-0.1, 0.0)


def test_parameters_restored_bit_for_bit(small_mlp):
    model, _, batch = small_mlp
    before = _snapshot(model)
    v = np.ones(27)
    landscape_1d(model, "fc1", v, batch)
    landscape_2d(model, "fc1", np.eye(27)[0], np.eye(27)[5], batch, [-1.0, 1.0])
    assert all(np.array_equal(before[k], model.params[k].data) for k in before)


def test_restored_after_error(small_mlp):
    model, _, (x, y) = small_mlp
    before = _snapshot(model)
    with pytest.raises(Exception):
        landscape_1d(model, "fc0", np.ones(40), (x, y[:3]), [0.5])
    assert all(np.array_equal(before[k], model.params[k].data) for k in before)


def test_even_part_is_half_lambda_eps_squared():
    # the symmetric average cancels the gradient term: ½(L(h) + L(-h)) - L(0) ≈ ½λh²
    model, ds = trained_mlp(4)
    top = power_iteration(model, "fc1", ProbeConfig(max_iters=300, rel_tol=1e-12), ds)
    for h in (1e-3, 1e-2):
        lo, mid, hi = (s.loss for s in landscape_1d(model, "fc1", top.eigenvector,
                                                    (ds.features, ds.labels), [-h, 0.0, h]))
        assert 0.5 * (lo + hi) - mid == pytest.approx(0.5 * top.lam * h * h, rel=2e-2)


def test_curvature_matches_lambda_on_trained_mlp():
    model, ds = trained_mlp(5)
    batch = (ds.features, ds.labels)
    for b in model.partition.names:
        top = power_iteration(model, b, ProbeConfig(), ds)
        assert curvature_along(model, b, top.eigenvector, batch, h=1e-3) == \
            pytest.approx(top.lam, rel=0.05)
        assert curvature_along(model, b, top.eigenvector, batch) == \
            pytest.approx(top.lam, rel=0.05)


def test_second_direction_surface():
    model, ds = trained_mlp(6)
    cfg = ProbeConfig(max_iters=400, rel_tol=1e-12)
    top = power_iteration(model, "fc0", cfg, ds)
    sec = second_eigenpair(model, "fc0", top, cfg, ds)
    batch = (ds.features, ds.labels)
    out = landscape_2d(model, "fc0", top.eigenvector, sec.eigenvector, batch, [-1e-3, 0.0, 1e-3])
    base = out[4].loss
    even2 = 0.5 * (out[3].loss + out[5].loss) - base   # (0, ±h)
    assert even2 == pytest.approx(0.5 * sec.lam * 1e-6, rel=5e-2)
    even1 = 0.5 * (out[1].loss + out[7].loss) - base   # (±h, 0)
    assert even1 == pytest.approx(0.5 * top.lam * 1e-6, rel=5e-2)


def test_errors(small_mlp):
    model, _, batch = small_mlp
    with pytest.raises(ValueError):
        landscape_1d(model, "fc0", np.ones(40), batch, [])
    with pytest.raises(ValueError):
        landscape_1d(model, "fc0", np.zeros(40), batch)
    with pytest.raises(ValueError):
        landscape_2d(model, "fc0", np.ones(40), np.ones(40), batch)
    from hawqkit.errors import ShapeError
    with pytest.raises(ShapeError):
        landscape_1d(model, "fc0", np.ones(3), batch)
    with pytest.raises(ValueError):
        curvature_along(model, "fc0", np.ones(40), batch, h=0.0)


def test_unit_caching_matches_full_forward(tiny_resnet):
    model, part = build_model(tiny_resnet, seed=1)
    rng = np.random.default_rng(0)
    x, y = rng.random((6, 1, 6, 6)), rng.integers(0, 3, 6)
    for b in part.names:
        v = rng.standard_normal(part.block(b).size)
        v /= np.linalg.norm(v)
        (s,) = landscape_1d(model, b, v, (x, y), [0.3])
        base = model.get_flat(b)
        model.set_flat(b, base + 0.3 * v)
        ref = forward_loss(model, x, y).item()
        model.set_flat(b, base)
        assert s.loss == ref


def test_default_grid_and_csv(small_mlp):
    assert DEFAULT_GRID.size == 41 and DEFAULT_GRID[20] == 0.0
    model, _, batch = small_mlp
    text = to_csv(landscape_1d(model, "fc1", np.ones(27), batch, [0.0, 0.25]))
    lines = text.splitlines()
    assert lines[0] == "block,eps1,eps2,loss" and lines[1].startswith("fc1,0.0,0.0,")
