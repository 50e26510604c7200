import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtss.autodiff import Graph, ShapeError, grad_check
from mtss.data import stream
from mtss.trunk import (
    AlphaMatrix, TrunkConfig, alpha_row, head_input, init_trunk, lasso_combine, lasso_penalty, normalize_rows,
    register, sparsity_profile, trunk_forward, trunk_units,
)

CFG = TrunkConfig(units=4, width=3, dilate_from=2)


def _images(n=2, size=8, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size))


def test_unit_outputs_share_shape_and_are_finite():
    params = init_trunk(CFG, stream(0))
    units = trunk_units(params, CFG, _images())
    assert len(units) == CFG.units
    assert all(u.shape == (2, 3, 4, 4) for u in units)
    assert all(np.isfinite(u).all() for u in units)


def test_zero_residual_branches_give_stem_output():
    cfg = TrunkConfig(units=3, width=3, zero_init_residual=True)
    params = init_trunk(cfg, stream(1))
    units = trunk_units(params, cfg, _images())
    g = Graph(np.float64)
    nodes = {n: g.const(params[n]) for n in cfg.param_names()}
    from mtss.trunk import stem_forward
    stem = g.value(stem_forward(g, g.const(_images()), nodes, cfg))
    for u in units:
        np.testing.assert_array_equal(u, stem)


def test_single_unit_trunk():
    cfg = TrunkConfig(units=1, width=2)
    assert len(trunk_units(init_trunk(cfg, stream(2)), cfg, _images())) == 1


def test_perturbing_unit_k_only_changes_later_outputs():
    params = init_trunk(CFG, stream(3))
    base = trunk_units(params, CFG, _images())
    for k in range(CFG.units):
        p = dict(params)
        p[f"trunk.unit{k}.b1"] = p[f"trunk.unit{k}.b1"] + 0.5
        out = trunk_units(p, CFG, _images())
        for j in range(CFG.units):
            same = np.array_equal(out[j], base[j])
            assert same == (j < k), (k, j)


def test_input_shape_checked():
    g = Graph(np.float64)
    params = init_trunk(CFG, stream(0))
    nodes = register(g, params, CFG.param_names())
    with pytest.raises(ShapeError):
        trunk_forward(g, g.const(np.zeros((1, 2, 8, 8))), nodes, CFG)


def test_dilation_schedule():
    assert [CFG.dilation(m) for m in range(4)] == [1, 1, 2, 2]


def _units_graph(m=4, seed=0):
    g = Graph(np.float64)
    rng = np.random.default_rng(seed)
    units = [g.const(rng.normal(size=(2, 3, 4, 4))) for _ in range(m)]
    return g, units


def test_basis_row_selects_first_unit():
    g, units = _units_graph()
    out = lasso_combine(g, g.const([1.0, 0.0, 0.0, 0.0]), units)
    np.testing.assert_array_equal(g.value(out), g.value(units[0]))


def test_three_four_row():
    g, units = _units_graph()
    a = alpha_row(g, g.const([3.0, 4.0, 0.0, 0.0]))
    np.testing.assert_allclose(g.value(a), [0.6, 0.8, 0.0, 0.0], atol=1e-15)
    out = g.value(lasso_combine(g, a, units))
    np.testing.assert_allclose(out, 0.6 * g.value(units[0]) + 0.8 * g.value(units[1]), atol=1e-14)


def test_length_mismatch():
    g, units = _units_graph()
    with pytest.raises(ShapeError):
        lasso_combine(g, g.const([1.0, 0.0]), units)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-5, 5)).filter(lambda b: np.linalg.norm(b) > 1e-3),
       st.floats(1e-3, 1e3))
def test_positive_rescale_invariance(beta, c):
    g, units = _units_graph()
    a = g.value(lasso_combine(g, alpha_row(g, g.const(beta)), units))
    b = g.value(lasso_combine(g, alpha_row(g, g.const(beta * c)), units))
    assert np.abs(a - b).max() <= 1e-12 * max(np.abs(a).max(), 1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6,), elements=st.floats(-10, 10)).filter(lambda b: np.linalg.norm(b) > 1e-6))
def test_normalized_rows_and_penalty_bounds(beta):
    a = normalize_rows(beta)
    assert abs(np.sum(a * a) - 1.0) < 1e-9
    assert np.abs(normalize_rows(a) - a).max() <= 1e-15
    pen = AlphaMatrix(["t"], beta[None, :]).penalty(1.0)
    assert 1.0 - 1e-12 <= pen <= np.sqrt(6) + 1e-12


def test_penalty_arithmetic():
    am = AlphaMatrix(["t"], [[0.6, 0.8]])
    assert am.penalty(0.0) == 0.0
    assert am.penalty(1.0) == pytest.approx(1.4)
    with pytest.raises(ValueError):
        am.penalty(-1.0)
    g = Graph(np.float64)
    assert g.value(lasso_penalty(g, [g.const([0.6, 0.8])], 1.0)).item() == pytest.approx(1.4)
    with pytest.raises(ValueError):
        lasso_penalty(g, [], -0.1)


def test_combined_loss_gradient_wrt_beta_passes_check():
    g, units = _units_graph(seed=5)
    beta = g.param("beta", [0.3, -0.7, 0.2, 0.9])
    a = alpha_row(g, beta)
    y = lasso_combine(g, a, units)
    w = g.const(np.random.default_rng(6).normal(size=g.shape(y)))
    loss = g.apply("add", [g.apply("reduce-sum", [g.apply("multiply", [y, w])]), lasso_penalty(g, [a], 0.1)])
    assert grad_check(g, loss).passed


def test_lasso_off_gives_last_unit():
    g, units = _units_graph()
    assert head_input(g, units, None) == units[-1]


def test_sparsity_profile_cases():
    m = 5
    basis = AlphaMatrix(["a"], [[0, 0, 1.0, 0, 0]])
    prof = sparsity_profile(basis, 0.01)
    assert prof.fraction_below["a"] == pytest.approx((m - 1) / m)
    uniform = AlphaMatrix(["b"], [np.ones(m)])
    assert sparsity_profile(uniform, 1 / np.sqrt(m) - 1e-6).fraction_below["b"] == 0.0
    rows = prof.records()
    assert [r["unit-index"] for r in rows] == list(range(m))
    assert set(rows[0]) == {"task-id", "unit-index", "abs-alpha"}


def test_alpha_matrix_param_round_trip():
    am = AlphaMatrix.init(["x", "y"], 4, stream(0))
    back = AlphaMatrix.from_params(am.to_params())
    assert back.task_ids == ["x", "y"]
    np.testing.assert_array_equal(back.beta, am.beta)
    with pytest.raises(ValueError):
        AlphaMatrix(["x"], np.ones((2, 3)))
