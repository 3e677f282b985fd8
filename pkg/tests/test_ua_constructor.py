import numpy as np
import pytest

from latent_dit._validation import ConstructionError, DomainError
from latent_dit.ua_constructor import (
    GridSpec,
    PiecewiseLinear,
    build_context_mapper,
    build_memorizer,
    build_pipeline,
    build_quantizer,
    enumerate_grid,
    piecewise_l2_error,
    random_targets,
    soften,
    verify_context_mapping,
    zeta1,
    zeta2,
)

SMALL = GridSpec(1, 2, 0.5)


def test_grid_constants():
    g = GridSpec(2, 3, 0.25)
    assert g.J == 3 + 3 * 3 * 4.0 ** 6
    assert g.u.tolist() == [1.0, 4.0]
    assert SMALL.t_l == 128.0 and SMALL.t_r == 528.0
    with pytest.raises(DomainError):
        GridSpec(1, 2, 0.3)
    with pytest.raises(DomainError):
        GridSpec(1, 2, 1.0)


def test_quantizer_examples():
    q = build_quantizer(SMALL)
    assert len(q) == 3
    assert np.array_equal(q(np.zeros((1, 2))), np.zeros((1, 2)))
    assert q(np.array([[0.3, 1.5]])).tolist() == [[0.0, -SMALL.J]]
    g = GridSpec(2, 2, 0.25)
    assert len(build_quantizer(g)) == g.d * g.levels + g.d


def test_quantizer_random_and_idempotent():
    g = GridSpec(2, 2, 0.25)
    q = build_quantizer(g)
    r = np.random.default_rng(0)
    for _ in range(200):
        X = r.random((2, 2))
        once = q(X)
        assert np.array_equal(once, np.floor(X / 0.25) * 0.25)
        assert np.array_equal(q(once), once)
    X = np.array([[-0.1, 0.5], [1.0, 0.75]])
    assert q(X).tolist() == [[-g.J, 0.5], [-g.J, 0.75]]


def test_mapper_hypotheses():
    with pytest.raises(DomainError):
        build_context_mapper(GridSpec(1, 1, 0.5))


def test_mapper_cited_bounds_small_grid():
    mapper, t_l, t_r = build_context_mapper(SMALL)
    assert (t_l, t_r) == (128.0, 528.0)
    rep = verify_context_mapping(SMALL, mapper)
    assert rep["exhaustive"] and rep["n_on_grid"] == 4
    assert rep["property_1_distinct_within"]
    assert rep["property_2_distinct_across"]
    assert rep["property_4_off_grid_outside"]


@pytest.mark.parametrize("d,L,delta", [(1, 2, 0.5), (2, 2, 0.5), (1, 3, 0.5), (1, 2, 0.25), (2, 3, 0.5)])
def test_mapper_properties_with_derived_lower_bound(d, L, delta):
    g = GridSpec(d, L, delta)
    mapper, _, _ = build_context_mapper(g)
    rep = verify_context_mapping(g, mapper, t_l=g.t_l_derived)
    for k in (1, 2, 3, 4):
        assert [v for key, v in rep.items() if key.startswith(f"property_{k}")] == [True]


def test_memorizer_random_targets_exact():
    targets = random_targets(SMALL, seed=3)
    pipe = build_pipeline(SMALL, targets)
    for G, on in enumerate_grid(SMALL):
        out = pipe.memorizer(pipe.mapper(G))
        want = targets[G.tobytes()] if on else np.zeros_like(G)
        assert np.array_equal(out, want)


def test_memorizer_identity_targets():
    g = GridSpec(2, 2, 0.5)
    targets = {G.tobytes(): G.copy() for G, _ in enumerate_grid(g, off_grid=False)}
    pipe = build_pipeline(g, targets)
    for G, on in enumerate_grid(g):
        assert np.array_equal(pipe(G), G if on else np.zeros_like(G))


def test_memorizer_rejects_target_collision():
    mapper, _, _ = build_context_mapper(SMALL)
    targets = random_targets(SMALL)
    G0 = next(G for G, _ in enumerate_grid(SMALL, off_grid=False))
    # a rewritten column landing on a contextual ID would be rewritten again
    targets[G0.tobytes()] = np.full((1, 2), float((SMALL.u @ mapper(G0)).min()))
    with pytest.raises(ConstructionError):
        build_memorizer(SMALL, mapper, targets)


def test_relu_form_constant_piece_exact():
    f = PiecewiseLinear([0.5], [(0.0, 2.0), (0.0, 2.0)])
    t = np.linspace(-2, 2, 101)
    assert np.array_equal(f.softened(0.1)(t), f(t))


def test_relu_form_uses_four_relus_and_matches_away_from_ramps():
    z = zeta2(0.5)
    a0, b0, knots, w = z.relu_form(0.1)
    assert len(knots) == 4
    t = np.array([-1.0, 0.2, 0.3, 0.7, 2.0])
    assert np.allclose(z.softened(0.1)(t), z(t), atol=1e-12)
    z1 = zeta1(10.0)
    t = np.array([-3.0, 0.5, 0.85, 1.0, 4.0])
    assert np.allclose(z1.softened(0.1)(t), z1(t), atol=1e-12)


def test_soften_deviation_decreasing_and_certified():
    targets = random_targets(SMALL, seed=0)
    pipe = build_pipeline(SMALL, targets)
    inputs = [G for G, _ in enumerate_grid(SMALL)]
    devs = []
    for lam in (10.0, 100.0, 1000.0):
        _, rep = soften(pipe, lam, 0.125, inputs)
        devs.append(rep["max_deviation"])
        last = rep
    assert devs[0] > devs[1] > devs[2]
    assert last["max_deviation"] <= last["bound"]


def test_piecewise_constant_l2():
    targets = random_targets(SMALL, seed=1)
    pipe = build_pipeline(SMALL, targets)
    assert piecewise_l2_error(pipe, SMALL, targets, points_per_axis=2) == 0.0
    errs = [piecewise_l2_error(soften(pipe, lam, 0.125, [])[0], SMALL, targets) for lam in (10.0, 100.0, 1000.0)]
    assert errs[0] > errs[1] >= errs[2]
    assert errs[2] <= 1e-6
