import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from conftest import random_dataset
from hypothesis import given, settings
from hypothesis import strategies as st
from reference import reference_sweep, state_to_params

from hpf import inference
from hpf.data import Dataset, Triplets, build_dataset, parse_ratings, split
from hpf.inference import (
    FitOptions,
    NumericalFailure,
    VariationalState,
    compute_phi,
    elbo,
    fit,
    initialize,
    predictive_loglik,
    sweep,
)
from hpf.model import GammaParams, Hyperparameters, simulate_generative


def _assert_states_close(state, params, rtol=1e-10):
    got = state_to_params(state)
    assert got.keys() == params.keys()
    for key in params:
        np.testing.assert_allclose(got[key], params[key], rtol=rtol, atol=1e-12, err_msg=key)


# -- initialize -------------------------------------------------------------


def test_init_fixed_shapes_paper_defaults():
    state = initialize(Hyperparameters(), 3, 4, seed=0)
    assert np.all(state.kappa.shape == pytest.approx(30.3))
    assert np.all(state.tau.shape == pytest.approx(30.3))


def test_init_zero_offset_is_prior():
    h = Hyperparameters(k=3)
    state = initialize(h, 4, 5, seed=1, init_offset_scale=0.0)
    assert np.all(state.gamma.shape == h.a) and np.all(state.gamma.rate == h.b_prime)
    assert np.all(state.lambda_.shape == h.c) and np.all(state.lambda_.rate == h.d_prime)
    assert np.all(state.kappa.rate == h.b_prime) and np.all(state.tau.rate == h.d_prime)


def test_init_offsets_bounded_and_seeded():
    h = Hyperparameters(k=3)
    a = initialize(h, 6, 7, seed=3)
    b = initialize(h, 6, 7, seed=3)
    assert np.array_equal(a.gamma.shape, b.gamma.shape)
    off = a.gamma.shape - h.a
    assert np.all(off >= 0) and np.all(off < 0.01)
    assert not np.array_equal(a.gamma.shape, initialize(h, 6, 7, seed=4).gamma.shape)


def test_init_bpf_has_no_hierarchy():
    state = initialize(Hyperparameters(k=2, variant="bpf", b=2.0, d=3.0), 2, 2, init_offset_scale=0)
    assert state.kappa is None and state.tau is None
    assert np.all(state.gamma.rate == 2.0) and np.all(state.lambda_.rate == 3.0)


# -- phi --------------------------------------------------------------------


def _state(gs, gr, ls, lr):
    return VariationalState(
        GammaParams(np.atleast_2d(gs), np.atleast_2d(gr)),
        GammaParams(np.atleast_2d(ls), np.atleast_2d(lr)),
    )


def test_phi_symmetric_is_uniform():
    s = _state([[0.7] * 4], [[1.3] * 4], [[0.2] * 4], [[2.0] * 4])
    np.testing.assert_allclose(compute_phi(0, 0, s), 0.25, rtol=1e-15)


def test_phi_single_component():
    assert compute_phi(0, 0, _state([[0.3]], [[1.0]], [[5.0]], [[0.1]])).tolist() == [1.0]


def test_phi_two_components():
    s = _state([[1.0, 1.0]], [[1.0, math.e]], [[1.0, 1.0]], [[1.0, 1.0]])
    np.testing.assert_allclose(
        compute_phi(0, 0, s), [0.7310585786300049, 0.2689414213699951], rtol=1e-14
    )


def test_phi_extreme_logits_do_not_underflow():
    # digamma(1e-8) is about -1e8
    s = _state([[1e-8, 1e-8]], [[1.0, 1e10]], [[1e-8, 1e-8]], [[1.0, 1.0]])
    phi = compute_phi(0, 0, s)
    assert np.all(np.isfinite(phi)) and phi.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    k=st.integers(1, 8),
    data=st.data(),
)
def test_phi_simplex(k, data):
    pos = st.floats(1e-6, 1e6)
    arrs = [data.draw(st.lists(pos, min_size=k, max_size=k)) for _ in range(4)]
    phi = compute_phi(0, 0, _state(*arrs))
    assert np.all(phi >= 0)
    assert abs(phi.sum() - 1.0) <= 1e-12


# -- sweep ------------------------------------------------------------------


def test_sweep_single_cell():
    h = Hyperparameters(k=1)
    ds = Dataset.from_arrays(1, 1, [0], [0], [3])
    out = sweep(initialize(h, 1, 1, seed=0), ds, h)
    assert out.gamma.shape[0, 0] == pytest.approx(3.3, rel=1e-15)
    assert out.lambda_.shape[0, 0] == pytest.approx(3.3, rel=1e-15)


def test_sweep_empty_train_gives_prior_shapes():
    h = Hyperparameters(k=3)
    ds = Dataset.from_arrays(2, 3, [], [], [])
    out = sweep(initialize(h, 2, 3, seed=0), ds, h)
    assert np.all(out.gamma.shape == h.a)
    assert np.all(out.lambda_.shape == h.c)


@pytest.mark.parametrize("variant", ["hpf", "bpf"])
@pytest.mark.parametrize("seed", range(5))
def test_sweep_matches_reference(variant, seed):
    rng = np.random.default_rng(seed)
    h = Hyperparameters(k=2, variant=variant)
    ds = random_dataset(rng, 5, 4, density=0.6)
    state = initialize(h, 5, 4, seed=seed, init_offset_scale=0.5)
    for _ in range(3):
        expected = reference_sweep(state_to_params(state), ds.entries.to_list(), h)
        state = sweep(state, ds, h)
        _assert_states_close(state, expected)


def test_sweep_matches_reference_up_to_10x10_k3():
    rng = np.random.default_rng(77)
    h = Hyperparameters(k=3, a=0.5, a_prime=2.0, b_prime=0.7, c=0.2, c_prime=1.1, d_prime=3.0)
    ds = random_dataset(rng, 10, 10, density=0.4, max_count=9)
    state = initialize(h, 10, 10, seed=1, init_offset_scale=1.0)
    expected = reference_sweep(state_to_params(state), ds.entries.to_list(), h)
    _assert_states_close(sweep(state, ds, h), expected)


def test_sweep_fixed_shapes_untouched():
    rng = np.random.default_rng(0)
    h = Hyperparameters(k=4)
    ds = random_dataset(rng, 8, 9)
    s0 = initialize(h, 8, 9, seed=0)
    s = s0
    for _ in range(10):
        s = sweep(s, ds, h)
    assert s.kappa.shape.tobytes() == s0.kappa.shape.tobytes()
    assert s.tau.shape.tobytes() == s0.tau.shape.tobytes()


def test_sweep_dimension_mismatch():
    h = Hyperparameters(k=2)
    ds = Dataset.from_arrays(3, 3, [0], [0], [1])
    with pytest.raises(ValueError):
        sweep(initialize(h, 2, 3), ds, h)
    with pytest.raises(ValueError):
        sweep(initialize(Hyperparameters(k=3), 3, 3), ds, h)


def test_sweep_chunking_and_threads():
    rng = np.random.default_rng(5)
    h = Hyperparameters(k=6)
    ds = random_dataset(rng, 40, 50, density=0.3)
    state = initialize(h, 40, 50, seed=2)
    whole = sweep(state, ds, h)
    seq = sweep(state, ds, h, chunk_size=17)
    with ThreadPoolExecutor(4) as ex:
        par = sweep(state, ds, h, chunk_size=17, executor=ex)
    for a, b in [(whole, seq), (seq, par)]:
        for x, y in [(a.gamma.shape, b.gamma.shape), (a.lambda_.shape, b.lambda_.shape),
                     (a.gamma.rate, b.gamma.rate), (a.tau.rate, b.tau.rate)]:
            np.testing.assert_allclose(x, y, rtol=1e-9)
    # same chunking: bit-identical regardless of executor
    assert seq.gamma.shape.tobytes() == par.gamma.shape.tobytes()
    assert seq.lambda_.rate.tobytes() == par.lambda_.rate.tobytes()


def test_zero_records_change_nothing():
    text = "a\tx\t2\nb\ty\t1\na\ty\t3\nc\tx\t1\n"
    zeros = "a\tz\t0\nd\tx\t0\n"
    h = Hyperparameters(k=2)
    plain = build_dataset(parse_ratings(text))
    padded = build_dataset(parse_ratings(zeros + text + zeros))
    assert plain.shape == padded.shape and plain.entries.to_list() == padded.entries.to_list()
    s1 = sweep(initialize(h, *plain.shape, seed=0), plain, h)
    s2 = sweep(initialize(h, *padded.shape, seed=0), padded, h)
    assert s1.gamma.shape.tobytes() == s2.gamma.shape.tobytes()
    assert s1.lambda_.rate.tobytes() == s2.lambda_.rate.tobytes()


def test_sweep_reports_numerical_failure():
    h = Hyperparameters(k=2)
    ds = Dataset.from_arrays(2, 2, [0, 1], [0, 1], [1, 1])
    s = initialize(h, 2, 2)
    bad_shape = s.lambda_.shape.copy()
    bad_shape[1, 0] = np.nan
    broken = VariationalState(s.gamma, _unchecked(bad_shape, s.lambda_.rate), s.kappa, s.tau)
    with pytest.raises(NumericalFailure) as info:
        sweep(broken, ds, h)
    assert info.value.parameter == "gamma.shape"
    assert info.value.index is not None


# -- objective --------------------------------------------------------------


@pytest.mark.parametrize("variant", ["hpf", "bpf"])
def test_elbo_finite(variant):
    rng = np.random.default_rng(3)
    h = Hyperparameters(k=3, variant=variant)
    ds = random_dataset(rng, 6, 7)
    assert math.isfinite(elbo(initialize(h, 6, 7), ds, h))


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    variant=st.sampled_from(["hpf", "bpf"]),
    k=st.integers(1, 5),
    n_users=st.integers(1, 12),
    n_items=st.integers(1, 12),
    max_count=st.sampled_from([1, 5, 1000]),
)
def test_elbo_monotone(seed, variant, k, n_users, n_items, max_count):
    rng = np.random.default_rng(seed)
    h = Hyperparameters(k=k, variant=variant)
    ds = random_dataset(rng, n_users, n_items, density=0.5, max_count=max_count)
    state = initialize(h, n_users, n_items, seed=seed)
    prev = elbo(state, ds, h)
    for _ in range(15):
        state = sweep(state, ds, h)
        cur = elbo(state, ds, h)
        assert cur >= prev - 1e-8 * abs(prev)
        prev = cur


def test_elbo_monotone_raw_heavy_counts():
    h = Hyperparameters(k=5)
    _, ds = simulate_generative(h, 50, 60, seed=0)
    state = initialize(h, 50, 60, seed=0)
    prev = elbo(state, ds, h)
    for _ in range(50):
        state = sweep(state, ds, h)
        cur = elbo(state, ds, h)
        assert cur >= prev - 1e-8 * abs(prev)
        prev = cur


def test_elbo_chunking_invariant():
    rng = np.random.default_rng(8)
    h = Hyperparameters(k=3)
    ds = random_dataset(rng, 20, 20)
    s = initialize(h, 20, 20)
    assert elbo(s, ds, h, chunk_size=7) == pytest.approx(elbo(s, ds, h), rel=1e-12)


# -- predictive likelihood --------------------------------------------------


class _Means:
    def __init__(self, e_theta, e_beta):
        self.e_theta, self.e_beta = np.asarray(e_theta, float), np.asarray(e_beta, float)


def test_loglik_unit_rate():
    assert predictive_loglik(_Means([[1.0]], [[1.0]]), Triplets.from_list([(0, 0, 1)])) == pytest.approx(-1.0)


def test_loglik_zero_count():
    r = 2.5
    m = _Means([[math.sqrt(r)]], [[math.sqrt(r)]])
    assert predictive_loglik(m, Triplets([0], [0], [0])) == pytest.approx(-r)


def test_loglik_is_mean():
    m = _Means([[1.0], [0.5]], [[1.0], [2.0]])
    held = Triplets.from_list([(0, 0, 1), (1, 1, 1)])
    assert predictive_loglik(m, held) == pytest.approx(-1.0)


def test_loglik_empty():
    with pytest.raises(ValueError):
        predictive_loglik(_Means([[1.0]], [[1.0]]), Triplets.from_list([]))


# -- fit --------------------------------------------------------------------


def _binary_synthetic(seed, n_users=50, n_items=60, k=5):
    _, ds = simulate_generative(Hyperparameters(k=k), n_users, n_items, seed)
    e = ds.entries
    return ds.with_entries(Triplets(e.users, e.items, np.ones_like(e.values)))


def test_fit_infinite_tolerance_checks_once():
    sp = split(_binary_synthetic(0), seed=0)
    model, trace = fit(sp.train, sp.validation, Hyperparameters(k=5), FitOptions(rel_tol=math.inf))
    assert len(trace) == 1 and model.fit_meta.converged
    assert math.isfinite(trace[0].valid_loglik)


def test_fit_deterministic():
    sp = split(_binary_synthetic(1), seed=1)
    h = Hyperparameters(k=5)
    opts = FitOptions(max_iters=30, seed=3)
    m1, t1 = fit(sp.train, sp.validation, h, opts)
    m2, t2 = fit(sp.train, sp.validation, h, opts)
    assert m1.e_theta.tobytes() == m2.e_theta.tobytes()
    assert m1.e_beta.tobytes() == m2.e_beta.tobytes()
    assert [r[:3] for r in t1] == [r[:3] for r in t2]


def test_fit_max_iters_bound():
    sp = split(_binary_synthetic(2), seed=2)
    model, trace = fit(sp.train, sp.validation, Hyperparameters(k=5), FitOptions(max_iters=1))
    assert len(trace) == 1 and model.fit_meta.iterations == 1
    assert not model.fit_meta.converged


def test_fit_check_every():
    sp = split(_binary_synthetic(2), seed=2)
    _, trace = fit(
        sp.train, sp.validation, Hyperparameters(k=5), FitOptions(max_iters=6, check_every=3, rel_tol=1e-300)
    )
    checked = [r.iteration for r in trace if not math.isnan(r.valid_loglik)]
    assert checked == [3, 6]


def test_fit_requires_validation_for_tolerance():
    ds = _binary_synthetic(3)
    with pytest.raises(ValueError):
        fit(ds, Triplets.from_list([]), Hyperparameters(k=5))
    # without tolerance-based stopping it simply runs max_iters
    model, trace = fit(ds, None, Hyperparameters(k=5), FitOptions(max_iters=4, rel_tol=math.inf))
    assert len(trace) == 4


def test_fit_threads_match_sequential():
    sp = split(_binary_synthetic(4, 120, 150, 8), seed=4)
    h = Hyperparameters(k=8)
    seq, _ = fit(sp.train, sp.validation, h, FitOptions(max_iters=20, rel_tol=1e-300))
    par, _ = fit(sp.train, sp.validation, h, FitOptions(max_iters=20, rel_tol=1e-300, threads=4, chunk_size=1024))
    np.testing.assert_allclose(par.e_theta, seq.e_theta, rtol=1e-9)
    np.testing.assert_allclose(par.e_beta, seq.e_beta, rtol=1e-9)


def test_fit_names_iteration_on_failure(monkeypatch):
    ds = _binary_synthetic(5)
    real_init = inference.initialize

    def broken_init(*args, **kwargs):
        s = real_init(*args, **kwargs)
        shape = s.gamma.shape.copy()
        shape[2, 1] = np.nan
        return VariationalState(_unchecked(shape, s.gamma.rate), s.lambda_, s.kappa, s.tau)

    monkeypatch.setattr(inference, "initialize", broken_init)
    with pytest.raises(NumericalFailure) as info:
        fit(ds, None, Hyperparameters(k=5), FitOptions(max_iters=3, rel_tol=math.inf))
    assert info.value.iteration == 1
    assert "iteration 1" in str(info.value)


def _unchecked(shape, rate):
    g = object.__new__(GammaParams)
    object.__setattr__(g, "shape", shape)
    object.__setattr__(g, "rate", rate)
    return g


def test_fit_options_validation():
    for kwargs in ({"max_iters": 0}, {"rel_tol": 0}, {"check_every": 0}, {"threads": 0}):
        with pytest.raises(ValueError):
            FitOptions(**kwargs)
