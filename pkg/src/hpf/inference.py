"""Coordinate-ascent variational inference for HPF and BPF.

Each sweep touches the nonzero entries once: the multinomial responsibilities
``phi_ui`` are computed from the pre-sweep parameters and immediately folded
into the user and item shape accumulators, so they are never stored. The
remaining updates are dense over users x K and items x K:

    user block:  gamma.shape = a + sum_i y_ui phi_uik
                 gamma.rate  = E[xi_u] + sum_i E[beta_ik]      (pre-sweep beta)
                 kappa.rate  = a'/b' + sum_k E[theta_uk]       (new theta)
    item block:  lambda.shape = c + sum_u y_ui phi_uik
                 lambda.rate  = E[eta_i] + sum_u E[theta_uk]   (new theta)
                 tau.rate     = c'/d' + sum_k E[beta_ik]       (new beta)

Under BPF the activity/popularity factors are absent and the rates use the
fixed ``b`` and ``d``.
"""
from __future__ import annotations

import logging
import math
import time
import weakref
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import sparse
from scipy.special import digamma, gammaln

from .data import Dataset, Triplets
from .model import FitMeta, FittedModel, GammaParams, Hyperparameters, expected_log_weight

_logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 1 << 16


class NumericalFailure(ArithmeticError):
    """A variational parameter became non-finite or non-positive."""

    def __init__(self, parameter: str, index=None, iteration: int | None = None):
        self.parameter = parameter
        self.index = index
        self.iteration = iteration
        msg = f"non-finite or non-positive value in {parameter}"
        if index is not None:
            msg += f" at {index}"
        if iteration is not None:
            msg += f" (iteration {iteration})"
        super().__init__(msg)


@dataclass(frozen=True, eq=False)
class VariationalState:
    """Gamma factors for theta (``gamma``), beta (``lambda_``), xi and eta.

    ``kappa`` and ``tau`` are ``None`` under BPF.
    """

    gamma: GammaParams
    lambda_: GammaParams
    kappa: GammaParams | None = None
    tau: GammaParams | None = None

    @property
    def n_users(self) -> int:
        return self.gamma.shape.shape[0]

    @property
    def n_items(self) -> int:
        return self.lambda_.shape.shape[0]

    @property
    def k(self) -> int:
        return self.gamma.shape.shape[1]

    @property
    def e_theta(self) -> np.ndarray:
        return self.gamma.shape / self.gamma.rate

    @property
    def e_beta(self) -> np.ndarray:
        return self.lambda_.shape / self.lambda_.rate


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 1000
    rel_tol: float = 1e-6
    check_every: int = 1
    seed: int = 0
    init_offset_scale: float = 0.01
    threads: int = 1
    track_elbo: bool = True
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.check_every < 1:
            raise ValueError("check_every must be >= 1")
        if self.init_offset_scale < 0:
            raise ValueError("init_offset_scale must be >= 0")
        if self.threads < 1 or self.chunk_size < 1:
            raise ValueError("threads and chunk_size must be >= 1")


class TraceRow(NamedTuple):
    iteration: int
    elbo: float
    valid_loglik: float
    seconds: float


def initialize(
    hyper: Hyperparameters,
    n_users: int,
    n_items: int,
    seed: int = 0,
    init_offset_scale: float = 0.01,
) -> VariationalState:
    """Prior-valued parameters plus a uniform ``[0, init_offset_scale)`` jitter."""
    if n_users < 1 or n_items < 1:
        raise ValueError("n_users and n_items must be >= 1")
    rng = np.random.default_rng(seed)
    k = hyper.k

    def jitter(size):
        return rng.uniform(0.0, init_offset_scale, size)

    user_rate = hyper.b_prime if hyper.hierarchical else hyper.user_rate
    item_rate = hyper.d_prime if hyper.hierarchical else hyper.item_rate
    gamma = GammaParams(hyper.a + jitter((n_users, k)), user_rate + jitter((n_users, k)))
    kappa = None
    if hyper.hierarchical:
        kappa = GammaParams(
            np.full(n_users, hyper.a_prime + k * hyper.a), hyper.b_prime + jitter(n_users)
        )
    lambda_ = GammaParams(hyper.c + jitter((n_items, k)), item_rate + jitter((n_items, k)))
    tau = None
    if hyper.hierarchical:
        tau = GammaParams(
            np.full(n_items, hyper.c_prime + k * hyper.c), hyper.d_prime + jitter(n_items)
        )
    return VariationalState(gamma, lambda_, kappa, tau)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return logits


def compute_phi(u: int, i: int, state: VariationalState) -> np.ndarray:
    """Multinomial responsibilities of the K components for entry ``(u, i)``."""
    logits = expected_log_weight(
        GammaParams(state.gamma.shape[u], state.gamma.rate[u])
    ) + expected_log_weight(GammaParams(state.lambda_.shape[i], state.lambda_.rate[i]))
    return _softmax_rows(np.asarray(logits, dtype=np.float64))


# -- nonzero pass -----------------------------------------------------------


class _Chunk(NamedTuple):
    users: np.ndarray
    items: np.ndarray
    y: np.ndarray
    to_users: sparse.csr_matrix  # U x n, weights y
    to_items: sparse.csr_matrix  # I x n, weights y


_plans: "weakref.WeakKeyDictionary[Dataset, dict[int, list[_Chunk]]]" = weakref.WeakKeyDictionary()


def _plan(train: Dataset, chunk_size: int) -> list[_Chunk]:
    per_size = _plans.setdefault(train, {})
    if chunk_size in per_size:
        return per_size[chunk_size]
    e = train.entries
    chunks = []
    for start in range(0, train.nnz, chunk_size):
        sl = slice(start, start + chunk_size)
        users, items = e.users[sl], e.items[sl]
        y = e.values[sl].astype(np.float64)
        cols = np.arange(len(y))
        chunks.append(
            _Chunk(
                users,
                items,
                y,
                sparse.csr_matrix((y, (users, cols)), shape=(train.n_users, len(y))),
                sparse.csr_matrix((y, (items, cols)), shape=(train.n_items, len(y))),
            )
        )
    per_size[chunk_size] = chunks
    return chunks


def _chunk_counts(chunk: _Chunk, elog_theta: np.ndarray, elog_beta: np.ndarray):
    phi = _softmax_rows(elog_theta[chunk.users] + elog_beta[chunk.items])
    return chunk.to_users @ phi, chunk.to_items @ phi


def _chunk_data_term(chunk: _Chunk, elog_theta: np.ndarray, elog_beta: np.ndarray) -> float:
    logits = elog_theta[chunk.users] + elog_beta[chunk.items]
    top = logits.max(axis=1)
    lse = top + np.log(np.exp(logits - top[:, None]).sum(axis=1))
    return float(np.dot(chunk.y, lse) - gammaln(chunk.y + 1.0).sum())


def _map_chunks(fn, chunks, executor: Executor | None):
    if executor is None or len(chunks) < 2:
        return map(fn, chunks)
    # Executor.map yields in submission order, which fixes the reduction order.
    return executor.map(fn, chunks)


def _expected_counts(state, train, chunk_size, executor):
    elog_theta = expected_log_weight(state.gamma)
    elog_beta = expected_log_weight(state.lambda_)
    user_counts = np.zeros((train.n_users, state.k))
    item_counts = np.zeros((train.n_items, state.k))
    for uc, ic in _map_chunks(
        lambda c: _chunk_counts(c, elog_theta, elog_beta), _plan(train, chunk_size), executor
    ):
        user_counts += uc
        item_counts += ic
    return user_counts, item_counts


def _check(name: str, arr: np.ndarray) -> None:
    bad = ~(np.isfinite(arr) & (arr > 0))
    if bad.any():
        idx = np.unravel_index(np.argmax(bad), arr.shape)
        raise NumericalFailure(name, tuple(int(x) for x in idx))


def _check_dims(state: VariationalState, train: Dataset, hyper: Hyperparameters) -> None:
    if (state.n_users, state.n_items) != train.shape:
        raise ValueError(
            f"state is {state.n_users}x{state.n_items} but data is {train.n_users}x{train.n_items}"
        )
    if state.k != hyper.k:
        raise ValueError(f"state has K={state.k} but hyperparameters say K={hyper.k}")
    if hyper.hierarchical and (state.kappa is None or state.tau is None):
        raise ValueError("hpf needs activity and popularity factors")


def sweep(
    state: VariationalState,
    train: Dataset,
    hyper: Hyperparameters,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    executor: Executor | None = None,
) -> VariationalState:
    """One full coordinate-ascent pass; returns a new state.

    Passing an ``executor`` spreads the nonzero pass over its workers. The
    chunking does not depend on the executor, so results are bit-identical
    to the sequential path.
    """
    _check_dims(state, train, hyper)
    user_counts, item_counts = _expected_counts(state, train, chunk_size, executor)

    if hyper.hierarchical:
        user_rate = (state.kappa.shape / state.kappa.rate)[:, None]
        item_rate = (state.tau.shape / state.tau.rate)[:, None]
    else:
        user_rate = np.full((state.n_users, 1), float(hyper.user_rate))
        item_rate = np.full((state.n_items, 1), float(hyper.item_rate))

    gamma_shp = hyper.a + user_counts
    gamma_rte = user_rate + state.e_beta.sum(axis=0)[None, :]
    _check("gamma.shape", gamma_shp)
    _check("gamma.rate", gamma_rte)
    e_theta = gamma_shp / gamma_rte

    kappa = None
    if hyper.hierarchical:
        kappa_rte = hyper.a_prime / hyper.b_prime + e_theta.sum(axis=1)
        _check("kappa.rate", kappa_rte)
        kappa = GammaParams(state.kappa.shape, kappa_rte)

    lambda_shp = hyper.c + item_counts
    lambda_rte = item_rate + e_theta.sum(axis=0)[None, :]
    _check("lambda.shape", lambda_shp)
    _check("lambda.rate", lambda_rte)

    tau = None
    if hyper.hierarchical:
        tau_rte = hyper.c_prime / hyper.d_prime + (lambda_shp / lambda_rte).sum(axis=1)
        _check("tau.rate", tau_rte)
        tau = GammaParams(state.tau.shape, tau_rte)

    return VariationalState(
        GammaParams(gamma_shp, gamma_rte), GammaParams(lambda_shp, lambda_rte), kappa, tau
    )


# -- objective --------------------------------------------------------------


def _gamma_entropy(g: GammaParams) -> float:
    shp, rte = g.shape, g.rate
    return float(np.sum(shp - np.log(rte) + gammaln(shp) + (1.0 - shp) * digamma(shp)))


def _gamma_log_prior(shape: float, rate_e, rate_elog, x: GammaParams) -> float:
    """``E_q[log Gamma(x; shape, rate)]`` where the rate is itself random
    (or fixed) with mean ``rate_e`` and log-mean ``rate_elog``."""
    e_x = x.shape / x.rate
    elog_x = expected_log_weight(x)
    return float(
        np.sum(shape * rate_elog - gammaln(shape) + (shape - 1.0) * elog_x - rate_e * e_x)
    )


def elbo(
    state: VariationalState,
    train: Dataset,
    hyper: Hyperparameters,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    executor: Executor | None = None,
) -> float:
    """Evidence lower bound with the multinomials at their optimum.

    The Poisson term splits into a sum over nonzero entries and the total
    rate ``sum_k (sum_u E[theta_uk]) (sum_i E[beta_ik])`` over all cells.
    """
    _check_dims(state, train, hyper)
    elog_theta = expected_log_weight(state.gamma)
    elog_beta = expected_log_weight(state.lambda_)
    e_theta, e_beta = state.e_theta, state.e_beta

    total = math.fsum(
        _map_chunks(
            lambda c: _chunk_data_term(c, elog_theta, elog_beta),
            _plan(train, chunk_size),
            executor,
        )
    )
    total -= float(e_theta.sum(axis=0) @ e_beta.sum(axis=0))

    if hyper.hierarchical:
        e_xi = (state.kappa.shape / state.kappa.rate)[:, None]
        elog_xi = expected_log_weight(state.kappa)[:, None]
        e_eta = (state.tau.shape / state.tau.rate)[:, None]
        elog_eta = expected_log_weight(state.tau)[:, None]
        total += _gamma_log_prior(hyper.a, e_xi, elog_xi, state.gamma)
        total += _gamma_log_prior(hyper.c, e_eta, elog_eta, state.lambda_)
        a_rate = hyper.a_prime / hyper.b_prime
        c_rate = hyper.c_prime / hyper.d_prime
        total += _gamma_log_prior(hyper.a_prime, a_rate, math.log(a_rate), state.kappa)
        total += _gamma_log_prior(hyper.c_prime, c_rate, math.log(c_rate), state.tau)
        total += _gamma_entropy(state.kappa) + _gamma_entropy(state.tau)
    else:
        b, d = hyper.user_rate, hyper.item_rate
        total += _gamma_log_prior(hyper.a, b, math.log(b), state.gamma)
        total += _gamma_log_prior(hyper.c, d, math.log(d), state.lambda_)
    total += _gamma_entropy(state.gamma) + _gamma_entropy(state.lambda_)
    return total


def poisson_rates(e_theta: np.ndarray, e_beta: np.ndarray, users, items) -> np.ndarray:
    return np.einsum("nk,nk->n", e_theta[users], e_beta[items])


def predictive_loglik(state, heldout: Triplets) -> float:
    """Mean Poisson log-pmf of held-out entries under the posterior-mean rates.

    ``state`` is anything exposing ``e_theta`` and ``e_beta`` (a
    :class:`VariationalState` or a fitted model).
    """
    if len(heldout) == 0:
        raise ValueError("held-out set is empty")
    rate = poisson_rates(state.e_theta, state.e_beta, heldout.users, heldout.items)
    y = heldout.values.astype(np.float64)
    return float(np.mean(y * np.log(rate) - rate - gammaln(y + 1.0)))


# -- driver -----------------------------------------------------------------


def _chunk_size_for(nnz: int, opts: FitOptions) -> int:
    if opts.threads == 1:
        return opts.chunk_size
    # a few chunks per worker; depends only on (nnz, threads), so runs repeat exactly
    return max(1024, min(opts.chunk_size, -(-nnz // (4 * opts.threads))))


def _relative_change(new: float, old: float) -> float:
    if new == old:
        return 0.0
    if old == 0:
        return math.inf
    return abs((new - old) / old)


def fit(
    train: Dataset,
    validation: Triplets | None,
    hyper: Hyperparameters,
    opts: FitOptions = FitOptions(),
) -> tuple[FittedModel, list[TraceRow]]:
    """Run coordinate ascent until the validation log-likelihood settles.

    Stops when the relative change of the mean validation log-likelihood
    between checks drops below ``opts.rel_tol`` or after ``opts.max_iters``
    sweeps. The baseline for the first check is the log-likelihood at the
    initial state.
    """
    if train.nnz == 0:
        raise ValueError("training set is empty")
    has_valid = validation is not None and len(validation) > 0
    if not has_valid and math.isfinite(opts.rel_tol):
        raise ValueError("a nonempty validation set is required for rel_tol-based stopping")

    state = initialize(hyper, train.n_users, train.n_items, opts.seed, opts.init_offset_scale)
    prev = predictive_loglik(state, validation) if has_valid else None
    trace: list[TraceRow] = []
    converged = False
    last_ll = None
    executor = ThreadPoolExecutor(opts.threads) if opts.threads > 1 else None
    chunk_size = _chunk_size_for(train.nnz, opts)
    try:
        for it in range(1, opts.max_iters + 1):
            t0 = time.perf_counter()
            try:
                state = sweep(state, train, hyper, chunk_size, executor)
            except NumericalFailure as exc:
                exc.iteration = it
                exc.args = (f"{exc.args[0]} (iteration {it})",)
                raise
            objective = math.nan
            if opts.track_elbo:
                objective = elbo(state, train, hyper, chunk_size, executor)
            ll = math.nan
            if has_valid and it % opts.check_every == 0:
                ll = predictive_loglik(state, validation)
                if not math.isfinite(ll):
                    raise NumericalFailure("validation log-likelihood", iteration=it)
                last_ll = ll
                change = _relative_change(ll, prev)
                converged = change < opts.rel_tol
                prev = ll
            row = TraceRow(it, objective, ll, time.perf_counter() - t0)
            trace.append(row)
            _logger.debug("iter %d elbo %.6g valid %.8g", it, objective, ll)
            if converged:
                break
    finally:
        if executor is not None:
            executor.shutdown()

    meta = FitMeta(iterations=len(trace), converged=converged, valid_loglik=last_ll, seed=opts.seed)
    return FittedModel(state.e_theta, state.e_beta, hyper, meta), trace


def write_trace(path, trace: list[TraceRow], timings: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("iter\telbo\tvalid_loglik\tseconds\n")
        for row in trace:
            seconds = row.seconds if timings else 0.0
            f.write(f"{row.iteration}\t{row.elbo:.17g}\t{row.valid_loglik:.17g}\t{seconds:.6f}\n")
