"""Model types, Gamma utilities, and the generative simulator.

Every Gamma distribution here is parameterized by ``(shape, rate)``; numpy's
sampler takes a scale, so conversions happen only at the sampling call.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import digamma

from .data import Dataset

HPF = "hpf"
BPF = "bpf"

_TINY = np.finfo(np.float64).tiny
# keeps sampled counts exactly representable; numpy refuses rates near 2**63
MAX_POISSON_RATE = 1e15

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hyperparameters:
    """Prior settings shared by HPF and BPF.

    ``a``/``c`` are the shapes of the user-preference and item-attribute
    Gammas. Under HPF their rates are per-user activity ``xi_u`` and per-item
    popularity ``eta_i``, with ``xi_u ~ Gamma(a_prime, a_prime / b_prime)``
    and ``eta_i ~ Gamma(c_prime, c_prime / d_prime)``. Under BPF the rates are
    fixed at ``b`` (users) and ``d`` (items), defaulting to ``b_prime`` and
    ``d_prime`` so the prior means stay put.
    """

    a: float = 0.3
    a_prime: float = 0.3
    b_prime: float = 1.0
    c: float = 0.3
    c_prime: float = 0.3
    d_prime: float = 1.0
    k: int = 100
    variant: str = HPF
    b: float | None = None
    d: float | None = None

    def __post_init__(self):
        if self.variant not in (HPF, BPF):
            raise ValueError(f"variant must be 'hpf' or 'bpf', got {self.variant!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        for name in ("a", "a_prime", "b_prime", "c", "c_prime", "d_prime", "b", "d"):
            value = getattr(self, name)
            if value is None:
                continue
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"hyperparameter {name} must be positive, got {value}")
        if self.variant == HPF and (self.b is not None or self.d is not None):
            raise ValueError("fixed rates b/d only apply to the bpf variant")

    @property
    def hierarchical(self) -> bool:
        return self.variant == HPF

    @property
    def user_rate(self) -> float:
        """Fixed BPF user rate."""
        return self.b_prime if self.b is None else self.b

    @property
    def item_rate(self) -> float:
        return self.d_prime if self.d is None else self.d

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.variant == BPF:
            out["b"], out["d"] = self.user_rate, self.item_rate
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(**d)


@dataclass(frozen=True)
class GammaParams:
    """Gamma ``(shape, rate)``; both may be scalars or same-shape arrays."""

    shape: np.ndarray | float
    rate: np.ndarray | float

    def __post_init__(self):
        if not (np.all(np.asarray(self.shape) > 0) and np.all(np.asarray(self.rate) > 0)):
            raise ValueError("Gamma shape and rate must be strictly positive")


def expected_weight(g: GammaParams):
    return np.divide(g.shape, g.rate)


def expected_log_weight(g: GammaParams):
    """``E[log x]`` under ``Gamma(shape, rate)``: ``digamma(shape) - log(rate)``."""
    return digamma(g.shape) - np.log(g.rate)


@dataclass(frozen=True, eq=False)
class LatentState:
    theta: np.ndarray  # U x K
    beta: np.ndarray  # I x K
    xi: np.ndarray  # U
    eta: np.ndarray  # I


@dataclass(frozen=True)
class FitMeta:
    iterations: int = 0
    converged: bool = False
    valid_loglik: float | None = None
    seed: int = 0


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Posterior means of user preferences and item attributes."""

    e_theta: np.ndarray
    e_beta: np.ndarray
    hyper: Hyperparameters
    fit_meta: FitMeta = field(default_factory=FitMeta)

    def __post_init__(self):
        if self.e_theta.ndim != 2 or self.e_beta.ndim != 2:
            raise ValueError("e_theta and e_beta must be 2-d")
        if self.e_theta.shape[1] != self.e_beta.shape[1]:
            raise ValueError("e_theta and e_beta disagree on the number of components")
        if not (np.all(self.e_theta > 0) and np.all(self.e_beta > 0)):
            raise ValueError("expected weights must be strictly positive")

    @property
    def n_users(self) -> int:
        return self.e_theta.shape[0]

    @property
    def n_items(self) -> int:
        return self.e_beta.shape[0]

    @property
    def k(self) -> int:
        return self.e_theta.shape[1]


def _gamma(rng: np.random.Generator, shape, rate, size=None) -> np.ndarray:
    # small shapes can underflow to exactly 0
    return np.maximum(rng.gamma(shape, 1.0 / np.asarray(rate), size), _TINY)


def sample_latents(
    hyper: Hyperparameters, n_users: int, n_items: int, rng: np.random.Generator
) -> LatentState:
    k = hyper.k
    if hyper.hierarchical:
        xi = _gamma(rng, hyper.a_prime, hyper.a_prime / hyper.b_prime, n_users)
    else:
        xi = np.full(n_users, float(hyper.user_rate))
    theta = _gamma(rng, hyper.a, xi[:, None], (n_users, k))
    if hyper.hierarchical:
        eta = _gamma(rng, hyper.c_prime, hyper.c_prime / hyper.d_prime, n_items)
    else:
        eta = np.full(n_items, float(hyper.item_rate))
    beta = _gamma(rng, hyper.c, eta[:, None], (n_items, k))
    return LatentState(theta, beta, xi, eta)


def simulate_generative(
    hyper: Hyperparameters, n_users: int, n_items: int, seed: int
) -> tuple[LatentState, Dataset]:
    """Draw latents and a count matrix from the generative process.

    Every user and item stays in the index space even if its row or column
    came out empty, so dense index ``u`` lines up with ``latents.theta[u]``.
    Shapes below 1 on the activity/popularity priors give heavy-tailed rates;
    any rate above ``MAX_POISSON_RATE`` is clipped before sampling.
    """
    if n_users < 1 or n_items < 1:
        raise ValueError("n_users and n_items must be >= 1")
    rng = np.random.default_rng(seed)
    latents = sample_latents(hyper, n_users, n_items, rng)
    rates = latents.theta @ latents.beta.T
    n_capped = int(np.count_nonzero(rates > MAX_POISSON_RATE))
    if n_capped:
        _logger.warning("capped %d Poisson rates at %g", n_capped, MAX_POISSON_RATE)
        np.minimum(rates, MAX_POISSON_RATE, out=rates)
    y = rng.poisson(rates)
    users, items = np.nonzero(y)
    ds = Dataset.from_arrays(
        n_users,
        n_items,
        users,
        items,
        y[users, items],
        [f"u{u}" for u in range(n_users)],
        [f"i{i}" for i in range(n_items)],
    )
    return latents, ds


# -- persistence ------------------------------------------------------------


def _write_matrix(path, mat: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row, values in enumerate(mat):
            for k, v in enumerate(values):
                f.write(f"{row}\t{k}\t{v:.17g}\n")


def _read_matrix(path) -> np.ndarray:
    raw = np.loadtxt(path, delimiter="\t", ndmin=2)
    rows = raw[:, 0].astype(np.int64)
    cols = raw[:, 1].astype(np.int64)
    out = np.full((rows.max() + 1, cols.max() + 1), np.nan)
    out[rows, cols] = raw[:, 2]
    if np.isnan(out).any():
        raise ValueError(f"{path} is missing cells")
    return out


def save_model(model: FittedModel, directory: str | os.PathLike) -> None:
    """Write ``theta.tsv``, ``beta.tsv`` and ``model.json``."""
    os.makedirs(directory, exist_ok=True)
    _write_matrix(os.path.join(directory, "theta.tsv"), model.e_theta)
    _write_matrix(os.path.join(directory, "beta.tsv"), model.e_beta)
    meta = {
        "n_users": model.n_users,
        "n_items": model.n_items,
        "hyperparameters": model.hyper.to_dict(),
        "fit_meta": asdict(model.fit_meta),
    }
    with open(os.path.join(directory, "model.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_model(directory: str | os.PathLike) -> FittedModel:
    with open(os.path.join(directory, "model.json"), encoding="utf-8") as f:
        meta = json.load(f)
    e_theta = _read_matrix(os.path.join(directory, "theta.tsv"))
    e_beta = _read_matrix(os.path.join(directory, "beta.tsv"))
    if e_theta.shape[0] != meta["n_users"] or e_beta.shape[0] != meta["n_items"]:
        raise ValueError(f"model files in {directory} disagree with model.json")
    return FittedModel(
        e_theta,
        e_beta,
        Hyperparameters.from_dict(meta["hyperparameters"]),
        FitMeta(**meta["fit_meta"]),
    )


def save_latents(latents: LatentState, directory: str | os.PathLike) -> None:
    os.makedirs(directory, exist_ok=True)
    _write_matrix(os.path.join(directory, "theta.tsv"), latents.theta)
    _write_matrix(os.path.join(directory, "beta.tsv"), latents.beta)
    _write_matrix(os.path.join(directory, "xi.tsv"), latents.xi[:, None])
    _write_matrix(os.path.join(directory, "eta.tsv"), latents.eta[:, None])


def load_latents(directory: str | os.PathLike) -> LatentState:
    return LatentState(
        _read_matrix(os.path.join(directory, "theta.tsv")),
        _read_matrix(os.path.join(directory, "beta.tsv")),
        _read_matrix(os.path.join(directory, "xi.tsv"))[:, 0],
        _read_matrix(os.path.join(directory, "eta.tsv"))[:, 0],
    )

