"""Noisy quadratic problem (NQP).

Loss, discrete dynamics of the multiplicative late-phase model ``w_k = theta e_k``
and of a full ensemble, exact moment propagation, closed-form steady states and
the ensemble-size scaling experiment.

Step functions accept arrays with leading batch dimensions, so several
independent trajectories (one per seed) advance with one call. A problem's
``w_star`` may carry the same leading dimensions.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import scipy.linalg

from .errors import ConfigError, DimensionError, NumericalError
from .numerics import RngStream, as_matrix, check_finite, kron, solve_linear, sqrt_factor

METHODS = ("late_phase", "full_ensemble", "closed_form")
KRON_MAX_DIM = 40

# stream ids under RngStream(seed)
_STREAM_TARGET = 0
_STREAM_INIT = 1
_STREAM_NOISE = 2


@dataclass
class NqpProblem:
    hessian: np.ndarray
    noise_cov: np.ndarray
    w_star: np.ndarray
    batch_size: int = 1
    noise_factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.hessian = as_matrix(self.hessian, "hessian")
        self.noise_cov = as_matrix(self.noise_cov, "noise_cov")
        self.w_star = np.asarray(self.w_star, dtype=np.float64)
        check_finite(self.w_star, "w_star")
        n = self.hessian.shape[0]
        if self.hessian.shape != (n, n) or self.noise_cov.shape != (n, n):
            raise DimensionError("hessian and noise_cov must both be n x n")
        if self.w_star.ndim == 0 or self.w_star.shape[-1] != n:
            raise DimensionError(f"w_star must end in dimension {n}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be a positive integer")
        if not np.allclose(self.hessian, self.hessian.T, rtol=0, atol=1e-12):
            raise NumericalError("hessian is not symmetric")
        try:
            np.linalg.cholesky(self.hessian)
        except np.linalg.LinAlgError:
            raise NumericalError("hessian is not positive definite") from None
        self.noise_factor = sqrt_factor(self.noise_cov)

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]


def make_standard_problem(n: int, w_star=None, batch_size: int = 1, rng: RngStream | None = None):
    """Diagonal instance with ``H_ii = 1/i`` and ``Sigma = H^-1``.

    Without an explicit ``w_star`` a unit-norm Gaussian direction is drawn from
    ``rng`` (seed 0 by default).
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    idx = np.arange(1, n + 1, dtype=np.float64)
    hessian = np.diag(1.0 / idx)
    noise_cov = np.diag(idx)
    if w_star is None:
        w_star = draw_target(rng or RngStream(0, _STREAM_TARGET), n)
    return NqpProblem(hessian, noise_cov, w_star, batch_size)


def draw_target(rng: RngStream, n: int):
    g = rng.normal(n)
    return g / np.linalg.norm(g)


def nqp_loss(problem: NqpProblem, w, eps):
    """Minibatch loss ``1/2 (w - w* + eps/sqrt(B))^T H (w - w* + eps/sqrt(B))``."""
    w = np.asarray(w, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if w.shape[-1] != problem.dim or eps.shape[-1] != problem.dim:
        raise DimensionError(f"expected last dimension {problem.dim}")
    d = w - problem.w_star + eps / math.sqrt(problem.batch_size)
    return 0.5 * np.einsum("...i,ij,...j->...", d, problem.hessian, d)


def clean_loss(problem: NqpProblem, w):
    """Noise-free quadratic loss of ``w``."""
    d = np.asarray(w, dtype=np.float64) - problem.w_star
    return 0.5 * np.einsum("...i,ij,...j->...", d, problem.hessian, d)


def sample_noise(problem: NqpProblem, rng: RngStream, shape=()):
    """Draw ``eps ~ N(0, Sigma)`` with output shape ``shape + (n,)``."""
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(v) for v in shape)
    z = rng.normal(shape + (problem.dim,))
    return z @ problem.noise_factor.T


@dataclass
class NqpLateState:
    """Shared hypernetwork ``theta`` (n x d) and K embeddings (K x d)."""

    theta: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.theta.shape[-1] != self.embeddings.shape[-1]:
            raise DimensionError("theta columns must equal embedding dimension")

    @property
    def K(self) -> int:
        return self.embeddings.shape[-2]

    def member_weights(self):
        return self.embeddings @ np.swapaxes(self.theta, -1, -2)

    def mean_model(self):
        mean_emb = self.embeddings.mean(axis=-2)
        return np.einsum("...nd,...d->...n", self.theta, mean_emb)


@dataclass
class FullEnsembleState:
    members: np.ndarray  # (..., K, n)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim < 2 or self.members.shape[-2] < 1:
            raise DimensionError("members must have shape (..., K, n) with K >= 1")

    @property
    def K(self) -> int:
        return self.members.shape[-2]

    def mean_model(self):
        return self.members.mean(axis=-2)


@dataclass
class MomentState:
    mean: np.ndarray
    covariance: np.ndarray


def _member_noise(problem, rng, noise, lead_shape):
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be given")
        noise = sample_noise(problem, rng, lead_shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != problem.dim:
        raise DimensionError("noise has wrong dimension")
    return noise


def late_phase_nqp_step(problem: NqpProblem, state: NqpLateState, rng: RngStream | None = None,
                        eta: float = 0.05, gamma_theta: float | None = None, noise=None):
    """One simultaneous update of ``theta`` and every embedding.

    ``noise`` (shape ``(..., K, n)``) fixes one draw per member; otherwise it is
    sampled from ``rng``. The theta gradient sum is scaled by ``gamma_theta``,
    which defaults to ``1/K``.
    """
    if eta <= 0:
        raise ConfigError("eta must be positive")
    theta, emb = state.theta, state.embeddings
    n = problem.dim
    if theta.shape[-2] != n:
        raise DimensionError(f"theta must have {n} rows")
    K = emb.shape[-2]
    eps = _member_noise(problem, rng, noise, emb.shape[:-1])
    # residual carries -eps so that the noise terms enter with a + sign
    resid = emb @ np.swapaxes(theta, -1, -2) - problem.w_star[..., None, :] \
        - eps / math.sqrt(problem.batch_size)
    hr = resid @ problem.hessian                      # rows: (H r_k)^T
    scale = 1.0 / K if gamma_theta is None else gamma_theta
    grad_theta = np.swapaxes(hr, -1, -2) @ emb        # sum_k H r_k e_k^T
    grad_emb = hr @ theta                             # rows: theta^T H r_k
    return NqpLateState(theta - eta * scale * grad_theta, emb - eta * grad_emb)


def full_ensemble_step(problem: NqpProblem, state: FullEnsembleState, rng: RngStream | None = None,
                       eta: float = 0.05, noise=None):
    """Independent gradient-descent step for every ensemble member."""
    w = state.members
    eps = _member_noise(problem, rng, noise, w.shape[:-1])
    resid = w - problem.w_star[..., None, :] - eps / math.sqrt(problem.batch_size)
    return FullEnsembleState(w - eta * (resid @ problem.hessian))


def _transition(problem, eta):
    return np.eye(problem.dim) - eta * problem.hessian


def spectral_radius(problem: NqpProblem, eta: float) -> float:
    return float(np.max(np.abs(np.linalg.eigvalsh(_transition(problem, eta)))))


def check_contractive(problem: NqpProblem, eta: float):
    rho = spectral_radius(problem, eta)
    if not rho < 1.0:
        raise NumericalError(
            f"eta={eta} is not contractive: spectral radius of I - eta H is {rho:.6f}")
    return rho


def moment_step(problem: NqpProblem, m: MomentState, eta: float, K: int) -> MomentState:
    """Exact propagation of mean and covariance of the full-ensemble mean model."""
    A = _transition(problem, eta)
    H = problem.hessian
    mean = problem.w_star + (np.asarray(m.mean) - problem.w_star) @ A.T
    inject = (eta**2 / (K * problem.batch_size)) * (H @ problem.noise_cov @ H)
    cov = A @ m.covariance @ A.T + inject
    return MomentState(mean, 0.5 * (cov + cov.T))


def steady_state_covariance(problem: NqpProblem, eta: float, K: int, method: str = "auto"):
    """Fixed point of :func:`moment_step`'s covariance recursion.

    ``method="kron"`` solves the vectorized system with an explicit Kronecker
    product; ``"lyapunov"`` uses scipy's discrete Lyapunov solver, which is the
    default above ``KRON_MAX_DIM`` dimensions.
    """
    check_contractive(problem, eta)
    if K < 1:
        raise ConfigError("K must be >= 1")
    n = problem.dim
    H = problem.hessian
    rhs = H @ problem.noise_cov @ H
    if method == "auto":
        method = "kron" if n <= KRON_MAX_DIM else "lyapunov"
    A = _transition(problem, eta)
    if method == "kron":
        system = np.eye(n * n) - kron(A, A)
        unit = solve_linear(system, rhs.reshape(-1, order="F")).reshape(n, n, order="F")
    elif method == "lyapunov":
        unit = scipy.linalg.solve_discrete_lyapunov(A, rhs)
    else:
        raise ConfigError(f"unknown method {method!r}")
    unit = 0.5 * (unit + unit.T) * (eta**2 / problem.batch_size)
    # divide last so that C(K) == C(1) / K bit for bit
    return unit / K


def expected_risk(problem: NqpProblem, m: MomentState) -> float:
    """``1/2 (Tr[H C] + (E w - w*)^T H (E w - w*))``."""
    d = np.asarray(m.mean) - problem.w_star
    H = problem.hessian
    return 0.5 * (float(np.trace(H @ m.covariance)) + float(d @ H @ d))


def time_averaged_covariance(problem: NqpProblem, eta: float, K: int, steps: int,
                             rng: RngStream, burn_in: int = 1000, chunk: int = 8192):
    """Time average of ``(wbar - w*)(wbar - w*)^T`` along one simulated full ensemble."""
    state = FullEnsembleState(np.repeat(problem.w_star[None, :], K, axis=0))
    acc = np.zeros((problem.dim, problem.dim))
    total = burn_in + steps
    t = 0
    while t < total:
        m = min(chunk, total - t)
        noise = sample_noise(problem, rng, (m, K))
        for j in range(m):
            state = full_ensemble_step(problem, state, eta=eta, noise=noise[j])
            if t + j >= burn_in:
                d = state.mean_model() - problem.w_star
                acc += np.outer(d, d)
        t += m
    return acc / steps


@dataclass
class SteadyStateLoss:
    mean: float
    std: float
    per_seed: np.ndarray


def steady_state_loss_estimate(trajectories, k_avg: int) -> SteadyStateLoss:
    """Average the last ``k_avg`` losses of each trajectory, then across trajectories.

    ``std`` is the sample standard deviation across trajectories (0 for one).
    """
    rows = [np.asarray(trajectories, dtype=np.float64)] if np.ndim(trajectories[0]) == 0 \
        else [np.asarray(t, dtype=np.float64) for t in trajectories]
    if k_avg < 1:
        raise ConfigError("k_avg must be >= 1")
    for r in rows:
        if r.shape[0] < k_avg:
            raise ConfigError(f"trajectory of length {r.shape[0]} is shorter than k_avg={k_avg}")
    per_seed = np.array([r[-k_avg:].mean() for r in rows])
    std = float(per_seed.std(ddof=1)) if per_seed.size > 1 else 0.0
    return SteadyStateLoss(float(per_seed.mean()), std, per_seed)


@dataclass
class NqpExperimentConfig:
    n: int = 20
    d: int = 1
    K_list: tuple = (1, 2, 5, 10, 20)
    eta: float = 0.05
    iters: int = 1_000_000
    k_avg: int = 10_000
    seeds: tuple = (0, 1, 2, 3, 4)
    init_distance: float = 1.0
    batch_size: int = 1
    gamma_theta: float | None = None
    sigma0: float = 0.0
    chunk: int = 2048

    def validate(self):
        if self.n < 1 or self.d < 1:
            raise ConfigError("n and d must be >= 1")
        if not self.K_list or min(self.K_list) < 1:
            raise ConfigError("K_list must contain positive integers")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.iters < self.k_avg or self.k_avg < 1:
            raise ConfigError("iters must be >= k_avg >= 1")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.init_distance < 0 or self.sigma0 < 0:
            raise ConfigError("init_distance and sigma0 must be nonnegative")
        return self


@dataclass
class NqpRow:
    method: str
    K: int
    seed: object  # int, or "all" for aggregates
    steady_loss: float
    std: float


def standard_problem_batch(cfg: NqpExperimentConfig) -> NqpProblem:
    """Standard instance whose ``w_star`` is stacked over seeds, shape (S, n)."""
    targets = np.stack([draw_target(RngStream(s, _STREAM_TARGET), cfg.n) for s in cfg.seeds])
    problem = make_standard_problem(cfg.n, w_star=targets, batch_size=cfg.batch_size)
    return problem


def initial_late_state(cfg: NqpExperimentConfig, seed: int, w_star, K: int) -> NqpLateState:
    """Random start at distance ``init_distance`` from ``w_star``.

    The direction of the start comes from standard-normal ``theta`` and ``e``;
    the start itself is factorized with ``||theta||_F^2 = ||e||^2`` and all
    members share the embedding, optionally perturbed by ``sigma0``.
    """
    rng = RngStream(seed, _STREAM_INIT)
    theta_raw = rng.normal((cfg.n, cfg.d))
    e_raw = rng.normal(cfg.d)
    offset = theta_raw @ e_raw - w_star
    norm = np.linalg.norm(offset)
    direction = offset / norm if norm > 0 else np.eye(cfg.n)[0]
    w0 = w_star + cfg.init_distance * direction
    w0_norm = np.linalg.norm(w0)
    e0 = e_raw / np.linalg.norm(e_raw) * math.sqrt(w0_norm)
    theta0 = np.outer(w0, e0) / (e0 @ e0)
    emb = np.repeat(e0[None, :], K, axis=0)
    if cfg.sigma0 > 0:
        z = math.sqrt(cfg.d) / np.linalg.norm(e0)
        emb = emb + (cfg.sigma0 / z) * rng.child(K).normal((K, cfg.d))
    return NqpLateState(theta0, emb)


def _simulate(cfg: NqpExperimentConfig, method: str, K: int):
    """Run one (method, K) cell for every seed; returns (S, k_avg) losses."""
    problem = standard_problem_batch(cfg)
    check_contractive(problem, cfg.eta)
    S, n = len(cfg.seeds), cfg.n
    if method == "late_phase":
        states = [initial_late_state(cfg, s, problem.w_star[i], K) for i, s in enumerate(cfg.seeds)]
        state = NqpLateState(np.stack([st.theta for st in states]),
                             np.stack([st.embeddings for st in states]))
        step = lambda st, eps: late_phase_nqp_step(problem, st, eta=cfg.eta,
                                                   gamma_theta=cfg.gamma_theta, noise=eps)
    elif method == "full_ensemble":
        starts = [initial_late_state(cfg, s, problem.w_star[i], 1).mean_model()
                  for i, s in enumerate(cfg.seeds)]
        state = FullEnsembleState(np.repeat(np.stack(starts)[:, None, :], K, axis=1))
        step = lambda st, eps: full_ensemble_step(problem, st, eta=cfg.eta, noise=eps)
    else:
        raise ConfigError(f"cannot simulate method {method!r}")
    method_id = METHODS.index(method)
    streams = [RngStream(s, (_STREAM_NOISE, method_id, K)) for s in cfg.seeds]
    factor_t = problem.noise_factor.T
    record_from = cfg.iters - cfg.k_avg
    losses = np.empty((S, cfg.k_avg))
    t = 0
    while t < cfg.iters:
        m = min(cfg.chunk, cfg.iters - t)
        noise = np.stack([rs.normal((m, K, n)) for rs in streams], axis=1) @ factor_t
        for j in range(m):
            state = step(state, noise[j])
            if t + j >= record_from:
                losses[:, t + j - record_from] = clean_loss(problem, state.mean_model())
        t += m
    if not np.all(np.isfinite(losses)):
        raise NumericalError(f"{method} diverged at K={K}; reduce eta")
    return losses


def _run_cell(args):
    cfg, method, K = args
    return method, K, _simulate(cfg, method, K)


def closed_form_loss(problem: NqpProblem, eta: float, K: int) -> float:
    """Clean steady-state loss of the full-ensemble mean model."""
    cov = steady_state_covariance(problem, eta, K)
    return 0.5 * float(np.trace(problem.hessian @ cov))


def fit_loglog_slope(Ks, losses) -> float:
    Ks = np.asarray(Ks, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if np.unique(Ks).size < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(Ks), np.log(losses), 1)
    return float(slope)


@dataclass
class NqpExperimentResult:
    config: NqpExperimentConfig
    rows: list
    slopes: dict

    def aggregate(self, method):
        return {r.K: r.steady_loss for r in self.rows if r.method == method and r.seed == "all"}


def nqp_scaling_experiment(cfg: NqpExperimentConfig, jobs: int = 1,
                           methods=METHODS) -> NqpExperimentResult:
    """Steady-state clean loss of the mean model for every K and method.

    Emits one row per (method, K, seed) plus one aggregate row per (method, K)
    with ``seed="all"``; ``closed_form`` rows are aggregate only. Rows are
    sorted by method, K, seed regardless of ``jobs``.
    """
    cfg.validate()
    problem = standard_problem_batch(cfg)
    check_contractive(problem, cfg.eta)
    Ks = sorted(set(int(k) for k in cfg.K_list))
    cells = [(cfg, m, K) for m in methods if m != "closed_form" for K in Ks]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows = []
    for method, K, losses in sorted(results, key=lambda r: (METHODS.index(r[0]), r[1])):
        est = steady_state_loss_estimate(list(losses), cfg.k_avg)
        for seed, traj in zip(cfg.seeds, losses):
            rows.append(NqpRow(method, K, int(seed), float(traj.mean()), float(traj.std())))
        rows.append(NqpRow(method, K, "all", est.mean, est.std))
    if "closed_form" in methods:
        for K in Ks:
            single = make_standard_problem(cfg.n, w_star=np.zeros(cfg.n), batch_size=cfg.batch_size)
            rows.append(NqpRow("closed_form", K, "all", closed_form_loss(single, cfg.eta, K), 0.0))
    slopes = {}
    for method in methods:
        agg = [(r.K, r.steady_loss) for r in rows if r.method == method and r.seed == "all"]
        slopes[method] = fit_loglog_slope([a[0] for a in agg], [a[1] for a in agg])
    return NqpExperimentResult(cfg, rows, slopes)


def config_from_dict(values: dict) -> NqpExperimentConfig:
    known = {f for f in NqpExperimentConfig.__dataclass_fields__}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown nqp option(s): {sorted(unknown)}")
    cfg = replace(NqpExperimentConfig(), **values)
    cfg.K_list = tuple(int(k) for k in cfg.K_list)
    cfg.seeds = tuple(int(s) for s in cfg.seeds)
    return cfg.validate()


def config_to_dict(cfg: NqpExperimentConfig) -> dict:
    d = asdict(cfg)
    d["K_list"] = list(cfg.K_list)
    d["seeds"] = list(cfg.seeds)
    return d
